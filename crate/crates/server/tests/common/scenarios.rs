//! Scenarios shared by the integration tests and the acceptance run.

pub mod admission {

use batchstore::client::{ClientError, GatewayClient};
use batchstore::harness::LocalCluster;
use batchstore::pressure::{FaultSpec, InjectedPressure};
use batchstore_core::model::{BatchRequest, ObjectRef};
use batchstore_core::placement::owner_of;
use batchstore_core::tar::parse_archive;
use crate::common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

async fn pressure_all(client: &GatewayClient, c: &LocalCluster, mem: f64, cpu: f64) {
    for t in c.target_ids() {
        let spec = FaultSpec {
            pressure: Some(InjectedPressure { mem, cpu, disk: 0.0 }),
            ..Default::default()
        };
        client.set_faults(&c.url(&t), &spec).await.unwrap();
    }
}

async fn sum(client: &GatewayClient, c: &LocalCluster, key: &str) -> f64 {
    let mut s = 0.0;
    for t in c.target_ids() {
        s += client.metrics(&c.url(&t)).await.unwrap()[key];
    }
    s
}

/// New batches get 429 under memory pressure while an admitted one completes.
pub fn memory_pressure_rejects_new_batches_but_finishes_admitted_ones() {
    let c = cluster(3, tuning());
    rt().block_on(async {
        let client = GatewayClient::new(c.gateway_url());
        let ds = populate(&client, 20, 40, 2).await;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        pressure_all(&client, &c, 0.0, 0.0).await;
        let admitted = ds.random_batch(&mut rng, 30);
        let (loc, _) = client
            .submit_batch(bytes::Bytes::from(admitted.to_json()), None)
            .await
            .unwrap();

        pressure_all(&client, &c, 0.95, 0.0).await;
        let rejects_before = sum(&client, &c, "admission_rejects_total").await;
        for _ in 0..20 {
            let req = ds.random_batch(&mut rng, 10);
            match client.get_batch(&req, None).await {
                Err(ClientError::RateLimited(_)) => {}
                other => panic!("expected 429, got {:?}", other.map(|r| r.entries.len())),
            }
        }
        assert_eq!(sum(&client, &c, "admission_rejects_total").await - rejects_before, 20.0);

        let body = reqwest::get(&loc).await.unwrap().error_for_status().unwrap().bytes().await.unwrap();
        let entries = parse_archive(&body).unwrap();
        assert_eq!(entries.len(), 30);
        for (e, r) in entries.iter().zip(&admitted.entries) {
            assert_eq!(&e.payload, ds.expected(r).unwrap());
        }

        pressure_all(&client, &c, 0.5, 0.0).await;
        client.get_batch(&ds.random_batch(&mut rng, 10), None).await.unwrap();
    });
}

/// CPU pressure inserts exactly the configured sleep per item and no rxwait.
pub fn cpu_pressure_throttles_without_touching_rxwait() {
    let c = cluster(3, tuning());
    let step = c.config.tuning.throttle_step_ms as f64 / 1000.0;
    let thr = c.config.tuning.busy_threshold;
    rt().block_on(async {
        let client = GatewayClient::new(c.gateway_url());
        let ds = populate(&client, 22, 60, 0).await;
        let map = client.cluster_map().await.unwrap();
        // every entry owned by t1, so with coloc there is nothing to wait for
        let local: Vec<ObjectRef> = ds
            .objects
            .iter()
            .map(|o| ObjectRef::new(BUCKET, o.clone()))
            .filter(|r| owner_of(&map, r).as_str() == "t1")
            .take(8)
            .collect();
        assert_eq!(local.len(), 8);
        let run = |strm: bool| {
            let mut req = BatchRequest::new(local.clone());
            req.strm = strm;
            req
        };

        pressure_all(&client, &c, 0.0, 0.0).await;
        let (t0, r0) = (sum(&client, &c, "throttle_seconds_total").await, sum(&client, &c, "rxwait_seconds_total").await);
        for i in 0..4 {
            client.get_batch(&run(i % 2 == 0), Some(1)).await.unwrap();
        }
        assert_eq!(sum(&client, &c, "throttle_seconds_total").await, t0);
        assert_eq!(sum(&client, &c, "rxwait_seconds_total").await, r0);

        pressure_all(&client, &c, 0.0, 0.95).await;
        for i in 0..4 {
            let resp = client.get_batch(&run(i % 2 == 0), Some(1)).await.unwrap();
            assert_eq!(resp.entries.len(), 8);
        }
        let per_item = step * (1.0 + (0.95 - thr) / (1.0 - thr));
        let throttled = sum(&client, &c, "throttle_seconds_total").await - t0;
        assert!(throttled > 0.0);
        assert!((throttled - 32.0 * per_item).abs() < 1e-6, "throttled {throttled}s, want {}", 32.0 * per_item);
        assert_eq!(sum(&client, &c, "rxwait_seconds_total").await, r0);
    });
}
}

pub mod metrics {

use std::collections::BTreeMap;

use batchstore::client::{ClientError, GatewayClient};
use batchstore::pressure::{FaultSpec, InjectedPressure};
use batchstore_core::config::Tuning;
use batchstore_core::metrics::METRIC_NAMES;
use batchstore_core::model::{BatchRequest, ObjectRef};
use batchstore_core::placement::{owner_of, ClusterMap};
use crate::common::*;

const RX: f64 = 0.3;

fn pinned(mem: f64, mute: bool) -> FaultSpec {
    FaultSpec {
        pressure: Some(InjectedPressure { mem, cpu: 0.0, disk: 0.0 }),
        mute_sender: mute,
        ..Default::default()
    }
}

#[derive(Default)]
struct Truth(BTreeMap<&'static str, f64>);

impl Truth {
    fn add(&mut self, k: &'static str, v: f64) {
        *self.0.entry(k).or_default() += v;
    }

    /// Counts a batch the DT fully emits.
    fn emitted(&mut self, ds: &Dataset, req: &BatchRequest, soft: usize) {
        self.add("work_items_total", req.len() as f64);
        self.add("soft_errors_total", soft as f64);
        for r in &req.entries {
            let Some(b) = ds.expected(r) else { continue };
            if r.is_member() {
                self.add("delivered_shard_members_count", 1.0);
                self.add("delivered_shard_members_bytes", b.len() as f64);
            } else {
                self.add("delivered_objects_count", 1.0);
                self.add("delivered_objects_bytes", b.len() as f64);
            }
        }
    }
}

fn owned(map: &ClusterMap, refs: impl Iterator<Item = ObjectRef>, by: &str) -> Vec<ObjectRef> {
    refs.filter(|r| owner_of(map, r).as_str() == by).collect()
}

/// Ten batches with a known mix; every counter is compared with a hand tally.
pub fn ten_batch_scenario_matches_hand_computed_counters() {
    let mut c = cluster(3, Tuning { rxwait_timeout_ms: 300, gfn_attempts: 2, ..tuning() });
    let rt = rt();
    let client = GatewayClient::new(c.gateway_url());
    let (ds, map) = rt.block_on(async {
        let ds = populate(&client, 30, 120, 12).await;
        for t in c.target_ids() {
            client.set_faults(&c.url(&t), &pinned(0.0, false)).await.unwrap();
        }
        (ds, client.cluster_map().await.unwrap())
    });
    let objs = |by| owned(&map, ds.objects.iter().map(|o| ObjectRef::new(BUCKET, o.clone())), by);
    let members = owned(
        &map,
        ds.shards.iter().flat_map(|(s, ms)| ms.iter().map(move |m| ObjectRef::member(BUCKET, s.clone(), m.clone()))),
        "t1",
    );
    let missing = owned(&map, (0..400).map(|i| ObjectRef::new(BUCKET, format!("missing-{i}"))), "t1");
    let (t1, t2, t3) = (objs("t1"), objs("t2"), objs("t3"));
    assert!(t1.len() >= 16 && members.len() >= 8 && missing.len() >= 10, "dataset too skewed");

    let mut truth = Truth::default();
    let mut rx_floor = 0.0;
    rt.block_on(async {
        // six mixed batches with 0..=5 misses, all owned by t1
        for b in 0..6 {
            let mut entries: Vec<ObjectRef> = t1.iter().skip(b).take(10).cloned().collect();
            entries.extend(members.iter().skip(b).take(4).cloned());
            entries.extend(missing.iter().skip(b).take(b).cloned());
            let shift = b * 3 % entries.len();
            entries.rotate_left(shift);
            let mut req = BatchRequest::new(entries);
            req.coer = true;
            req.strm = b % 2 == 0;
            let resp = client.get_batch(&req, Some(1)).await.unwrap();
            assert_eq!(resp.entries.iter().filter(|e| e.is_placeholder()).count(), b);
            truth.emitted(&ds, &req, b);
        }

        // a miss without coer aborts before anything is emitted
        let mut req = BatchRequest::new(t1.iter().take(5).cloned().chain([missing[0].clone()]).collect());
        req.coer = false;
        assert!(client.get_batch(&req, Some(1)).await.is_err());
        truth.add("hard_errors_total", 1.0);

        // rejected at admission
        client.set_faults(&c.url("t1"), &pinned(0.95, false)).await.unwrap();
        let req = BatchRequest::new(t1.iter().take(4).cloned().collect());
        assert!(matches!(client.get_batch(&req, Some(1)).await, Err(ClientError::RateLimited(_))));
        truth.add("admission_rejects_total", 1.0);
        client.set_faults(&c.url("t1"), &pinned(0.0, false)).await.unwrap();

        // t2 ignores its activation; one recovery round pulls both entries
        client.set_faults(&c.url("t2"), &pinned(0.0, true)).await.unwrap();
        let mut req = BatchRequest::new(t1.iter().take(6).cloned().chain(t2.iter().take(2).cloned()).collect());
        req.coer = true;
        client.get_batch(&req, Some(1)).await.unwrap();
        truth.emitted(&ds, &req, 0);
        truth.add("recovery_attempts_total", 1.0);
        rx_floor += RX;
        client.set_faults(&c.url("t2"), &pinned(0.0, false)).await.unwrap();
    });

    // t3 is gone: two rounds, then both of its entries time out
    c.kill("t3").unwrap();
    rt.block_on(async {
        let mut req = BatchRequest::new(t1.iter().take(6).cloned().chain(t3.iter().take(2).cloned()).collect());
        req.coer = true;
        req.strm = true;
        let resp = client.get_batch(&req, Some(1)).await.unwrap();
        assert_eq!(resp.entries.iter().filter(|e| e.soft_error_reason() == Some("timeout")).count(), 2);
        truth.emitted(&ds, &req, 2);
        // the ok-entry tally above counted t3's entries; take them back out
        for r in t3.iter().take(2) {
            truth.add("delivered_objects_count", -1.0);
            truth.add("delivered_objects_bytes", -(ds.expected(r).unwrap().len() as f64));
        }
        truth.add("recovery_attempts_total", 2.0);
        truth.add("recovery_failures_total", 2.0);
        rx_floor += 3.0 * RX;

        let mut got: BTreeMap<String, f64> = BTreeMap::new();
        for id in ["proxy", "t1", "t2"] {
            for (k, v) in client.metrics(&c.url(id)).await.unwrap() {
                *got.entry(k).or_default() += v;
            }
        }
        for name in METRIC_NAMES {
            let v = got[*name];
            match *name {
                "rxwait_seconds_total" => assert!(
                    v >= rx_floor && v < rx_floor + 1.0,
                    "rxwait {v}s outside [{rx_floor}, {})",
                    rx_floor + 1.0
                ),
                n => assert_eq!(v, truth.0.get(n).copied().unwrap_or(0.0), "{n}"),
            }
        }
    });
}
}
