#![allow(dead_code)]

pub mod scenarios;

use std::collections::BTreeMap;

use batchstore::client::GatewayClient;
use batchstore::harness::LocalCluster;
use batchstore_core::config::Tuning;
use batchstore_core::model::{canonical_entry_name, BatchRequest, ObjectRef};
use batchstore_core::tar::TarWriter;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BUCKET: &str = "data";

pub fn tuning() -> Tuning {
    Tuning {
        fsync: false,
        rxwait_timeout_ms: 2_000,
        ..Tuning::default()
    }
}

pub fn cluster(targets: usize, tuning: Tuning) -> LocalCluster {
    LocalCluster::start(targets, tuning).expect("cluster starts")
}

pub fn rt() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap()
}

/// Source of truth for what every entry should contain.
#[derive(Default)]
pub struct Dataset {
    pub objects: Vec<String>,
    /// shard name -> member names
    pub shards: BTreeMap<String, Vec<String>>,
    pub content: BTreeMap<String, Vec<u8>>,
}

impl Dataset {
    pub fn expected(&self, r: &ObjectRef) -> Option<&Vec<u8>> {
        self.content.get(&canonical_entry_name(r))
    }

    pub fn random_ref(&self, rng: &mut impl Rng) -> ObjectRef {
        if !self.shards.is_empty() && rng.gen_bool(0.3) {
            let i = rng.gen_range(0..self.shards.len());
            let (shard, members) = self.shards.iter().nth(i).unwrap();
            let m = &members[rng.gen_range(0..members.len())];
            ObjectRef::member(BUCKET, shard.clone(), m.clone())
        } else {
            ObjectRef::new(BUCKET, self.objects[rng.gen_range(0..self.objects.len())].clone())
        }
    }

    pub fn random_batch(&self, rng: &mut impl Rng, n: usize) -> BatchRequest {
        BatchRequest::new((0..n).map(|_| self.random_ref(rng)).collect())
    }
}

fn random_bytes(rng: &mut impl Rng, max: usize) -> Vec<u8> {
    let n = rng.gen_range(0..=max);
    let mut v = vec![0u8; n];
    rng.fill(&mut v[..]);
    v
}

/// Uploads `objects` plain objects and `shards` TAR shards of 8 members each.
pub async fn populate(client: &GatewayClient, seed: u64, objects: usize, shards: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::default();
    for i in 0..objects {
        let name = format!("obj-{i:04}");
        let body = random_bytes(&mut rng, 3000);
        client.put_object(BUCKET, &name, body.clone()).await.unwrap();
        ds.content.insert(format!("{BUCKET}/{name}"), body);
        ds.objects.push(name);
    }
    for s in 0..shards {
        let shard = format!("shard-{s:03}.tar");
        let mut w = TarWriter::new(Vec::new());
        let mut members = Vec::new();
        for m in 0..8 {
            let member = format!("sample-{m}.bin");
            let body = random_bytes(&mut rng, 2000);
            w.emit_entry(&member, &body).unwrap();
            ds.content.insert(format!("{BUCKET}/{shard}/{member}"), body);
            members.push(member);
        }
        w.finalize().unwrap();
        client.put_object(BUCKET, &shard, w.into_inner()).await.unwrap();
        ds.shards.insert(shard, members);
    }
    ds
}
