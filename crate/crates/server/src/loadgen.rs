//! GET vs GetBatch load generation.
//!
//! Objects are named `obj-%08d` and filled from a seeded ChaCha stream, so any
//! object's content can be regenerated from `(seed, index, size)`.

use std::io::{self, Read};
use std::sync::Arc;
use std::time::{Duration, Instant};

use batchstore_core::model::{BatchRequest, ObjectRef};
use batchstore_core::stats::{BenchMode, BenchReport, LatencySummary};
use batchstore_core::tar::{TarReader, STATUS_KEY};
use bytes::{Buf, Bytes};
use parking_lot::Mutex;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::client::{ClientError, GatewayClient};

#[derive(Debug, Error)]
pub enum LoadgenError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("preparing {name}: {source}")]
    Prepare { name: String, source: ClientError },
    #[error("cache drop hook failed: {0}")]
    Hook(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub mode: BenchMode,
    pub object_size: u64,
    pub batch_size: usize,
    pub workers: usize,
    pub duration: Duration,
    pub bucket: String,
    pub seed: u64,
    pub gateway: String,
    pub coloc: bool,
    pub strm: bool,
    /// Objects `0..count` exist in the bucket.
    pub count: usize,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), LoadgenError> {
        if self.workers == 0 {
            return Err(LoadgenError::Config("workers must be >= 1".into()));
        }
        if self.duration < Duration::from_secs(1) {
            return Err(LoadgenError::Config("duration must be >= 1 s".into()));
        }
        if self.object_size == 0 {
            return Err(LoadgenError::Config("object size must be > 0".into()));
        }
        if self.count == 0 {
            return Err(LoadgenError::Config("dataset is empty".into()));
        }
        if self.mode == BenchMode::Getbatch && self.batch_size == 0 {
            return Err(LoadgenError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parses `4096`, `10KiB`, `1MiB`, `2GiB`, `10KB` (decimal) and friends.
pub fn parse_size(s: &str) -> Result<u64, LoadgenError> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num
        .parse()
        .map_err(|_| LoadgenError::Config(format!("bad size {s:?}")))?;
    let mult: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kib" => 1 << 10,
        "m" | "mib" => 1 << 20,
        "g" | "gib" => 1 << 30,
        "kb" => 1_000,
        "mb" => 1_000_000,
        "gb" => 1_000_000_000,
        _ => return Err(LoadgenError::Config(format!("bad size unit in {s:?}"))),
    };
    n.checked_mul(mult)
        .ok_or_else(|| LoadgenError::Config(format!("size {s:?} overflows")))
}

pub fn object_name(i: usize) -> String {
    format!("obj-{i:08}")
}

pub fn object_content(seed: u64, index: usize, size: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut v = vec![0u8; size as usize];
    rng.fill_bytes(&mut v);
    v
}

/// Writes `count` objects with up to `parallel` PUTs in flight.
pub async fn prepare_dataset(
    client: &GatewayClient,
    bucket: &str,
    count: usize,
    size: u64,
    seed: u64,
    parallel: usize,
) -> Result<usize, LoadgenError> {
    use futures::StreamExt;
    if count == 0 {
        return Err(LoadgenError::Config("refusing to prepare an empty dataset".into()));
    }
    let results: Vec<Result<(), LoadgenError>> = futures::stream::iter(0..count)
        .map(|i| async move {
            let name = object_name(i);
            client
                .put_object(bucket, &name, object_content(seed, i, size))
                .await
                .map_err(|source| LoadgenError::Prepare { name, source })
        })
        .buffer_unordered(parallel.max(1))
        .collect()
        .await;
    results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(count)
}

/// Runs a cache-drop hook script; any nonzero exit is an error.
pub fn run_cachedrop(script: &std::path::Path) -> Result<(), LoadgenError> {
    let status = std::process::Command::new(script)
        .status()
        .map_err(|e| LoadgenError::Hook(format!("{}: {e}", script.display())))?;
    if status.success() {
        Ok(())
    } else {
        Err(LoadgenError::Hook(format!("{} exited with {status}", script.display())))
    }
}

#[derive(Default)]
struct Samples {
    batch: Vec<Duration>,
    per_object: Vec<Duration>,
    requests: u64,
    errors: u64,
    objects: u64,
    payload: u64,
    framing: u64,
}

/// One measured request: sampled names in, outcome out.
pub struct Measured {
    pub latency: Duration,
    pub objects: u64,
    pub payload: u64,
    pub framing: u64,
}

/// Feeds response chunks to a blocking reader.
struct ChunkReader {
    rx: crossbeam_channel::Receiver<Bytes>,
    cur: Bytes,
}

impl Read for ChunkReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        while self.cur.is_empty() {
            match self.rx.recv() {
                Ok(b) => self.cur = b,
                Err(_) => return Ok(0),
            }
        }
        let n = buf.len().min(self.cur.len());
        buf[..n].copy_from_slice(&self.cur[..n]);
        self.cur.advance(n);
        Ok(n)
    }
}

/// Walks archive headers, checking entry count and that no entry is a
/// placeholder. Returns `(entries, payload bytes)`.
fn walk_archive(r: impl Read, expect: usize) -> Result<(u64, u64), ClientError> {
    let mut reader = TarReader::new(r);
    let (mut objects, mut payload) = (0u64, 0u64);
    while let Some(h) = reader.next_header(true)? {
        if h.pax.contains_key(STATUS_KEY) {
            return Err(ClientError::Protocol(format!("placeholder for {}", h.name)));
        }
        objects += 1;
        payload += h.size;
    }
    if objects != expect as u64 {
        return Err(ClientError::Protocol(format!("expected {expect} entries, got {objects}")));
    }
    Ok((objects, payload))
}

async fn drain(resp: &mut reqwest::Response, mut sink: impl FnMut(Bytes)) -> Result<u64, ClientError> {
    let mut total = 0u64;
    while let Some(c) = resp
        .chunk()
        .await
        .map_err(|e| ClientError::Protocol(format!("stream aborted: {e}")))?
    {
        total += c.len() as u64;
        sink(c);
    }
    Ok(total)
}

/// One per-object GET, timed until the last body byte. The body is counted,
/// not kept.
pub async fn timed_get(client: &GatewayClient, bucket: &str, name: &str) -> Result<Measured, ClientError> {
    let t = Instant::now();
    let mut resp = client.open_object(bucket, name, None).await?;
    let payload = drain(&mut resp, drop).await?;
    Ok(Measured {
        latency: t.elapsed(),
        objects: 1,
        payload,
        framing: 0,
    })
}

/// One GetBatch, timed until the last body byte. The archive is checked by
/// the strict reader on a blocking thread as it arrives and never held whole.
pub async fn timed_batch(
    client: &GatewayClient,
    req: &BatchRequest,
    coloc: bool,
) -> Result<Measured, ClientError> {
    let t = Instant::now();
    let (mut resp, _, _) = client.open_batch(req, coloc.then_some(1)).await?;
    let (tx, rx) = crossbeam_channel::unbounded();
    let expect = req.len();
    let walker = tokio::task::spawn_blocking(move || walk_archive(ChunkReader { rx, cur: Bytes::new() }, expect));
    let received = drain(&mut resp, |c| {
        let _ = tx.send(c);
    })
    .await;
    drop(tx);
    let latency = t.elapsed();
    let walked = walker
        .await
        .map_err(|e| ClientError::Protocol(format!("archive walker failed: {e}")))?;
    let total = received?;
    let (objects, payload) = walked?;
    Ok(Measured {
        latency,
        objects,
        payload,
        framing: total - payload,
    })
}

pub fn sample_batch(rng: &mut impl Rng, cfg: &BenchConfig) -> BatchRequest {
    let entries = (0..cfg.batch_size)
        .map(|_| ObjectRef::new(cfg.bucket.clone(), object_name(rng.gen_range(0..cfg.count))))
        .collect();
    let mut req = BatchRequest::new(entries);
    req.strm = cfg.strm;
    req
}

pub async fn run(cfg: &BenchConfig) -> Result<BenchReport, LoadgenError> {
    cfg.validate()?;
    let http = reqwest::Client::builder()
        .redirect(reqwest::redirect::Policy::none())
        .pool_max_idle_per_host(cfg.workers * 2)
        .build()
        .expect("http client builds");
    let client = GatewayClient::with_client(cfg.gateway.clone(), http);
    let samples = Arc::new(Mutex::new(Samples::default()));
    let started = Instant::now();
    let deadline = started + cfg.duration;
    let mut tasks = Vec::new();
    for w in 0..cfg.workers {
        let (client, samples, cfg) = (client.clone(), samples.clone(), cfg.clone());
        tasks.push(tokio::spawn(async move {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(w as u64));
            while Instant::now() < deadline {
                let res = match cfg.mode {
                    BenchMode::Get => {
                        let name = object_name(rng.gen_range(0..cfg.count));
                        timed_get(&client, &cfg.bucket, &name).await
                    }
                    BenchMode::Getbatch => {
                        let req = sample_batch(&mut rng, &cfg);
                        timed_batch(&client, &req, cfg.coloc).await
                    }
                };
                let mut s = samples.lock();
                match res {
                    Ok(m) => {
                        s.requests += 1;
                        s.objects += m.objects;
                        s.payload += m.payload;
                        s.framing += m.framing;
                        s.batch.push(m.latency);
                        s.per_object.push(m.latency / m.objects.max(1) as u32);
                    }
                    Err(e) => {
                        s.errors += 1;
                        tracing::debug!(error = %e, "request failed");
                    }
                }
            }
        }));
    }
    for t in tasks {
        let _ = t.await;
    }
    let elapsed = started.elapsed().as_secs_f64();
    let s = std::mem::take(&mut *samples.lock());
    Ok(BenchReport {
        mode: cfg.mode,
        object_size_bytes: cfg.object_size,
        batch_size: if cfg.mode == BenchMode::Get { 1 } else { cfg.batch_size },
        workers: cfg.workers,
        duration_s: elapsed,
        request_count: s.requests,
        error_count: s.errors,
        objects_fetched: s.objects,
        total_bytes: s.payload,
        framing_bytes: s.framing,
        throughput_gib_s: s.payload as f64 / (1u64 << 30) as f64 / elapsed,
        batch_latency: LatencySummary::from_samples(&s.batch).unwrap_or_default(),
        per_object_latency: LatencySummary::from_samples(&s.per_object).unwrap_or_default(),
    })
}
