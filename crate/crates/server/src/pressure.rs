//! Resource pressure sampling and test fault hooks.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use batchstore_core::admission::{PressureSource, PressureState};
use parking_lot::Mutex;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::store::TargetStore;

const SAMPLE_EVERY: Duration = Duration::from_millis(250);
const SMOOTHING: f64 = 0.5;

/// Fault-injection settings accepted by `POST /v1/debug/faults`. Posting a
/// spec replaces the previous one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultSpec {
    /// Each sender-side delivery sleeps a uniform `[min, max]` ms first.
    pub sender_delay_ms: Option<(u64, u64)>,
    /// Ignore activations entirely, as if the node missed them.
    pub mute_sender: bool,
    /// Replaces measured pressure.
    pub pressure: Option<InjectedPressure>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectedPressure {
    pub mem: f64,
    pub cpu: f64,
    pub disk: f64,
}

#[derive(Default)]
pub struct Faults(Mutex<FaultSpec>);

impl Faults {
    pub fn set(&self, spec: FaultSpec) {
        *self.0.lock() = spec;
    }

    pub fn get(&self) -> FaultSpec {
        self.0.lock().clone()
    }

    pub fn sender_muted(&self) -> bool {
        self.0.lock().mute_sender
    }

    pub fn sender_delay(&self) -> Option<Duration> {
        let (lo, hi) = self.0.lock().sender_delay_ms?;
        let ms = if hi > lo {
            rand::thread_rng().gen_range(lo..=hi)
        } else {
            lo
        };
        Some(Duration::from_millis(ms))
    }

    fn injected(&self) -> Option<PressureState> {
        self.0
            .lock()
            .pressure
            .map(|p| PressureState::injected(p.mem, p.cpu, p.disk))
    }
}

/// Raw cumulative readings from the OS.
#[derive(Debug, Clone, Copy)]
struct Reading {
    at: Instant,
    cpu_ticks: u64,
    disk_nanos: u64,
    rss_bytes: u64,
}

fn proc_cpu_ticks() -> u64 {
    let Ok(stat) = std::fs::read_to_string("/proc/self/stat") else {
        return 0;
    };
    // fields after the parenthesised command name; utime and stime are 14 and 15
    let Some(rest) = stat.rfind(')').map(|i| &stat[i + 1..]) else {
        return 0;
    };
    let f: Vec<&str> = rest.split_whitespace().collect();
    let num = |i: usize| f.get(i).and_then(|s| s.parse::<u64>().ok()).unwrap_or(0);
    num(11) + num(12)
}

fn proc_rss_bytes() -> u64 {
    let pages = std::fs::read_to_string("/proc/self/statm")
        .ok()
        .and_then(|s| s.split_whitespace().nth(1).and_then(|v| v.parse::<u64>().ok()))
        .unwrap_or(0);
    // SAFETY: sysconf has no preconditions.
    let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    pages * page.max(1) as u64
}

fn clock_ticks_per_sec() -> f64 {
    // SAFETY: sysconf has no preconditions.
    let t = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if t > 0 {
        t as f64
    } else {
        100.0
    }
}

pub struct PressureMonitor {
    faults: Arc<Faults>,
    measured: Mutex<PressureState>,
    mem_budget_bytes: u64,
    samples: AtomicU64,
}

impl PressureMonitor {
    pub fn new(faults: Arc<Faults>, mem_budget_mb: u64) -> Self {
        PressureMonitor {
            faults,
            measured: Mutex::new(PressureState::idle()),
            mem_budget_bytes: mem_budget_mb.max(1) << 20,
            samples: AtomicU64::new(0),
        }
    }

    /// Injected pressure if set, else the latest smoothed measurement.
    pub fn current(&self) -> PressureState {
        self.faults.injected().unwrap_or_else(|| *self.measured.lock())
    }

    pub fn measured(&self) -> PressureState {
        *self.measured.lock()
    }

    fn read(store: Option<&TargetStore>) -> Reading {
        Reading {
            at: Instant::now(),
            cpu_ticks: proc_cpu_ticks(),
            disk_nanos: store.map_or(0, |s| s.busy_nanos()),
            rss_bytes: proc_rss_bytes(),
        }
    }

    fn update(&self, prev: Reading, cur: Reading, disk_workers: usize) {
        let wall = cur.at.duration_since(prev.at).as_secs_f64().max(1e-6);
        let cpus = std::thread::available_parallelism().map_or(1, |n| n.get()) as f64;
        let cpu = (cur.cpu_ticks.saturating_sub(prev.cpu_ticks)) as f64
            / clock_ticks_per_sec()
            / (wall * cpus);
        let disk = (cur.disk_nanos.saturating_sub(prev.disk_nanos)) as f64
            / 1e9
            / (wall * disk_workers.max(1) as f64);
        let mem = cur.rss_bytes as f64 / self.mem_budget_bytes as f64;
        let mut m = self.measured.lock();
        let smooth = |old: f64, new: f64| old * (1.0 - SMOOTHING) + new * SMOOTHING;
        *m = PressureState::new(
            mem,
            smooth(m.cpu_busy_fraction, cpu),
            smooth(m.disk_busy_fraction, disk),
            PressureSource::Measured,
        );
        self.samples.fetch_add(1, Ordering::Relaxed);
    }

    /// Samples until the returned task is aborted.
    pub fn spawn_sampler(self: &Arc<Self>, store: Option<Arc<TargetStore>>) -> tokio::task::JoinHandle<()> {
        let me = self.clone();
        tokio::spawn(async move {
            let workers = store.as_ref().map_or(1, |s| s.readahead_workers());
            let mut prev = Self::read(store.as_deref());
            loop {
                tokio::time::sleep(SAMPLE_EVERY).await;
                let cur = Self::read(store.as_deref());
                me.update(prev, cur, workers);
                prev = cur;
            }
        })
    }
}
