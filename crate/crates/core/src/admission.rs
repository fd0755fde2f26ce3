//! Admission control decisions.
//!
//! Memory is a hard limit: at or above `mem_critical` new work is refused with
//! 429. CPU and disk are soft: above `busy_threshold` work still runs but each
//! work item sleeps first, longer the further the signal overshoots.

use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PressureSource {
    #[default]
    Measured,
    Injected,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PressureState {
    pub mem_used_fraction: f64,
    pub cpu_busy_fraction: f64,
    pub disk_busy_fraction: f64,
    #[serde(default)]
    pub source: PressureSource,
}

fn clamp01(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

impl PressureState {
    pub fn new(mem: f64, cpu: f64, disk: f64, source: PressureSource) -> Self {
        PressureState {
            mem_used_fraction: clamp01(mem),
            cpu_busy_fraction: clamp01(cpu),
            disk_busy_fraction: clamp01(disk),
            source,
        }
    }

    pub fn injected(mem: f64, cpu: f64, disk: f64) -> Self {
        Self::new(mem, cpu, disk, PressureSource::Injected)
    }

    pub fn idle() -> Self {
        Self::default()
    }

    /// Copy with every fraction forced into `[0, 1]`.
    pub fn clamped(self) -> Self {
        Self::new(
            self.mem_used_fraction,
            self.cpu_busy_fraction,
            self.disk_busy_fraction,
            self.source,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissionConfig {
    pub mem_critical: f64,
    pub busy_threshold: f64,
    pub throttle_step: Duration,
}

impl Default for AdmissionConfig {
    fn default() -> Self {
        AdmissionConfig {
            mem_critical: 0.90,
            busy_threshold: 0.85,
            throttle_step: Duration::from_millis(10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Admit,
    Reject429,
    AdmitWithThrottle(Duration),
}

/// Admission decision for one new request. The size hint is accepted for
/// interface stability; decisions depend only on pressure.
pub fn admit(cfg: &AdmissionConfig, pressure: PressureState, _size_hint: u64) -> Decision {
    let p = pressure.clamped();
    if p.mem_used_fraction >= cfg.mem_critical {
        return Decision::Reject429;
    }
    match throttle_delay(cfg, p) {
        Some(d) => Decision::AdmitWithThrottle(d),
        None => Decision::Admit,
    }
}

/// Sleep to insert before one work item, if CPU or disk is over threshold.
///
/// `throttle_step * (1 + (f - threshold) / (1 - threshold))` with `f` the larger
/// of the CPU and disk fractions, so the delay grows from one to two steps.
pub fn throttle_delay(cfg: &AdmissionConfig, pressure: PressureState) -> Option<Duration> {
    let p = pressure.clamped();
    let f = p.cpu_busy_fraction.max(p.disk_busy_fraction);
    if f < cfg.busy_threshold {
        return None;
    }
    let headroom = (1.0 - cfg.busy_threshold).max(f64::EPSILON);
    let overshoot = 1.0 + ((f - cfg.busy_threshold) / headroom).min(1.0);
    Some(cfg.throttle_step.mul_f64(overshoot))
}
