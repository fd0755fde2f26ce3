//! Per-node counters with Prometheus text exposition.
//!
//! ```prometheus
//! # TYPE work_items_total counter
//! work_items_total 4
//! ```
//!
//! Time counters are kept internally in nanoseconds and rendered in seconds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    /// Entries accepted for execution at a DT.
    WorkItems(u64),
    DeliveredObject { bytes: u64 },
    DeliveredShardMember { bytes: u64 },
    RxWait(Duration),
    Throttle(Duration),
    HardError,
    AdmissionReject,
    SoftError,
    RecoveryAttempt,
    RecoveryFailure,
    DuplicateDelivery,
    DroppedFrame,
}

macro_rules! counters {
    ($($field:ident => $name:literal, $help:literal;)*) => {
        /// Monotonic counters. All updates are relaxed atomic increments.
        #[derive(Debug, Default)]
        pub struct MetricsRegistry {
            $($field: AtomicU64,)*
        }

        /// Point-in-time copy of every counter, raw units (bytes, counts, nanoseconds).
        #[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
        pub struct MetricsSnapshot {
            $(pub $field: u64,)*
        }

        impl MetricsRegistry {
            pub fn snapshot(&self) -> MetricsSnapshot {
                MetricsSnapshot {
                    $($field: self.$field.load(Ordering::Relaxed),)*
                }
            }
        }

        impl MetricsSnapshot {
            fn render(&self) -> String {
                let mut out = String::new();
                $(
                    let _ = writeln!(out, "# HELP {} {}", $name, $help);
                    let _ = writeln!(out, "# TYPE {} counter", $name);
                    let _ = writeln!(out, "{} {}", $name, render_value($name, self.$field));
                )*
                out
            }
        }

        /// Every exposed metric name, in exposition order.
        pub const METRIC_NAMES: &[&str] = &[$($name,)*];
    };
}

counters! {
    work_items_total => "work_items_total", "Batch entries executed by this node as DT.";
    delivered_objects_count => "delivered_objects_count", "Whole objects delivered to clients.";
    delivered_objects_bytes => "delivered_objects_bytes", "Bytes of whole objects delivered to clients.";
    delivered_shard_members_count => "delivered_shard_members_count", "Shard members delivered to clients.";
    delivered_shard_members_bytes => "delivered_shard_members_bytes", "Bytes of shard members delivered to clients.";
    rxwait_nanos => "rxwait_seconds_total", "Time the DT spent waiting for peer senders.";
    throttle_nanos => "throttle_seconds_total", "Time slept under local resource pressure.";
    hard_errors_total => "hard_errors_total", "Requests aborted by hard errors.";
    admission_rejects_total => "admission_rejects_total", "Requests rejected with HTTP 429.";
    soft_errors_total => "soft_errors_total", "Soft errors tolerated as placeholders.";
    recovery_attempts_total => "recovery_attempts_total", "Get-from-neighbor recovery rounds started.";
    recovery_failures_total => "recovery_failures_total", "Entries whose recovery failed.";
    duplicate_deliveries_total => "duplicate_deliveries_total", "Deliveries ignored because the slot was already filled.";
    dropped_frames_total => "dropped_frames_total", "Frames for unknown executions.";
}

fn render_value(name: &str, raw: u64) -> String {
    if name.ends_with("_seconds_total") {
        format!("{}", raw as f64 / 1e9)
    } else {
        raw.to_string()
    }
}

fn nanos(d: Duration) -> u64 {
    u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)
}

impl MetricsRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, event: Event) {
        let add = |c: &AtomicU64, v: u64| {
            c.fetch_add(v, Ordering::Relaxed);
        };
        match event {
            Event::WorkItems(n) => add(&self.work_items_total, n),
            Event::DeliveredObject { bytes } => {
                add(&self.delivered_objects_count, 1);
                add(&self.delivered_objects_bytes, bytes);
            }
            Event::DeliveredShardMember { bytes } => {
                add(&self.delivered_shard_members_count, 1);
                add(&self.delivered_shard_members_bytes, bytes);
            }
            Event::RxWait(d) => add(&self.rxwait_nanos, nanos(d)),
            Event::Throttle(d) => add(&self.throttle_nanos, nanos(d)),
            Event::HardError => add(&self.hard_errors_total, 1),
            Event::AdmissionReject => add(&self.admission_rejects_total, 1),
            Event::SoftError => add(&self.soft_errors_total, 1),
            Event::RecoveryAttempt => add(&self.recovery_attempts_total, 1),
            Event::RecoveryFailure => add(&self.recovery_failures_total, 1),
            Event::DuplicateDelivery => add(&self.duplicate_deliveries_total, 1),
            Event::DroppedFrame => add(&self.dropped_frames_total, 1),
        }
    }

    /// Text exposition of a consistent snapshot.
    pub fn expose(&self) -> String {
        self.snapshot().render()
    }
}

impl MetricsSnapshot {
    pub fn rxwait(&self) -> Duration {
        Duration::from_nanos(self.rxwait_nanos)
    }

    pub fn throttle(&self) -> Duration {
        Duration::from_nanos(self.throttle_nanos)
    }
}

/// Parses `<name> <value>` sample lines of a text exposition, skipping comments.
pub fn parse_exposition(text: &str) -> BTreeMap<String, f64> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            let name = it.next()?;
            let value = it.next()?.parse().ok()?;
            Some((name.to_string(), value))
        })
        .collect()
}
