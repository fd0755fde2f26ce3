//! Latency percentiles and benchmark reports.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("percentile of an empty sample set")]
    Empty,
    #[error("quantile {0} outside [0, 1]")]
    Quantile(String),
}

/// 1-based nearest rank `ceil(q * n)`, clamped to `[1, n]`.
///
/// `q * n` is nudged down by a relative epsilon first so products that are
/// integral in exact arithmetic (0.95 * 10000) do not round up a rank.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    let exact = q * n as f64;
    let rank = (exact - exact.abs() * 1e-12).ceil() as usize;
    rank.clamp(1, n)
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile<T: Copy + Ord>(samples: &[T], q: f64) -> Result<T, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::Empty);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(StatsError::Quantile(q.to_string()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}

/// Percentile over samples that are already sorted ascending.
pub fn percentile_sorted<T: Copy>(sorted: &[T], q: f64) -> Result<T, StatsError> {
    if sorted.is_empty() {
        return Err(StatsError::Empty);
    }
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// P50/P95/P99/avg block of a report, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencySummary {
    pub count: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub avg_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: &[Duration]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let p = |q| ms(percentile_sorted(&s, q).expect("non-empty"));
        let total: Duration = s.iter().sum();
        Some(LatencySummary {
            count: s.len(),
            p50_ms: p(0.50),
            p95_ms: p(0.95),
            p99_ms: p(0.99),
            avg_ms: ms(total) / s.len() as f64,
            min_ms: ms(s[0]),
            max_ms: ms(s[s.len() - 1]),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Get,
    Getbatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub object_size_bytes: u64,
    pub batch_size: usize,
    pub workers: usize,
    pub duration_s: f64,
    pub request_count: u64,
    pub error_count: u64,
    pub objects_fetched: u64,
    /// Payload bytes only.
    pub total_bytes: u64,
    /// TAR headers, padding and terminators, reported separately from goodput.
    pub framing_bytes: u64,
    pub throughput_gib_s: f64,
    pub batch_latency: LatencySummary,
    pub per_object_latency: LatencySummary,
}

impl BenchReport {
    pub fn error_rate(&self) -> f64 {
        let total = self.request_count + self.error_count;
        if total == 0 {
            0.0
        } else {
            self.error_count as f64 / total as f64
        }
    }

    pub fn render_table(&self) -> String {
        let row = |label: &str, l: &LatencySummary| {
            format!(
                "{label:<18} {:>10.2} {:>10.2} {:>10.2} {:>10.2}\n",
                l.p50_ms, l.p95_ms, l.p99_ms, l.avg_ms
            )
        };
        let mode = match self.mode {
            BenchMode::Get => "GET".to_string(),
            BenchMode::Getbatch => format!("GetBatch (batch {})", self.batch_size),
        };
        let mut out = String::new();
        out.push_str(&format!(
            "mode: {mode}  object size: {} B  workers: {}  duration: {:.1} s\n",
            self.object_size_bytes, self.workers, self.duration_s
        ));
        out.push_str(&format!(
            "requests: {}  errors: {}  objects: {}  payload: {} B  framing: {} B\n",
            self.request_count,
            self.error_count,
            self.objects_fetched,
            self.total_bytes,
            self.framing_bytes
        ));
        out.push_str(&format!("throughput: {:.4} GiB/s\n", self.throughput_gib_s));
        out.push_str(&format!(
            "{:<18} {:>10} {:>10} {:>10} {:>10}\n",
            "latency (ms)", "P50", "P95", "P99", "Avg"
        ));
        out.push_str(&row("batch", &self.batch_latency));
        out.push_str(&row("per-object", &self.per_object_latency));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(ms: u64) -> Duration {
        Duration::from_millis(ms)
    }

    #[test]
    fn odd_median_and_singleton() {
        let s: Vec<_> = [1, 2, 3, 4, 5].into_iter().map(d).collect();
        assert_eq!(percentile(&s, 0.5).unwrap(), d(3));
        for q in [0.0, 0.01, 0.5, 0.95, 0.99, 1.0] {
            assert_eq!(percentile(&[d(7)], q).unwrap(), d(7));
        }
    }

    #[test]
    fn empty_and_bad_quantile() {
        assert_eq!(percentile::<Duration>(&[], 0.5), Err(StatsError::Empty));
        assert!(matches!(percentile(&[1u32], 1.5), Err(StatsError::Quantile(_))));
    }

    #[test]
    fn integral_products_do_not_round_up() {
        assert_eq!(nearest_rank(0.95, 10_000), 9_500);
        assert_eq!(nearest_rank(0.99, 10_000), 9_900);
        assert_eq!(nearest_rank(0.5, 10_000), 5_000);
        assert_eq!(nearest_rank(0.95, 100), 95);
        assert_eq!(nearest_rank(0.29, 100), 29);
        assert_eq!(nearest_rank(0.5, 5), 3);
        assert_eq!(nearest_rank(0.0, 5), 1);
    }

    #[test]
    fn summary_ordering() {
        let s: Vec<_> = (1..=100).map(d).collect();
        let l = LatencySummary::from_samples(&s).unwrap();
        assert_eq!(l.p50_ms, 50.0);
        assert_eq!(l.p95_ms, 95.0);
        assert_eq!(l.p99_ms, 99.0);
        assert_eq!(l.avg_ms, 50.5);
        assert!(l.min_ms <= l.avg_ms && l.avg_ms <= l.max_ms);
        assert!(LatencySummary::from_samples(&[]).is_none());
    }
}
