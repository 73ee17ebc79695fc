use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Number of log-scaled buckets spanning 1µs..=100s.
pub const BUCKETS: usize = 64;

const MIN_US: f64 = 1.0;
const MAX_US: f64 = 100_000_000.0;

/// Upper bound (inclusive, µs) of bucket `i`.
pub fn bucket_upper_us(i: usize) -> u64 {
    let exp = (MAX_US / MIN_US).log10() * i as f64 / (BUCKETS - 1) as f64;
    (MIN_US * 10f64.powf(exp)).round() as u64
}

fn bucket_index(us: u64) -> usize {
    if us <= MIN_US as u64 {
        return 0;
    }
    if us as f64 >= MAX_US {
        return BUCKETS - 1;
    }
    let ratio = (us as f64 / MIN_US).log10() / (MAX_US / MIN_US).log10();
    let idx = (ratio * (BUCKETS - 1) as f64).ceil() as usize;
    // Rounding of the bound may leave `us` one bucket too low.
    let mut idx = idx.min(BUCKETS - 1);
    while idx < BUCKETS - 1 && us > bucket_upper_us(idx) {
        idx += 1;
    }
    while idx > 0 && us <= bucket_upper_us(idx - 1) {
        idx -= 1;
    }
    idx
}

/// Lock-free duration histogram with fixed memory. Recording never allocates.
#[derive(Debug)]
pub struct DurationHistogram {
    buckets: [AtomicU64; BUCKETS],
    count: AtomicU64,
    sum_us: AtomicU64,
    min_us: AtomicU64,
    max_us: AtomicU64,
}

impl Default for DurationHistogram {
    fn default() -> Self {
        Self {
            buckets: std::array::from_fn(|_| AtomicU64::new(0)),
            count: AtomicU64::new(0),
            sum_us: AtomicU64::new(0),
            min_us: AtomicU64::new(u64::MAX),
            max_us: AtomicU64::new(0),
        }
    }
}

impl DurationHistogram {
    pub fn record(&self, us: u64) {
        self.buckets[bucket_index(us)].fetch_add(1, Ordering::Relaxed);
        self.sum_us.fetch_add(us, Ordering::Relaxed);
        self.min_us.fetch_min(us, Ordering::Relaxed);
        self.max_us.fetch_max(us, Ordering::Relaxed);
        self.count.fetch_add(1, Ordering::Release);
    }

    pub fn summary(&self) -> DurationSummary {
        let count = self.count.load(Ordering::Acquire);
        let counts: Vec<u64> = self
            .buckets
            .iter()
            .map(|b| b.load(Ordering::Relaxed))
            .collect();
        let min = self.min_us.load(Ordering::Relaxed);
        let max = self.max_us.load(Ordering::Relaxed);
        let (min, max) = if count == 0 { (0, 0) } else { (min, max) };
        DurationSummary {
            count,
            sum_us: self.sum_us.load(Ordering::Relaxed),
            min_us: min,
            max_us: max,
            p50_us: quantile(&counts, 0.50, min, max),
            p99_us: quantile(&counts, 0.99, min, max),
        }
    }
}

fn quantile(counts: &[u64], q: f64, min: u64, max: u64) -> u64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0;
    }
    let rank = ((q * total as f64).ceil() as u64).max(1);
    let mut seen = 0;
    for (i, c) in counts.iter().enumerate() {
        seen += c;
        if seen >= rank {
            return bucket_upper_us(i).clamp(min, max);
        }
    }
    max
}

/// Task-duration statistics; quantiles are bucket upper bounds clamped to the observed range.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationSummary {
    pub count: u64,
    pub sum_us: u64,
    pub min_us: u64,
    pub max_us: u64,
    pub p50_us: u64,
    pub p99_us: u64,
}
