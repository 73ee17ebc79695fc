//! Benchmark rows and their CSV/JSON forms.
//!
//! CSV columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `workload` | image, sleep or fetch_image |
//! | `executor` | shared, dedicated or subprocess |
//! | `ordering` | fifo or completion |
//! | `concurrency` | work-stage concurrency |
//! | `repetition` | 0-based repetition index |
//! | `workers` | shared pool size |
//! | `batch_size` | samples per sink batch |
//! | `items` | samples delivered in complete batches |
//! | `batches` | sink batches consumed |
//! | `failed` | samples dropped by failing stages |
//! | `dropped_remainder` | samples in the discarded short final batch |
//! | `wall_us` | build to last batch |
//! | `ttfb_us` | build to first batch |
//! | `throughput` | `items / wall`, samples per second |
//! | `throughput_adjusted` | same, excluding the first batch and its wait |
//! | `peak_rss_bytes` | highest resident set size sampled |
//! | `cpu_user_us`, `cpu_system_us` | process CPU time during the run |
//!
//! JSON rows carry the same fields plus `stats`, the pipeline snapshot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use spindle::PipelineStats;

pub const CSV_HEADER: &str = "workload,executor,ordering,concurrency,repetition,workers,batch_size,items,batches,failed,dropped_remainder,wall_us,ttfb_us,throughput,throughput_adjusted,peak_rss_bytes,cpu_user_us,cpu_system_us";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub workload: String,
    pub executor: String,
    pub ordering: String,
    pub concurrency: usize,
    pub repetition: usize,
    pub workers: usize,
    pub batch_size: usize,
    pub items: u64,
    pub batches: u64,
    pub failed: u64,
    pub dropped_remainder: u64,
    pub wall_us: u64,
    pub ttfb_us: Option<u64>,
    pub throughput: f64,
    pub throughput_adjusted: Option<f64>,
    pub peak_rss_bytes: u64,
    pub cpu_user_us: u64,
    pub cpu_system_us: u64,
    pub stats: PipelineStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format '{s}' (csv, json)")),
        }
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl BenchReport {
    /// Orders rows by (workload, concurrency, repetition), then executor.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.workload, a.concurrency, a.repetition, &a.executor).cmp(&(
                &b.workload,
                b.concurrency,
                b.repetition,
                &b.executor,
            ))
        });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3},{},{},{},{}",
                r.workload,
                r.executor,
                r.ordering,
                r.concurrency,
                r.repetition,
                r.workers,
                r.batch_size,
                r.items,
                r.batches,
                r.failed,
                r.dropped_remainder,
                r.wall_us,
                opt(r.ttfb_us),
                r.throughput,
                opt(r.throughput_adjusted.map(|t| format!("{t:.3}"))),
                r.peak_rss_bytes,
                r.cpu_user_us,
                r.cpu_system_us
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rows serialize")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    /// Min/median/max over repetitions per (workload, executor, concurrency).
    pub fn summarize(&self) -> Vec<Summary> {
        let mut groups: BTreeMap<(String, String, usize), Vec<&BenchRow>> = BTreeMap::new();
        for r in &self.rows {
            groups
                .entry((r.workload.clone(), r.executor.clone(), r.concurrency))
                .or_default()
                .push(r);
        }
        groups
            .into_iter()
            .map(|((workload, executor, concurrency), rows)| Summary {
                throughput: Spread::of(rows.iter().map(|r| r.throughput).collect()),
                ttfb_us: Spread::of(
                    rows.iter()
                        .filter_map(|r| r.ttfb_us)
                        .map(|t| t as f64)
                        .collect(),
                ),
                workload,
                executor,
                concurrency,
            })
            .collect()
    }

    /// Median subprocess TTFB minus median shared-pool TTFB, per
    /// (workload, concurrency) where both were measured.
    pub fn ttfb_deltas(&self) -> Vec<TtfbDelta> {
        let s = self.summarize();
        let find = |w: &str, e: &str, c: usize| {
            s.iter()
                .find(|x| x.workload == w && x.executor == e && x.concurrency == c)
                .and_then(|x| x.ttfb_us)
        };
        s.iter()
            .filter(|x| x.executor == "subprocess")
            .filter_map(|x| {
                let sub = x.ttfb_us?.median;
                let shared = find(&x.workload, "shared", x.concurrency)?.median;
                Some(TtfbDelta {
                    workload: x.workload.clone(),
                    concurrency: x.concurrency,
                    subprocess_us: sub,
                    shared_us: shared,
                })
            })
            .collect()
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }
}

pub fn emit_report(report: &BenchReport, format: Format, path: &Path) -> std::io::Result<()> {
    let mut sorted = report.clone();
    sorted.sort();
    std::fs::write(path, sorted.render(format))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Spread {
    fn of(mut v: Vec<f64>) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let median = if v.len() % 2 == 1 {
            v[v.len() / 2]
        } else {
            (v[v.len() / 2 - 1] + v[v.len() / 2]) / 2.0
        };
        Some(Self {
            min: v[0],
            median,
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub workload: String,
    pub executor: String,
    pub concurrency: usize,
    pub throughput: Option<Spread>,
    pub ttfb_us: Option<Spread>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TtfbDelta {
    pub workload: String,
    pub concurrency: usize,
    pub subprocess_us: f64,
    pub shared_us: f64,
}

impl TtfbDelta {
    pub fn delta_us(&self) -> f64 {
        self.subprocess_us - self.shared_us
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub workload: String,
    pub sequential_items: u64,
    pub sequential_wall_us: u64,
    pub sequential_throughput: f64,
    pub passthrough_items: u64,
    pub passthrough_wall_us: u64,
    pub passthrough_throughput: f64,
    /// Wall time per item of a no-op single-stage pipeline.
    pub passthrough_overhead_us: f64,
}
