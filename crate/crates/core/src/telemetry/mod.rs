//! Per-stage observability: counters, task-duration histograms, queue occupancy.
//!
//! Counters are plain atomics updated by the control thread and by workers.
//! [`PipelineCounters::snapshot`] never takes a lock that a worker could hold, so
//! taking snapshots does not slow task execution down. Cross-counter exactness is
//! only guaranteed once the pipeline is quiescent, with one exception: the
//! `in_flight` gauge of a snapshot is derived so that
//! `dequeued == succeeded + failed + in_flight` holds on every snapshot.
//!
//! The serialized [`PipelineStats`] shape is stable; bench reports embed it.

mod histogram;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use histogram::{bucket_upper_us, DurationHistogram, DurationSummary, BUCKETS};

/// Minimum number of sink items before [`bottleneck_hint`] will name a stage.
pub const MIN_HINT_SAMPLES: u64 = 100;

const NONE: u64 = u64::MAX;

#[derive(Debug, Default)]
pub(crate) struct Occupancy {
    capacity: u64,
    samples: AtomicU64,
    sum: AtomicU64,
    max: AtomicU64,
}

impl Occupancy {
    fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity as u64,
            ..Default::default()
        }
    }

    /// Called on every put and get with the length after the operation.
    pub(crate) fn sample(&self, len: usize) {
        let len = len as u64;
        self.sum.fetch_add(len, Ordering::Relaxed);
        self.max.fetch_max(len, Ordering::Relaxed);
        self.samples.fetch_add(1, Ordering::Relaxed);
    }

    fn snapshot(&self) -> OccupancyStats {
        OccupancyStats {
            capacity: self.capacity,
            samples: self.samples.load(Ordering::Relaxed),
            sum: self.sum.load(Ordering::Relaxed),
            max: self.max.load(Ordering::Relaxed),
        }
    }
}

/// Live counters of one stage.
#[derive(Debug)]
pub(crate) struct StageCounters {
    pub(crate) name: String,
    kind: &'static str,
    executor: String,
    concurrency: u64,
    pub(crate) dequeued: AtomicU64,
    pub(crate) succeeded: AtomicU64,
    pub(crate) failed: AtomicU64,
    pub(crate) durations: DurationHistogram,
    pub(crate) occupancy: Occupancy,
    pub(crate) blocked_on_put_us: AtomicU64,
}

impl StageCounters {
    pub(crate) fn new(
        name: String,
        kind: &'static str,
        executor: String,
        concurrency: usize,
        queue_capacity: usize,
    ) -> Self {
        Self {
            name,
            kind,
            executor,
            concurrency: concurrency as u64,
            dequeued: AtomicU64::new(0),
            succeeded: AtomicU64::new(0),
            failed: AtomicU64::new(0),
            durations: DurationHistogram::default(),
            occupancy: Occupancy::new(queue_capacity),
            blocked_on_put_us: AtomicU64::new(0),
        }
    }

    fn snapshot(&self) -> StageStats {
        let succeeded = self.succeeded.load(Ordering::Acquire);
        let failed = self.failed.load(Ordering::Acquire);
        let dequeued = self.dequeued.load(Ordering::Acquire);
        StageStats {
            name: self.name.clone(),
            kind: self.kind.to_string(),
            executor: self.executor.clone(),
            concurrency: self.concurrency,
            dequeued,
            succeeded,
            failed,
            in_flight: dequeued - succeeded - failed,
            task_duration: self.durations.summary(),
            output_queue_occupancy: self.occupancy.snapshot(),
            blocked_on_put_us: self.blocked_on_put_us.load(Ordering::Relaxed),
        }
    }
}

/// Shared counters of a whole pipeline. Readable from any thread.
#[derive(Debug)]
pub(crate) struct PipelineCounters {
    pub(crate) stages: Vec<StageCounters>,
    built_at: Instant,
    started_at: Mutex<Option<Instant>>,
    finished_us: AtomicU64,
    first_item_us: AtomicU64,
    pub(crate) source_pulled: AtomicU64,
    pub(crate) source_pull_us: AtomicU64,
    pub(crate) sink_emitted: AtomicU64,
    pub(crate) sink_occupancy: Occupancy,
    pub(crate) emitted_items: AtomicU64,
    pub(crate) failed_items: AtomicU64,
    pub(crate) abandoned_items: AtomicU64,
    pub(crate) dropped_remainder: AtomicU64,
}

impl PipelineCounters {
    pub(crate) fn new(stages: Vec<StageCounters>, sink_capacity: usize) -> Self {
        Self {
            stages,
            built_at: Instant::now(),
            started_at: Mutex::new(None),
            finished_us: AtomicU64::new(NONE),
            first_item_us: AtomicU64::new(NONE),
            source_pulled: AtomicU64::new(0),
            source_pull_us: AtomicU64::new(0),
            sink_emitted: AtomicU64::new(0),
            sink_occupancy: Occupancy::new(sink_capacity),
            emitted_items: AtomicU64::new(0),
            failed_items: AtomicU64::new(0),
            abandoned_items: AtomicU64::new(0),
            dropped_remainder: AtomicU64::new(0),
        }
    }

    pub(crate) fn mark_started(&self) {
        let mut started = self.started_at.lock();
        if started.is_none() {
            *started = Some(Instant::now());
        }
    }

    fn since_start_us(&self) -> Option<u64> {
        self.started_at
            .lock()
            .map(|t| t.elapsed().as_micros() as u64)
    }

    pub(crate) fn mark_finished(&self) {
        if let Some(us) = self.since_start_us() {
            let _ =
                self.finished_us
                    .compare_exchange(NONE, us, Ordering::AcqRel, Ordering::Acquire);
        }
    }

    /// Records the first item reaching the sink; measured from construction.
    pub(crate) fn mark_first_item(&self) {
        let us = self.built_at.elapsed().as_micros() as u64;
        let _ = self
            .first_item_us
            .compare_exchange(NONE, us, Ordering::AcqRel, Ordering::Acquire);
    }

    pub(crate) fn snapshot(&self) -> PipelineStats {
        let finished = self.finished_us.load(Ordering::Acquire);
        let wall_time_us = if finished != NONE {
            finished
        } else {
            self.since_start_us().unwrap_or(0)
        };
        let ttfb = self.first_item_us.load(Ordering::Acquire);
        PipelineStats {
            stages: self.stages.iter().map(StageCounters::snapshot).collect(),
            source_pulled: self.source_pulled.load(Ordering::Acquire),
            source_pull_us: self.source_pull_us.load(Ordering::Relaxed),
            sink_emitted: self.sink_emitted.load(Ordering::Acquire),
            sink_occupancy: self.sink_occupancy.snapshot(),
            wall_time_us,
            ttfb_us: (ttfb != NONE).then_some(ttfb),
            items: ItemAccounting {
                emitted: self.emitted_items.load(Ordering::Acquire),
                failed: self.failed_items.load(Ordering::Acquire),
                abandoned: self.abandoned_items.load(Ordering::Acquire),
                dropped_remainder: self.dropped_remainder.load(Ordering::Acquire),
            },
        }
    }
}

/// Cloneable, thread-safe view of a pipeline's counters.
#[derive(Clone)]
pub struct StatsHandle(pub(crate) std::sync::Arc<PipelineCounters>);

impl StatsHandle {
    pub fn snapshot(&self) -> PipelineStats {
        self.0.snapshot()
    }
}

impl std::fmt::Debug for StatsHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("StatsHandle").finish()
    }
}

/// Queue occupancy sampled on every put and get.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyStats {
    pub capacity: u64,
    pub samples: u64,
    pub sum: u64,
    pub max: u64,
}

impl OccupancyStats {
    pub fn mean(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.sum as f64 / self.samples as f64
        }
    }
}

/// Snapshot of one stage. Counts are in tasks (an aggregate stage counts its inputs).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub name: String,
    pub kind: String,
    pub executor: String,
    pub concurrency: u64,
    pub dequeued: u64,
    pub succeeded: u64,
    pub failed: u64,
    pub in_flight: u64,
    pub task_duration: DurationSummary,
    pub output_queue_occupancy: OccupancyStats,
    pub blocked_on_put_us: u64,
}

/// End-to-end accounting in source items. A batch counts as the number of
/// source items it contains.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemAccounting {
    pub emitted: u64,
    pub failed: u64,
    pub abandoned: u64,
    pub dropped_remainder: u64,
}

impl ItemAccounting {
    pub fn total(&self) -> u64 {
        self.emitted + self.failed + self.abandoned + self.dropped_remainder
    }
}

/// Snapshot of a whole pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub stages: Vec<StageStats>,
    pub source_pulled: u64,
    pub source_pull_us: u64,
    /// Sink items handed to the consumer.
    pub sink_emitted: u64,
    pub sink_occupancy: OccupancyStats,
    pub wall_time_us: u64,
    /// Construction to first item placed in the sink.
    pub ttfb_us: Option<u64>,
    pub items: ItemAccounting,
}

impl PipelineStats {
    pub fn stage(&self, name: &str) -> Option<&StageStats> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn wall_time(&self) -> Duration {
        Duration::from_micros(self.wall_time_us)
    }

    /// `pulled == emitted + failed + abandoned + dropped_remainder`. Meaningful once stopped.
    pub fn is_conserved(&self) -> bool {
        self.source_pulled == self.items.total()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

/// Outcome of [`bottleneck_hint`].
#[derive(Debug, Clone, PartialEq)]
pub enum BottleneckHint {
    Stage { name: String, reason: String },
    Inconclusive(String),
}

impl BottleneckHint {
    pub fn stage_name(&self) -> Option<&str> {
        match self {
            BottleneckHint::Stage { name, .. } => Some(name),
            BottleneckHint::Inconclusive(_) => None,
        }
    }
}

/// Name used for the source in hints.
pub const SOURCE_NAME: &str = "source";
/// Name used for the consumer side of the sink in hints.
pub const SINK_NAME: &str = "sink";

const SATURATION_THRESHOLD: f64 = 0.5;

/// Guesses which stage limits throughput.
///
/// Rule 1: the stage (or the source) with the highest busy saturation, i.e.
/// task time divided by `wall × concurrency`, if it is at least 50%.
/// Rule 2: otherwise the consumer of the stage that spent the largest share
/// of its slot time blocked on a full output queue.
pub fn bottleneck_hint(stats: &PipelineStats) -> BottleneckHint {
    if stats.sink_emitted < MIN_HINT_SAMPLES {
        return BottleneckHint::Inconclusive(format!(
            "inconclusive: {} sink items, need at least {MIN_HINT_SAMPLES}",
            stats.sink_emitted
        ));
    }
    let wall = stats.wall_time_us.max(1) as f64;

    let mut best: Option<(&str, f64)> = Some((SOURCE_NAME, stats.source_pull_us as f64 / wall));
    for s in stats.stages.iter().filter(|s| s.kind == "map") {
        let sat = s.task_duration.sum_us as f64 / (wall * s.concurrency.max(1) as f64);
        if best.is_none_or(|(_, b)| sat > b) {
            best = Some((&s.name, sat));
        }
    }
    if let Some((name, sat)) = best {
        if sat >= SATURATION_THRESHOLD {
            return BottleneckHint::Stage {
                name: name.to_string(),
                reason: format!(
                    "saturation: busy {:.0}% of wall time x concurrency",
                    sat * 100.0
                ),
            };
        }
    }

    let mut blocked: Option<(usize, f64)> = None;
    for (i, s) in stats.stages.iter().enumerate() {
        let share = s.blocked_on_put_us as f64 / (wall * s.concurrency.max(1) as f64);
        if share > 0.0 && blocked.is_none_or(|(_, b)| share > b) {
            blocked = Some((i, share));
        }
    }
    match blocked {
        Some((i, share)) if share >= SATURATION_THRESHOLD => {
            let name = stats
                .stages
                .get(i + 1)
                .map_or(SINK_NAME.to_string(), |s| s.name.clone());
            BottleneckHint::Stage {
                name,
                reason: format!(
                    "blocked-on-put: upstream stage '{}' waited {:.0}% of its slot time on a full queue",
                    stats.stages[i].name,
                    share * 100.0
                ),
            }
        }
        _ => BottleneckHint::Inconclusive(
            "inconclusive: no stage saturated and no stage blocked on put".to_string(),
        ),
    }
}
