//! Builder, lifecycle and runtime of a linear staged pipeline.
//!
//! A dedicated control thread owns every queue. It pulls the source, admits
//! stage tasks onto executors and routes their completions downstream. The
//! consumer reads from a bounded sink. A map stage admits a task only while it
//! has a free concurrency slot *and* a free slot in its output queue, so a full
//! sink stops the last stage, whose full input queue stops the stage before it,
//! and so on up to the source.
//!
//! Lifecycle: `built → running → draining → stopped`. The control thread
//! starts on the first [`Pipeline::next_item`] (or an explicit
//! [`Pipeline::start`]); [`Pipeline::stop`] drains in-flight work up to a
//! deadline and joins every background thread it can.

mod builder;
mod config;
mod runtime;

use std::marker::PhantomData;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::thread::{JoinHandle, ThreadId};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Sender};
use serde::{Deserialize, Serialize};

pub use builder::PipelineBuilder;
pub use config::{
    BuildError, ErrorPolicy, OrderMode, StageConfig, DEFAULT_DRAIN_DEADLINE, FAILURE_WINDOW,
};

use crate::executors::{ExecutorKind, SubprocessPool, ThreadPool, WorkerCommand};
use crate::telemetry::{PipelineCounters, PipelineStats, StatsHandle};
use crate::threads::{join_until, ThreadTracker};
use runtime::{Control, ControlExit, Event, Exec, Kind, Sink, Source, StageRuntime, StageSpec};

/// Extra time granted to idle workers to exit after the drain deadline.
const JOIN_GRACE: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("stage '{stage}' failed: {message}")]
    StageFailed { stage: String, message: String },
    /// Failures over the last window of completions exceeded the stage's limit.
    #[error("stage '{stage}' failure ratio {observed} exceeded limit {limit}")]
    FailureRatioExceeded {
        stage: String,
        observed: f64,
        limit: f64,
    },
    #[error("end of stream was already returned")]
    EndOfStreamConsumed,
    #[error("pipeline is stopped")]
    Stopped,
    #[error("executor failed to start: {0}")]
    ExecutorStart(String),
    #[error("pipeline is already being consumed by a scoped run")]
    AlreadyConsuming,
}

/// Result of [`Pipeline::next_item`].
#[derive(Debug, PartialEq)]
pub enum Next<T> {
    Item(T),
    EndOfStream,
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineState {
    Built,
    Running,
    Draining,
    Stopped,
}

/// Accounting returned by [`Pipeline::stop`]; all counts are in source items.
///
/// `items_pulled == items_emitted + items_failed + items_abandoned + items_dropped_remainder`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopReport {
    pub items_pulled: u64,
    pub items_emitted: u64,
    pub items_failed: u64,
    /// Items resident in queues, slots or the sink when the pipeline stopped.
    pub items_abandoned: u64,
    /// Short final batch discarded by an aggregate with `flush_remainder = false`.
    pub items_dropped_remainder: u64,
    pub drain_deadline_hit: bool,
    /// Worker threads still stuck in a stage function after the deadline.
    pub threads_detached: usize,
}

impl StopReport {
    pub fn is_conserved(&self) -> bool {
        self.items_pulled
            == self.items_emitted
                + self.items_failed
                + self.items_abandoned
                + self.items_dropped_remainder
    }
}

struct PendingSubprocess {
    stage: usize,
    size: usize,
    command: WorkerCommand,
    digest: [u8; 32],
}

/// A built pipeline producing items of type `T`.
pub struct Pipeline<T> {
    state: PipelineState,
    control: Option<Control>,
    control_handle: Option<JoinHandle<ControlExit>>,
    control_thread: Option<ThreadId>,
    events: Sender<Event>,
    sink: Arc<Sink>,
    counters: Arc<PipelineCounters>,
    pools: Vec<Arc<ThreadPool>>,
    pending_subprocess: Vec<PendingSubprocess>,
    subprocess_pools: Vec<Arc<SubprocessPool>>,
    tracker: ThreadTracker,
    residency_bound: u64,
    eos_returned: bool,
    in_scope: bool,
    start_error: Option<PipelineError>,
    report: Option<StopReport>,
    _marker: PhantomData<fn() -> T>,
}

impl<T: Send + 'static> Pipeline<T> {
    pub(crate) fn new(
        source: Source,
        specs: Vec<StageSpec>,
        sink_capacity: usize,
        worker_count: usize,
        ordering: OrderMode,
    ) -> Self {
        let tracker = ThreadTracker::default();
        let shared = Arc::new(ThreadPool::with_tracker(
            "spindle-worker",
            worker_count,
            tracker.clone(),
        ));
        let mut pools = vec![shared.clone()];
        let mut pending_subprocess = Vec::new();
        let residency_bound = residency_bound(&specs, sink_capacity);

        let n = specs.len();
        let mut stages = Vec::with_capacity(n);
        let mut stage_counters = Vec::with_capacity(n);
        for (i, spec) in specs.into_iter().enumerate() {
            if let StageSpec::Map {
                config,
                func: runtime::StageFn::Remote { registry, .. },
            } = &spec
            {
                if let ExecutorKind::SubprocessPool { size, command } = &config.executor.kind {
                    pending_subprocess.push(PendingSubprocess {
                        stage: i,
                        size: *size,
                        command: command.clone(),
                        digest: registry.digest(),
                    });
                }
            }
            let mut make_pool = |name: String, size: usize| {
                let p = Arc::new(ThreadPool::with_tracker(name, size, tracker.clone()));
                pools.push(p.clone());
                p
            };
            let (stage, counters) = StageRuntime::new(i, spec, ordering, &shared, &mut make_pool);
            stages.push(stage);
            stage_counters.push(counters);
        }

        let counters = Arc::new(PipelineCounters::new(stage_counters, sink_capacity));
        let sink = Arc::new(Sink::new(sink_capacity));
        let (tx, rx) = unbounded();
        let control = Control::new(
            stages,
            source,
            sink.clone(),
            counters.clone(),
            rx,
            tx.clone(),
        );
        Self {
            state: PipelineState::Built,
            control: Some(control),
            control_handle: None,
            control_thread: None,
            events: tx,
            sink,
            counters,
            pools,
            pending_subprocess,
            subprocess_pools: Vec::new(),
            tracker,
            residency_bound,
            eos_returned: false,
            in_scope: false,
            start_error: None,
            report: None,
            _marker: PhantomData,
        }
    }

    pub fn state(&self) -> PipelineState {
        self.state
    }

    /// Starts the control thread. Called implicitly by the first `next_item`.
    pub fn start(&mut self) -> Result<(), PipelineError> {
        if let Some(e) = &self.start_error {
            return Err(e.clone());
        }
        if self.state != PipelineState::Built {
            return match self.state {
                PipelineState::Running => Ok(()),
                _ => Err(PipelineError::Stopped),
            };
        }
        let mut control = self.control.take().expect("control present before start");
        for p in std::mem::take(&mut self.pending_subprocess) {
            match SubprocessPool::start_tracked(p.size, p.command, p.digest, self.tracker.clone()) {
                Ok(pool) => {
                    let pool = Arc::new(pool);
                    if let Kind::Map(m) = &mut control.stages[p.stage].kind {
                        m.exec = Exec::Subprocess(pool.clone());
                    }
                    self.subprocess_pools.push(pool);
                }
                Err(e) => {
                    let err = PipelineError::ExecutorStart(e.to_string());
                    self.start_error = Some(err.clone());
                    self.control = Some(control);
                    return Err(err);
                }
            }
        }
        let handle = self
            .tracker
            .spawn("spindle-control".to_string(), move || control.run());
        self.control_thread = Some(handle.thread().id());
        self.control_handle = Some(handle);
        self.state = PipelineState::Running;
        Ok(())
    }

    /// Takes one item from the sink, starting the pipeline if needed. With a
    /// timeout, returns [`Next::TimedOut`] when nothing arrives in time.
    pub fn next_item(&mut self, timeout: Option<Duration>) -> Result<Next<T>, PipelineError> {
        match self.state {
            PipelineState::Stopped | PipelineState::Draining => return Err(PipelineError::Stopped),
            PipelineState::Built => self.start()?,
            PipelineState::Running => {}
        }
        if self.eos_returned {
            return Err(PipelineError::EndOfStreamConsumed);
        }
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.sink.state.lock();
        loop {
            if let Some(env) = st.items.pop_front() {
                self.counters.sink_occupancy.sample(st.items.len());
                self.counters.sink_emitted.fetch_add(1, Ordering::AcqRel);
                self.counters
                    .emitted_items
                    .fetch_add(env.weight, Ordering::AcqRel);
                drop(st);
                let _ = self.events.send(Event::SinkTaken);
                let item = env
                    .item
                    .downcast::<T>()
                    .unwrap_or_else(|_| unreachable!("sink item type is fixed by the builder"));
                return Ok(Next::Item(*item));
            }
            if let Some(e) = &st.error {
                return Err(e.clone());
            }
            if st.eos {
                self.eos_returned = true;
                return Ok(Next::EndOfStream);
            }
            match deadline {
                None => self.sink.ready.wait(&mut st),
                Some(d) => {
                    if self.sink.ready.wait_until(&mut st, d).timed_out()
                        && st.items.is_empty()
                        && st.error.is_none()
                        && !st.eos
                    {
                        return Ok(Next::TimedOut);
                    }
                }
            }
        }
    }

    /// Blocking iterator over the remaining items; ends after end of stream or
    /// after yielding an error.
    pub fn iter(&mut self) -> Iter<'_, T> {
        Iter {
            pipeline: self,
            done: false,
        }
    }

    /// Stops source pulling, waits for in-flight tasks up to `drain_deadline`,
    /// counts what is left as abandoned and joins background threads.
    /// Never fails; calling it again returns the same report.
    pub fn stop(&mut self, drain_deadline: Duration) -> StopReport {
        if let Some(r) = self.report {
            return r;
        }
        self.state = PipelineState::Draining;
        let deadline = Instant::now() + drain_deadline;
        let mut deadline_hit = false;
        if let Some(handle) = self.control_handle.take() {
            let _ = self.events.send(Event::Stop(deadline));
            match join_until(handle, deadline + JOIN_GRACE) {
                Some(Ok(exit)) => deadline_hit = exit.deadline_hit,
                // Stuck inside the source iterator, or panicked.
                _ => deadline_hit = true,
            }
        }
        // Never started: dropping the control state drops the source unpulled.
        self.control.take();

        let join_by = deadline.max(Instant::now()) + JOIN_GRACE;
        let mut detached = 0;
        for pool in &self.pools {
            detached += pool.shutdown_until(join_by).detached;
        }
        for pool in &self.subprocess_pools {
            pool.shutdown(join_by.saturating_duration_since(Instant::now()));
        }

        let mut st = self.sink.state.lock();
        let leftover: u64 = st.items.drain(..).map(|e| e.weight).sum();
        drop(st);
        self.counters
            .abandoned_items
            .fetch_add(leftover, Ordering::AcqRel);
        self.counters.mark_finished();

        let stats = self.counters.snapshot();
        let report = StopReport {
            items_pulled: stats.source_pulled,
            items_emitted: stats.items.emitted,
            items_failed: stats.items.failed,
            items_abandoned: stats.items.abandoned,
            items_dropped_remainder: stats.items.dropped_remainder,
            drain_deadline_hit: deadline_hit,
            threads_detached: detached,
        };
        self.report = Some(report);
        self.state = PipelineState::Stopped;
        report
    }

    pub fn stop_report(&self) -> Option<StopReport> {
        self.report
    }

    /// Runs `body` as the single consumer and stops the pipeline on every
    /// exit path, including errors and panics.
    pub fn scoped_run<R, E, F>(&mut self, body: F) -> Result<R, E>
    where
        E: From<PipelineError>,
        F: FnOnce(&mut Self) -> Result<R, E>,
    {
        if self.in_scope {
            return Err(PipelineError::AlreadyConsuming.into());
        }
        struct StopGuard<'a, T: Send + 'static>(&'a mut Pipeline<T>);
        impl<T: Send + 'static> Drop for StopGuard<'_, T> {
            fn drop(&mut self) {
                self.0.in_scope = false;
                self.0.stop(DEFAULT_DRAIN_DEADLINE);
            }
        }
        self.in_scope = true;
        let guard = StopGuard(self);
        body(guard.0)
    }

    pub fn snapshot(&self) -> PipelineStats {
        self.counters.snapshot()
    }

    /// Handle for reading stats from other threads while the pipeline runs.
    pub fn stats_handle(&self) -> StatsHandle {
        StatsHandle(self.counters.clone())
    }

    /// Live background threads (control thread, workers, subprocess drivers).
    pub fn live_threads(&self) -> usize {
        self.tracker.live()
    }

    pub fn control_thread_id(&self) -> Option<ThreadId> {
        self.control_thread
    }

    /// Upper bound on source items resident in the pipeline at any instant:
    /// queue slots, stage slots, aggregate buffers and the sink.
    pub fn residency_bound(&self) -> u64 {
        self.residency_bound
    }

    pub fn sink_capacity(&self) -> usize {
        self.sink.capacity
    }

    /// Subprocess pools started for remote stages.
    pub fn subprocess_pools(&self) -> &[Arc<SubprocessPool>] {
        &self.subprocess_pools
    }
}

fn residency_bound(specs: &[StageSpec], sink_capacity: usize) -> u64 {
    let n = specs.len();
    let mut weight = 1u64;
    let mut total = 0u64;
    for (i, spec) in specs.iter().enumerate() {
        let last = i + 1 == n;
        match spec {
            StageSpec::Map { config, .. } => {
                // Running and finished-but-unplaced tasks share the concurrency
                // slots; the last stage's output queue is the sink.
                total += config.concurrency as u64 * weight;
                if !last {
                    total += config.effective_queue_capacity() as u64 * weight;
                }
            }
            StageSpec::Aggregate { batch_size, .. } => {
                total += *batch_size as u64 * weight;
                weight *= *batch_size as u64;
                if !last {
                    total += weight;
                }
            }
        }
    }
    total + sink_capacity as u64 * weight
}

impl<T> Drop for Pipeline<T> {
    fn drop(&mut self) {
        if self.report.is_some() {
            return;
        }
        if let Some(handle) = self.control_handle.take() {
            let deadline = Instant::now() + DEFAULT_DRAIN_DEADLINE;
            let _ = self.events.send(Event::Stop(deadline));
            join_until(handle, deadline + JOIN_GRACE);
        }
        let join_by = Instant::now() + JOIN_GRACE;
        for pool in &self.pools {
            pool.shutdown_until(join_by);
        }
    }
}

impl<T> std::fmt::Debug for Pipeline<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("state", &self.state)
            .field("sink_capacity", &self.sink.capacity)
            .finish_non_exhaustive()
    }
}

/// Iterator returned by [`Pipeline::iter`].
pub struct Iter<'a, T: Send + 'static> {
    pipeline: &'a mut Pipeline<T>,
    done: bool,
}

impl<T: Send + 'static> Iterator for Iter<'_, T> {
    type Item = Result<T, PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.pipeline.next_item(None) {
            Ok(Next::Item(v)) => Some(Ok(v)),
            Ok(Next::EndOfStream) | Ok(Next::TimedOut) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

impl<'a, T: Send + 'static> IntoIterator for &'a mut Pipeline<T> {
    type Item = Result<T, PipelineError>;
    type IntoIter = Iter<'a, T>;

    fn into_iter(self) -> Self::IntoIter {
        self.iter()
    }
}
