//! The control thread: owns every queue and all scheduling state, dispatches
//! stage tasks to executors and reacts to their completions.

use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Instant;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use parking_lot::{Condvar, Mutex};

use super::config::{ErrorPolicy, OrderMode, StageConfig, FAILURE_WINDOW};
use super::PipelineError;
use crate::deferred::Deferred;
use crate::executors::{RemoteFunctionRegistry, SubprocessPool, ThreadPool};
use crate::telemetry::{PipelineCounters, StageCounters};

pub(crate) type Item = Box<dyn Any + Send>;
pub(crate) type Source = Box<dyn Iterator<Item = Item> + Send>;
pub(crate) type SyncFn = Arc<dyn Fn(Item) -> Result<Item, String> + Send + Sync>;
pub(crate) type DeferredFn = Arc<dyn Fn(Item) -> Deferred<Result<Item, String>> + Send + Sync>;
pub(crate) type CollectFn = Arc<dyn Fn(Vec<Item>) -> Item + Send + Sync>;

pub(crate) enum StageFn {
    Sync(SyncFn),
    Deferred(DeferredFn),
    Remote {
        registry: Arc<RemoteFunctionRegistry>,
        name: String,
    },
}

pub(crate) enum StageSpec {
    Map {
        config: StageConfig,
        func: StageFn,
    },
    Aggregate {
        batch_size: usize,
        flush_remainder: bool,
        collect: CollectFn,
    },
}

/// An item plus the number of source items it stands for.
pub(crate) struct Envelope {
    pub(crate) item: Item,
    pub(crate) weight: u64,
}

pub(crate) enum Event {
    Completed {
        stage: usize,
        seq: u64,
        outcome: Result<Item, String>,
        dur_us: u64,
    },
    SinkTaken,
    Stop(Instant),
}

#[derive(Default)]
pub(crate) struct SinkState {
    pub(crate) items: VecDeque<Envelope>,
    pub(crate) eos: bool,
    pub(crate) error: Option<PipelineError>,
}

/// Bounded buffer between the control thread and the consumer.
pub(crate) struct Sink {
    pub(crate) state: Mutex<SinkState>,
    pub(crate) ready: Condvar,
    pub(crate) capacity: usize,
}

impl Sink {
    pub(crate) fn new(capacity: usize) -> Self {
        Self {
            state: Mutex::new(SinkState::default()),
            ready: Condvar::new(),
            capacity,
        }
    }
}

pub(crate) enum Exec {
    Pool(Arc<ThreadPool>),
    Subprocess(Arc<SubprocessPool>),
    /// Subprocess pool not started yet; replaced at pipeline start.
    Pending,
}

enum Slot {
    Running {
        weight: u64,
    },
    /// Finished; `None` for a failed task (kept as a gap marker in FIFO mode).
    Done(Option<Envelope>),
}

pub(crate) struct MapStage {
    func: StageFn,
    pub(crate) exec: Exec,
    concurrency: usize,
    policy: ErrorPolicy,
    abort_ratio: Option<f64>,
    mode: OrderMode,
    window: VecDeque<bool>,
    window_failures: usize,
    next_seq: u64,
    /// Running and finished-but-unplaced tasks; bounded by `concurrency`.
    slots: BTreeMap<u64, Slot>,
    /// Completion order of finished results awaiting an output slot.
    parked: VecDeque<u64>,
    reserve_output: bool,
}

pub(crate) struct AggStage {
    batch_size: usize,
    flush_remainder: bool,
    collect: CollectFn,
    buf: Vec<Envelope>,
}

pub(crate) enum Kind {
    Map(MapStage),
    Aggregate(AggStage),
}

pub(crate) struct StageRuntime {
    pub(crate) kind: Kind,
    /// Output queue; unused for the last stage, which writes to the sink.
    out: VecDeque<Envelope>,
    out_capacity: usize,
    finished: bool,
    /// Producers currently waiting on a full output queue, since when.
    blocked: usize,
    blocked_since: Instant,
}

impl StageRuntime {
    pub(crate) fn new(
        index: usize,
        spec: StageSpec,
        default_order: OrderMode,
        shared: &Arc<ThreadPool>,
        make_pool: &mut dyn FnMut(String, usize) -> Arc<ThreadPool>,
    ) -> (Self, StageCounters) {
        match spec {
            StageSpec::Map { config, func } => {
                let name = config
                    .name
                    .clone()
                    .unwrap_or_else(|| format!("stage{index}"));
                let exec = match (&config.executor.kind, &func) {
                    (crate::executors::ExecutorKind::SubprocessPool { .. }, _) => Exec::Pending,
                    (crate::executors::ExecutorKind::DedicatedPool { size }, _) => {
                        Exec::Pool(make_pool(format!("spindle-{name}"), *size))
                    }
                    (crate::executors::ExecutorKind::SharedPool, _) => Exec::Pool(shared.clone()),
                };
                let counters = StageCounters::new(
                    name,
                    "map",
                    config.executor.label(),
                    config.concurrency,
                    config.effective_queue_capacity(),
                );
                let stage = StageRuntime {
                    kind: Kind::Map(MapStage {
                        func,
                        exec,
                        concurrency: config.concurrency,
                        policy: config.error_policy,
                        abort_ratio: config.failure_abort_ratio,
                        mode: config.ordering.unwrap_or(default_order),
                        window: VecDeque::with_capacity(FAILURE_WINDOW),
                        window_failures: 0,
                        next_seq: 0,
                        slots: BTreeMap::new(),
                        parked: VecDeque::new(),
                        reserve_output: config.reserve_output_slot,
                    }),
                    out: VecDeque::new(),
                    out_capacity: config.effective_queue_capacity(),
                    finished: false,
                    blocked: 0,
                    blocked_since: Instant::now(),
                };
                (stage, counters)
            }
            StageSpec::Aggregate {
                batch_size,
                flush_remainder,
                collect,
            } => {
                let counters = StageCounters::new(
                    format!("aggregate{index}"),
                    "aggregate",
                    "control".to_string(),
                    1,
                    1,
                );
                let stage = StageRuntime {
                    kind: Kind::Aggregate(AggStage {
                        batch_size,
                        flush_remainder,
                        collect,
                        buf: Vec::with_capacity(batch_size),
                    }),
                    out: VecDeque::new(),
                    out_capacity: 1,
                    finished: false,
                    blocked: 0,
                    blocked_since: Instant::now(),
                };
                (stage, counters)
            }
        }
    }
}

/// How the control thread ended.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ControlExit {
    pub(crate) deadline_hit: bool,
}

pub(crate) struct Control {
    pub(crate) stages: Vec<StageRuntime>,
    source: Option<Source>,
    source_done: bool,
    sink: Arc<Sink>,
    counters: Arc<PipelineCounters>,
    events: Receiver<Event>,
    events_tx: Sender<Event>,
    /// Set once stopping or failing; no new work is admitted after that.
    drain_deadline: Option<Instant>,
    running: usize,
    trace: bool,
}

impl Control {
    pub(crate) fn new(
        stages: Vec<StageRuntime>,
        source: Source,
        sink: Arc<Sink>,
        counters: Arc<PipelineCounters>,
        events: Receiver<Event>,
        events_tx: Sender<Event>,
    ) -> Self {
        Self {
            stages,
            source: Some(source),
            source_done: false,
            sink,
            counters,
            events,
            events_tx,
            drain_deadline: None,
            running: 0,
            trace: std::env::var("SPINDLE_TRACE").is_ok_and(|v| v == "1"),
        }
    }

    pub(crate) fn run(mut self) -> ControlExit {
        self.counters.mark_started();
        loop {
            self.pump();
            if self.is_complete() {
                self.finish_stalls();
                self.counters.mark_finished();
                return ControlExit::default();
            }
            if self.drain_deadline.is_some() && self.running == 0 {
                return self.shut_down(false);
            }
            let event = match self.drain_deadline {
                None => match self.events.recv() {
                    Ok(e) => e,
                    Err(_) => return self.shut_down(false),
                },
                Some(deadline) => match self.events.recv_deadline(deadline) {
                    Ok(e) => e,
                    Err(RecvTimeoutError::Timeout) => {
                        let hit = self.running > 0;
                        return self.shut_down(hit);
                    }
                    Err(RecvTimeoutError::Disconnected) => return self.shut_down(false),
                },
            };
            self.handle(event);
            // Coalesce whatever else is already queued before pumping again.
            while let Ok(e) = self.events.try_recv() {
                self.handle(e);
            }
        }
    }

    fn is_complete(&self) -> bool {
        self.sink.state.lock().eos
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Completed {
                stage,
                seq,
                outcome,
                dur_us,
            } => self.complete(stage, seq, outcome, dur_us),
            Event::SinkTaken => {}
            Event::Stop(deadline) => {
                self.drain_deadline =
                    Some(self.drain_deadline.map_or(deadline, |d| d.min(deadline)));
            }
        }
    }

    fn trace(&self, stage: usize, event: &str, seq: u64, dur_us: u64) {
        if self.trace {
            eprintln!(
                "stage={} event={event} item_seq={seq} dur_us={dur_us}",
                self.counters.stages[stage].name
            );
        }
    }

    // -- queue plumbing ---------------------------------------------------

    fn is_last(&self, i: usize) -> bool {
        i + 1 == self.stages.len()
    }

    fn out_len(&self, i: usize) -> usize {
        if self.is_last(i) {
            self.sink.state.lock().items.len()
        } else {
            self.stages[i].out.len()
        }
    }

    fn out_capacity(&self, i: usize) -> usize {
        if self.is_last(i) {
            self.sink.capacity
        } else {
            self.stages[i].out_capacity
        }
    }

    fn push_out(&mut self, i: usize, env: Envelope) {
        if self.is_last(i) {
            self.push_sink(env);
        } else {
            let s = &mut self.stages[i];
            s.out.push_back(env);
            debug_assert!(s.out.len() <= s.out_capacity);
            self.counters.stages[i].occupancy.sample(s.out.len());
        }
    }

    fn push_sink(&self, env: Envelope) {
        let mut st = self.sink.state.lock();
        st.items.push_back(env);
        debug_assert!(st.items.len() <= self.sink.capacity);
        self.counters.sink_occupancy.sample(st.items.len());
        self.counters.mark_first_item();
        self.sink.ready.notify_all();
    }

    /// Next input of stage `i` (stage 0 pulls the source).
    fn pop_in(&mut self, i: usize) -> Option<Envelope> {
        if i == 0 {
            return self.pull_source();
        }
        let env = self.stages[i - 1].out.pop_front()?;
        self.counters.stages[i - 1]
            .occupancy
            .sample(self.stages[i - 1].out.len());
        Some(env)
    }

    fn pull_source(&mut self) -> Option<Envelope> {
        if self.source_done {
            return None;
        }
        let started = Instant::now();
        let next = self.source.as_mut().and_then(Iterator::next);
        self.counters
            .source_pull_us
            .fetch_add(started.elapsed().as_micros() as u64, Ordering::Relaxed);
        match next {
            Some(item) => {
                self.counters.source_pulled.fetch_add(1, Ordering::AcqRel);
                Some(Envelope { item, weight: 1 })
            }
            None => {
                self.source_done = true;
                self.source = None;
                None
            }
        }
    }

    fn input_exhausted(&self, i: usize) -> bool {
        if i == 0 {
            self.source_done
        } else {
            self.stages[i - 1].finished && self.stages[i - 1].out.is_empty()
        }
    }

    // -- scheduling -------------------------------------------------------

    fn pump(&mut self) {
        loop {
            let mut progressed = false;
            if self.stages.is_empty() {
                progressed |= self.pump_passthrough();
            }
            for i in (0..self.stages.len()).rev() {
                progressed |= match self.stages[i].kind {
                    Kind::Map(_) => self.pump_map(i),
                    Kind::Aggregate(_) => self.pump_aggregate(i),
                };
            }
            if !progressed {
                break;
            }
        }
        self.update_stalls();
    }

    fn pump_passthrough(&mut self) -> bool {
        let mut progressed = false;
        if self.drain_deadline.is_some() {
            return false;
        }
        while !self.source_done && self.sink.state.lock().items.len() < self.sink.capacity {
            match self.pull_source() {
                Some(env) => {
                    self.push_sink(env);
                    progressed = true;
                }
                None => break,
            }
        }
        if self.source_done && !self.sink.state.lock().eos {
            self.set_eos();
            progressed = true;
        }
        progressed
    }

    fn map_stage(&self, i: usize) -> &MapStage {
        match &self.stages[i].kind {
            Kind::Map(m) => m,
            Kind::Aggregate(_) => unreachable!(),
        }
    }

    fn map_stage_mut(&mut self, i: usize) -> &mut MapStage {
        match &mut self.stages[i].kind {
            Kind::Map(m) => m,
            Kind::Aggregate(_) => unreachable!(),
        }
    }

    fn pump_map(&mut self, i: usize) -> bool {
        let mut progressed = self.release(i);
        if self.drain_deadline.is_none() {
            loop {
                let m = self.map_stage(i);
                let taken = m.slots.len();
                if taken >= m.concurrency
                    || (m.reserve_output && self.out_len(i) + taken >= self.out_capacity(i))
                {
                    break;
                }
                match self.pop_in(i) {
                    Some(env) => {
                        self.dispatch(i, env);
                        progressed = true;
                    }
                    None => break,
                }
            }
        }
        if !self.stages[i].finished
            && self.map_stage(i).slots.is_empty()
            && self.input_exhausted(i)
            && self.drain_deadline.is_none()
        {
            self.finish_stage(i);
            progressed = true;
        }
        progressed
    }

    fn pump_aggregate(&mut self, i: usize) -> bool {
        let mut progressed = false;
        if self.drain_deadline.is_some() {
            return false;
        }
        loop {
            let full = match &self.stages[i].kind {
                Kind::Aggregate(a) => a.buf.len() == a.batch_size,
                Kind::Map(_) => unreachable!(),
            };
            if full {
                if self.out_len(i) >= self.out_capacity(i) {
                    break;
                }
                self.emit_batch(i);
                progressed = true;
                continue;
            }
            match self.pop_in(i) {
                Some(env) => {
                    let c = &self.counters.stages[i];
                    c.dequeued.fetch_add(1, Ordering::AcqRel);
                    c.succeeded.fetch_add(1, Ordering::AcqRel);
                    if let Kind::Aggregate(a) = &mut self.stages[i].kind {
                        a.buf.push(env);
                    }
                    progressed = true;
                }
                None => break,
            }
        }
        if !self.stages[i].finished && self.input_exhausted(i) {
            let (remaining, flush) = match &self.stages[i].kind {
                Kind::Aggregate(a) => (a.buf.len(), a.flush_remainder),
                Kind::Map(_) => unreachable!(),
            };
            if remaining > 0 && flush {
                if self.out_len(i) >= self.out_capacity(i) {
                    return progressed;
                }
                self.emit_batch(i);
            } else if remaining > 0 {
                if let Kind::Aggregate(a) = &mut self.stages[i].kind {
                    let dropped: u64 = a.buf.drain(..).map(|e| e.weight).sum();
                    self.counters
                        .dropped_remainder
                        .fetch_add(dropped, Ordering::AcqRel);
                }
            }
            self.finish_stage(i);
            progressed = true;
        }
        progressed
    }

    fn emit_batch(&mut self, i: usize) {
        let env = match &mut self.stages[i].kind {
            Kind::Aggregate(a) => {
                let parts = std::mem::take(&mut a.buf);
                let weight = parts.iter().map(|e| e.weight).sum();
                let item = (a.collect)(parts.into_iter().map(|e| e.item).collect());
                Envelope { item, weight }
            }
            Kind::Map(_) => unreachable!(),
        };
        self.push_out(i, env);
    }

    fn finish_stage(&mut self, i: usize) {
        self.stages[i].finished = true;
        self.trace(i, "eos", 0, 0);
        if self.is_last(i) {
            self.set_eos();
        }
    }

    fn set_eos(&self) {
        let mut st = self.sink.state.lock();
        st.eos = true;
        self.sink.ready.notify_all();
    }

    fn dispatch(&mut self, i: usize, env: Envelope) {
        let tx = self.events_tx.clone();
        let m = self.map_stage_mut(i);
        let seq = m.next_seq;
        m.next_seq += 1;
        m.slots.insert(seq, Slot::Running { weight: env.weight });
        self.running += 1;
        self.counters.stages[i]
            .dequeued
            .fetch_add(1, Ordering::AcqRel);
        self.trace(i, "start", seq, 0);

        let item = env.item;
        let m = self.map_stage(i);
        let submitted = match (&m.func, &m.exec) {
            (StageFn::Sync(f), Exec::Pool(pool)) => {
                let f = f.clone();
                pool.execute(Box::new(move || {
                    let started = Instant::now();
                    let outcome = catch_unwind(AssertUnwindSafe(|| f(item)))
                        .unwrap_or_else(|p| Err(panic_message(p)));
                    send_completion(&tx, i, seq, outcome, started);
                }))
            }
            (StageFn::Deferred(f), Exec::Pool(pool)) => {
                let f = f.clone();
                pool.execute(Box::new(move || {
                    let started = Instant::now();
                    match catch_unwind(AssertUnwindSafe(|| f(item))) {
                        Ok(d) => d.on_complete(move |r| {
                            let outcome = r.unwrap_or_else(|c| Err(c.to_string()));
                            send_completion(&tx, i, seq, outcome, started);
                        }),
                        Err(p) => send_completion(&tx, i, seq, Err(panic_message(p)), started),
                    }
                }))
            }
            (StageFn::Remote { registry, name }, Exec::Pool(pool)) => {
                let (registry, name) = (registry.clone(), name.clone());
                pool.execute(Box::new(move || {
                    let started = Instant::now();
                    let bytes = *item
                        .downcast::<Vec<u8>>()
                        .expect("remote stages take bytes");
                    let outcome = catch_unwind(AssertUnwindSafe(|| registry.call(&name, &bytes)))
                        .unwrap_or_else(|p| Err(panic_message(p)))
                        .map(|out| Box::new(out) as Item);
                    send_completion(&tx, i, seq, outcome, started);
                }))
            }
            (StageFn::Remote { name, .. }, Exec::Subprocess(pool)) => {
                let started = Instant::now();
                let bytes = item
                    .downcast::<Vec<u8>>()
                    .expect("remote stages take bytes");
                pool.submit(name, &bytes).map(|d| {
                    d.on_complete(move |r| {
                        let outcome = match r {
                            Ok(Ok(out)) => Ok(Box::new(out) as Item),
                            Ok(Err(e)) => Err(e.to_string()),
                            Err(c) => Err(c.to_string()),
                        };
                        send_completion(&tx, i, seq, outcome, started);
                    })
                })
            }
            (_, Exec::Pending) | (_, Exec::Subprocess(_)) => {
                Err(crate::executors::SubmitError::ShutDown)
            }
        };
        if let Err(e) = submitted {
            self.complete(i, seq, Err(e.to_string()), 0);
        }
    }

    fn complete(&mut self, i: usize, seq: u64, outcome: Result<Item, String>, dur_us: u64) {
        let weight = match self.map_stage_mut(i).slots.get(&seq) {
            Some(Slot::Running { weight }) => *weight,
            _ => return,
        };
        self.running -= 1;
        let counters = self.counters.clone();
        let c = &counters.stages[i];
        c.durations.record(dur_us);
        let failed = outcome.is_err();
        let slot = match outcome {
            Ok(item) => {
                c.succeeded.fetch_add(1, Ordering::AcqRel);
                self.trace(i, "ok", seq, dur_us);
                Slot::Done(Some(Envelope { item, weight }))
            }
            Err(msg) => {
                c.failed.fetch_add(1, Ordering::AcqRel);
                self.counters
                    .failed_items
                    .fetch_add(weight, Ordering::AcqRel);
                self.trace(i, "fail", seq, dur_us);
                self.on_failure(i, msg);
                Slot::Done(None)
            }
        };
        let m = self.map_stage_mut(i);
        match (&slot, m.mode) {
            (Slot::Done(None), OrderMode::Completion) => {
                m.slots.remove(&seq);
            }
            (Slot::Done(Some(_)), OrderMode::Completion) => {
                m.slots.insert(seq, slot);
                m.parked.push_back(seq);
            }
            _ => {
                m.slots.insert(seq, slot);
            }
        }
        m.window.push_back(failed);
        m.window_failures += failed as usize;
        if m.window.len() > FAILURE_WINDOW {
            m.window_failures -= m.window.pop_front().unwrap() as usize;
        }
        self.check_abort_ratio(i);
        self.release(i);
    }

    /// Next finished result eligible for the output queue: the oldest
    /// completion, or in FIFO mode the head slot once it is done.
    fn releasable(&self, i: usize) -> Option<u64> {
        let m = self.map_stage(i);
        match m.mode {
            OrderMode::Completion => m.parked.front().copied(),
            OrderMode::Fifo => match m.slots.first_key_value() {
                Some((k, Slot::Done(_))) => Some(*k),
                _ => None,
            },
        }
    }

    /// Moves finished results into the output queue while it has room.
    fn release(&mut self, i: usize) -> bool {
        let mut moved = false;
        while let Some(key) = self.releasable(i) {
            let has_room = self.out_len(i) < self.out_capacity(i);
            let m = self.map_stage_mut(i);
            let placeable = matches!(m.slots.get(&key), Some(Slot::Done(None))) || has_room;
            if !placeable {
                break;
            }
            if m.mode == OrderMode::Completion {
                m.parked.pop_front();
            }
            if let Some(Slot::Done(Some(env))) = m.slots.remove(&key) {
                self.push_out(i, env);
            }
            moved = true;
        }
        moved
    }

    fn on_failure(&mut self, i: usize, message: String) {
        if self.map_stage(i).policy == ErrorPolicy::FailFast {
            let stage = self.counters.stages[i].name.clone();
            self.fail(PipelineError::StageFailed { stage, message });
        }
    }

    fn check_abort_ratio(&mut self, i: usize) {
        let m = self.map_stage(i);
        if let Some(limit) = m.abort_ratio {
            let observed = m.window_failures as f64 / FAILURE_WINDOW as f64;
            if observed > limit {
                let stage = self.counters.stages[i].name.clone();
                self.fail(PipelineError::FailureRatioExceeded {
                    stage,
                    observed,
                    limit,
                });
            }
        }
    }

    fn fail(&mut self, error: PipelineError) {
        let mut st = self.sink.state.lock();
        if st.error.is_none() {
            st.error = Some(error);
            self.sink.ready.notify_all();
        }
        drop(st);
        let deadline = Instant::now() + super::config::DEFAULT_DRAIN_DEADLINE;
        self.drain_deadline = Some(self.drain_deadline.map_or(deadline, |d| d.min(deadline)));
    }

    // -- stall accounting -------------------------------------------------

    /// Producers of stage `i` holding a result that cannot enter the full
    /// output queue.
    fn blocked_producers(&self, i: usize) -> usize {
        if self.drain_deadline.is_some() || self.out_len(i) < self.out_capacity(i) {
            return 0;
        }
        match &self.stages[i].kind {
            Kind::Map(m) => match m.mode {
                OrderMode::Completion => m.parked.len(),
                OrderMode::Fifo => m
                    .slots
                    .values()
                    .take_while(|s| matches!(s, Slot::Done(_)))
                    .count(),
            },
            Kind::Aggregate(a) => (a.buf.len() == a.batch_size) as usize,
        }
    }

    /// Accrues blocked-on-put time as (blocked producers x elapsed) between
    /// scheduling rounds.
    fn update_stalls(&mut self) {
        let now = Instant::now();
        for i in 0..self.stages.len() {
            self.accrue_blocked(i, now);
            self.stages[i].blocked = self.blocked_producers(i);
        }
    }

    fn accrue_blocked(&mut self, i: usize, now: Instant) {
        let s = &mut self.stages[i];
        if s.blocked > 0 {
            let us = (now - s.blocked_since).as_micros() as u64 * s.blocked as u64;
            self.counters.stages[i]
                .blocked_on_put_us
                .fetch_add(us, Ordering::Relaxed);
        }
        s.blocked_since = now;
    }

    fn finish_stalls(&mut self) {
        let now = Instant::now();
        for i in 0..self.stages.len() {
            self.accrue_blocked(i, now);
            self.stages[i].blocked = 0;
        }
    }

    /// Stops scheduling and counts everything still resident as abandoned.
    /// Items already in the sink are accounted by the consumer side.
    fn shut_down(mut self, deadline_hit: bool) -> ControlExit {
        self.finish_stalls();
        self.source = None;
        let mut abandoned = 0;
        for s in &mut self.stages {
            abandoned += s.out.drain(..).map(|e| e.weight).sum::<u64>();
            match &mut s.kind {
                Kind::Map(m) => {
                    m.parked.clear();
                    for (_, slot) in std::mem::take(&mut m.slots) {
                        abandoned += match slot {
                            Slot::Running { weight } => weight,
                            Slot::Done(Some(e)) => e.weight,
                            Slot::Done(None) => 0,
                        };
                    }
                }
                Kind::Aggregate(a) => abandoned += a.buf.drain(..).map(|e| e.weight).sum::<u64>(),
            }
        }
        self.counters
            .abandoned_items
            .fetch_add(abandoned, Ordering::AcqRel);
        self.counters.mark_finished();
        ControlExit { deadline_hit }
    }
}

fn send_completion(
    tx: &Sender<Event>,
    stage: usize,
    seq: u64,
    outcome: Result<Item, String>,
    started: Instant,
) {
    let dur_us = started.elapsed().as_micros() as u64;
    // The control thread may already be gone after a drain deadline.
    let _ = tx.send(Event::Completed {
        stage,
        seq,
        outcome,
        dur_us,
    });
}

fn panic_message(p: Box<dyn Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".to_string()
    }
}
