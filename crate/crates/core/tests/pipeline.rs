use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use spindle::{
    deferred, BuildError, ErrorPolicy, ExecutorBinding, Next, OrderMode, Pipeline, PipelineBuilder,
    PipelineError, PipelineState, StageConfig,
};

fn drain<T: Send + 'static>(p: &mut Pipeline<T>) -> Vec<T> {
    p.iter().map(|r| r.unwrap()).collect()
}

fn sorted<T: Ord>(mut v: Vec<T>) -> Vec<T> {
    v.sort();
    v
}

/// Polls `f` until it returns true or `limit` elapses.
fn eventually(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + limit;
    while Instant::now() < end {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(2));
    }
    f()
}

/// Waits until `f()` returns the same value for `quiet`.
fn settle<T: PartialEq + Copy>(quiet: Duration, mut f: impl FnMut() -> T) -> T {
    let mut last = f();
    let mut since = Instant::now();
    loop {
        thread::sleep(Duration::from_millis(5));
        let now = f();
        if now != last {
            last = now;
            since = Instant::now();
        } else if since.elapsed() >= quiet {
            return now;
        }
    }
}

#[test]
fn empty_source_ends_immediately() {
    let mut p = PipelineBuilder::new()
        .add_source(std::iter::empty::<u32>())
        .map(|x| x, StageConfig::new())
        .add_sink(3)
        .build(2)
        .unwrap();
    assert!(matches!(p.next_item(None), Ok(Next::EndOfStream)));
    assert_eq!(
        p.next_item(None).unwrap_err(),
        PipelineError::EndOfStreamConsumed
    );
}

#[test]
fn identity_passes_items_then_end_of_stream() {
    let mut p = PipelineBuilder::new()
        .add_source(["a", "b", "c"])
        .map(|x| x, StageConfig::new())
        .add_sink(3)
        .build(1)
        .unwrap();
    for want in ["a", "b", "c"] {
        assert!(matches!(p.next_item(None), Ok(Next::Item(x)) if x == want));
    }
    assert!(matches!(p.next_item(None), Ok(Next::EndOfStream)));
    assert!(p.next_item(None).is_err());
}

#[test]
fn no_stages_pipes_source_to_sink() {
    let mut p = PipelineBuilder::new()
        .add_source(0..50u32)
        .add_sink(2)
        .build(1)
        .unwrap();
    assert_eq!(drain(&mut p), (0..50).collect::<Vec<_>>());
    assert!(p.stop(Duration::from_secs(1)).is_conserved());
}

#[test]
fn pure_map_multiset() {
    let mut p = PipelineBuilder::new()
        .add_source([1, 2, 3])
        .map(|x: i32| x + 1, StageConfig::with_concurrency(3))
        .add_sink(3)
        .build(4)
        .unwrap();
    assert_eq!(sorted(drain(&mut p)), [2, 3, 4]);
}

#[test]
fn skip_and_record_even_failures() {
    let mut p = PipelineBuilder::new()
        .add_source(1..=10u32)
        .pipe(
            |x| {
                if x % 2 == 0 {
                    Err(format!("even {x}"))
                } else {
                    Ok(x)
                }
            },
            StageConfig::with_concurrency(2).name("odd"),
        )
        .add_sink(3)
        .build(2)
        .unwrap();
    assert_eq!(sorted(drain(&mut p)), [1, 3, 5, 7, 9]);
    let stats = p.snapshot();
    let st = stats.stage("odd").unwrap();
    assert_eq!((st.succeeded, st.failed), (5, 5));
    let report = p.stop(Duration::from_secs(1));
    assert_eq!((report.items_emitted, report.items_failed), (5, 5));
}

#[test]
fn aggregate_batch_sizes() {
    let sizes = |flush: bool, n: u32| {
        let mut p = PipelineBuilder::new()
            .add_source(0..n)
            .aggregate_with(32, flush)
            .add_sink(3)
            .build(2)
            .unwrap();
        let sizes: Vec<usize> = drain(&mut p).iter().map(Vec::len).collect();
        (sizes, p.stop(Duration::from_secs(1)))
    };
    let (s, r) = sizes(true, 100);
    assert_eq!(s, [32, 32, 32, 4]);
    assert_eq!(r.items_dropped_remainder, 0);
    let (s, r) = sizes(false, 100);
    assert_eq!(s, [32, 32, 32]);
    assert_eq!(r.items_dropped_remainder, 4);
    assert_eq!(r.items_emitted, 96);
    assert!(r.is_conserved());
    let (s, r) = sizes(true, 0);
    assert!(s.is_empty());
    assert_eq!(r.items_pulled, 0);
}

#[test]
fn aggregate_preserves_items() {
    let mut p = PipelineBuilder::new()
        .add_source(0..1000u32)
        .map(|x| x * 3, StageConfig::with_concurrency(4))
        .aggregate(7)
        .map(
            |b: Vec<u32>| b.iter().map(|&x| x as u64).sum::<u64>(),
            StageConfig::with_concurrency(2),
        )
        .add_sink(2)
        .build(4)
        .unwrap();
    let total: u64 = drain(&mut p).into_iter().sum();
    assert_eq!(total, (0..1000u64).map(|x| x * 3).sum::<u64>());
}

#[test]
fn paused_consumer_bounds_sink() {
    let mut p = PipelineBuilder::new()
        .add_source(0..1000u32)
        .map(|x| x, StageConfig::with_concurrency(4))
        .add_sink(3)
        .build(4)
        .unwrap();
    p.start().unwrap();
    let stats = p.stats_handle();
    settle(Duration::from_millis(200), || {
        stats.snapshot().source_pulled
    });
    let snap = p.snapshot();
    assert!(snap.sink_occupancy.max <= 3);
    assert!(snap.source_pulled <= p.residency_bound());
    assert_eq!(drain(&mut p).len(), 1000);
    assert!(p.snapshot().sink_occupancy.max <= 3);
}

#[test]
fn single_slot_sink_completes() {
    let mut p = PipelineBuilder::new()
        .add_source(0..200u32)
        .map(
            |x| x + 1,
            StageConfig::with_concurrency(3).queue_capacity(1),
        )
        .map(
            |x| x * 2,
            StageConfig::with_concurrency(2).queue_capacity(1),
        )
        .add_sink(1)
        .build(2)
        .unwrap();
    assert_eq!(
        sorted(drain(&mut p)),
        (0..200).map(|x| (x + 1) * 2).collect::<Vec<_>>()
    );
}

#[test]
fn large_sink_absorbs_whole_source_before_consumption() {
    let mut p = PipelineBuilder::new()
        .add_source(0..10u32)
        .map(|x| x, StageConfig::new())
        .add_sink(1000)
        .build(1)
        .unwrap();
    p.start().unwrap();
    let stats = p.stats_handle();
    assert!(eventually(Duration::from_secs(2), || stats
        .snapshot()
        .sink_occupancy
        .max
        == 10));
    assert_eq!(p.snapshot().source_pulled, 10);
    assert_eq!(p.snapshot().items.emitted, 0);
    assert_eq!(drain(&mut p).len(), 10);
}

#[test]
fn concurrency_sum_may_exceed_workers() {
    let mut p = PipelineBuilder::new()
        .add_source(0..100u32)
        .map(|x| x, StageConfig::with_concurrency(12).name("download"))
        .map(|x| x, StageConfig::with_concurrency(4).name("decode"))
        .add_sink(3)
        .build(16)
        .unwrap();
    assert_eq!(drain(&mut p).len(), 100);
}

#[test]
fn single_worker_is_correct() {
    let mut p = PipelineBuilder::new()
        .add_source(0..300u32)
        .map(|x| x + 1, StageConfig::with_concurrency(8))
        .map(|x| x * 2, StageConfig::with_concurrency(8))
        .ordering(OrderMode::Fifo)
        .add_sink(2)
        .build(1)
        .unwrap();
    assert_eq!(
        drain(&mut p),
        (0..300).map(|x| (x + 1) * 2).collect::<Vec<_>>()
    );
}

#[test]
fn build_errors() {
    let mut b = PipelineBuilder::new().add_source(0..3u32).add_sink(1);
    assert!(b.build(1).is_ok());
    assert_eq!(b.build(1).unwrap_err(), BuildError::AlreadyBuilt);

    let err = |mut b: PipelineBuilder<u32>| b.build(1).unwrap_err();
    assert_eq!(
        err(PipelineBuilder::new()
            .add_source(0..3u32)
            .add_source(0..3u32)
            .add_sink(1)),
        BuildError::DuplicateSource
    );
    assert_eq!(
        err(PipelineBuilder::new().add_source(0..3u32)),
        BuildError::MissingSink
    );
    assert_eq!(
        err(PipelineBuilder::new()
            .add_source(0..3u32)
            .add_sink(1)
            .add_sink(2)),
        BuildError::DuplicateSink
    );
    assert_eq!(
        err(PipelineBuilder::new()
            .add_source(0..3u32)
            .map(|x| x, StageConfig::with_concurrency(0))
            .add_sink(1)),
        BuildError::ZeroConcurrency
    );
    assert_eq!(
        err(PipelineBuilder::new()
            .add_source(0..3u32)
            .map(|x| x, StageConfig::new().queue_capacity(0))
            .add_sink(1)),
        BuildError::ZeroQueueCapacity
    );
    assert_eq!(
        err(PipelineBuilder::new().add_source(0..3u32).add_sink(0)),
        BuildError::ZeroSinkCapacity
    );
    assert_eq!(
        PipelineBuilder::new()
            .add_source(0..3u32)
            .add_sink(1)
            .build(0)
            .unwrap_err(),
        BuildError::ZeroWorkers
    );
    assert_eq!(
        PipelineBuilder::new()
            .add_source(0..3u32)
            .aggregate(0)
            .add_sink(1)
            .build(1)
            .unwrap_err(),
        BuildError::ZeroBatchSize
    );
}

#[test]
fn nothing_runs_before_first_consumption() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let pulled = Arc::new(AtomicUsize::new(0));
    let pl = pulled.clone();
    let mut p = PipelineBuilder::new()
        .add_source((0..10u32).inspect(move |_| {
            pl.fetch_add(1, Ordering::SeqCst);
        }))
        .map(
            move |x| {
                c.fetch_add(1, Ordering::SeqCst);
                x
            },
            StageConfig::new(),
        )
        .add_sink(3)
        .build(2)
        .unwrap();
    thread::sleep(Duration::from_millis(50));
    assert_eq!(p.state(), PipelineState::Built);
    assert_eq!(calls.load(Ordering::SeqCst), 0);
    assert_eq!(pulled.load(Ordering::SeqCst), 0);
    let s = p.snapshot();
    assert_eq!(
        (s.source_pulled, s.sink_emitted, s.stages[0].dequeued),
        (0, 0, 0)
    );
    assert!(matches!(p.next_item(None), Ok(Next::Item(0))));
    assert_eq!(p.state(), PipelineState::Running);
}

#[test]
fn huge_lazy_source_is_not_exhausted() {
    let pulled = Arc::new(AtomicUsize::new(0));
    let pl = pulled.clone();
    let source = (0..1_000_000u64).map(move |i| {
        pl.fetch_add(1, Ordering::SeqCst);
        format!("shard/{i:07}.ppm")
    });
    let mut p = PipelineBuilder::new()
        .add_source(source)
        .map(|s: String| s.len(), StageConfig::with_concurrency(4))
        .aggregate(32)
        .add_sink(3)
        .build(4)
        .unwrap();
    let first = match p.next_item(None).unwrap() {
        Next::Item(b) => b,
        _ => panic!("expected a batch"),
    };
    assert_eq!(first.len(), 32);
    let bound = p.residency_bound() as usize + 32;
    thread::sleep(Duration::from_millis(50));
    assert!(
        pulled.load(Ordering::SeqCst) <= bound,
        "{}",
        pulled.load(Ordering::SeqCst)
    );
    let report = p.stop(Duration::from_secs(1));
    assert!(report.is_conserved());
    assert!((report.items_pulled as usize) < 1_000_000);
}

#[test]
fn taking_one_item_releases_exactly_one_task() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let mut p = PipelineBuilder::new()
        .add_source(0..10_000u32)
        .map(
            move |x| {
                c.fetch_add(1, Ordering::SeqCst);
                x
            },
            StageConfig::with_concurrency(4),
        )
        .add_sink(3)
        .build(4)
        .unwrap();
    p.start().unwrap();
    let before = settle(Duration::from_millis(150), || calls.load(Ordering::SeqCst));
    assert!(matches!(p.next_item(None), Ok(Next::Item(_))));
    let after = settle(Duration::from_millis(150), || calls.load(Ordering::SeqCst));
    assert_eq!(after, before + 1);
}

#[test]
fn stop_after_drain_is_quiet() {
    let mut p = PipelineBuilder::new()
        .add_source(0..20u32)
        .map(|x| x, StageConfig::with_concurrency(2))
        .add_sink(3)
        .build(2)
        .unwrap();
    drain(&mut p);
    let r = p.stop(Duration::from_secs(1));
    assert_eq!(r.items_abandoned, 0);
    assert!(!r.drain_deadline_hit);
    assert!(r.is_conserved());
    assert_eq!(p.stop(Duration::from_secs(1)), r);
    assert_eq!(p.state(), PipelineState::Stopped);
    assert_eq!(p.live_threads(), 0);
    assert_eq!(p.next_item(None).unwrap_err(), PipelineError::Stopped);
}

#[test]
fn stop_mid_run_drains_in_flight() {
    let mut p = PipelineBuilder::new()
        .add_source(0..1000u32)
        .map(
            |x| {
                thread::sleep(Duration::from_millis(50));
                x
            },
            StageConfig::with_concurrency(4),
        )
        .add_sink(3)
        .build(4)
        .unwrap();
    for _ in 0..5 {
        p.next_item(None).unwrap();
    }
    let r = p.stop(Duration::from_secs(1));
    assert!(!r.drain_deadline_hit);
    assert!(r.is_conserved(), "{r:?}");
    assert!(r.items_pulled < 1000);
    assert_eq!(p.live_threads(), 0);
    let s = p.snapshot();
    assert_eq!(s.source_pulled, r.items_pulled);
    assert_eq!(s.items.emitted, r.items_emitted);
    assert_eq!(s.items.abandoned, r.items_abandoned);
}

#[test]
fn stop_never_started_pipeline() {
    let pulled = Arc::new(AtomicUsize::new(0));
    let pl = pulled.clone();
    let mut p = PipelineBuilder::new()
        .add_source((0..10u32).inspect(move |_| {
            pl.fetch_add(1, Ordering::SeqCst);
        }))
        .add_sink(1)
        .build(1)
        .unwrap();
    let r = p.stop(Duration::from_millis(10));
    assert_eq!(r.items_pulled, 0);
    assert_eq!(pulled.load(Ordering::SeqCst), 0);
    assert_eq!(p.live_threads(), 0);
}

#[test]
fn wedged_sync_stage_is_detached() {
    let (tx, rx) = std::sync::mpsc::channel::<()>();
    let rx = Mutex::new(rx);
    let mut p = PipelineBuilder::new()
        .add_source(0..10u32)
        .map(
            move |x| {
                if x == 0 {
                    // Blocks until the test releases it.
                    let _ = rx.lock().unwrap().recv();
                }
                x
            },
            StageConfig::new(),
        )
        .add_sink(3)
        .build(2)
        .unwrap();
    p.start().unwrap();
    thread::sleep(Duration::from_millis(30));
    let t0 = Instant::now();
    let r = p.stop(Duration::from_millis(100));
    assert!(
        t0.elapsed() < Duration::from_millis(500),
        "{:?}",
        t0.elapsed()
    );
    assert!(r.drain_deadline_hit);
    assert_eq!(r.threads_detached, 1);
    assert!(r.is_conserved(), "{r:?}");
    assert_eq!(p.live_threads(), 1);
    // Releasing the wedge lets the detached worker exit.
    tx.send(()).unwrap();
    assert!(eventually(Duration::from_secs(2), || p.live_threads() == 0));
}

#[test]
fn wedged_deferred_stage_leaves_no_threads() {
    let held = Arc::new(Mutex::new(Vec::new()));
    let h = held.clone();
    let mut p = PipelineBuilder::new()
        .add_source(0..10u32)
        .pipe_deferred(
            move |x| {
                let (c, d) = deferred::<Result<u32, String>>();
                h.lock().unwrap().push(c);
                let _ = x;
                d
            },
            StageConfig::with_concurrency(2),
        )
        .add_sink(3)
        .build(2)
        .unwrap();
    p.start().unwrap();
    assert!(eventually(Duration::from_secs(1), || held
        .lock()
        .unwrap()
        .len()
        == 2));
    let t0 = Instant::now();
    let r = p.stop(Duration::from_millis(100));
    assert!(t0.elapsed() < Duration::from_millis(500));
    assert!(r.drain_deadline_hit);
    assert_eq!(r.threads_detached, 0);
    assert_eq!(r.items_abandoned, 2);
    assert!(r.is_conserved());
    assert_eq!(p.live_threads(), 0);
}

#[test]
fn scoped_run_stops_on_success_and_error() {
    let mut p = PipelineBuilder::new()
        .add_source(0..20u32)
        .map(|x| x, StageConfig::new())
        .add_sink(3)
        .build(2)
        .unwrap();
    let n = p
        .scoped_run(|p| Ok::<_, PipelineError>(p.iter().count()))
        .unwrap();
    assert_eq!(n, 20);
    assert_eq!(p.state(), PipelineState::Stopped);
    assert_eq!(p.live_threads(), 0);

    #[derive(Debug)]
    enum BodyError {
        Pipeline,
        Custom,
    }
    impl From<PipelineError> for BodyError {
        fn from(_: PipelineError) -> Self {
            BodyError::Pipeline
        }
    }
    let mut p = PipelineBuilder::new()
        .add_source(0..1000u32)
        .map(|x| x, StageConfig::new())
        .add_sink(3)
        .build(2)
        .unwrap();
    let err = p
        .scoped_run(|p| -> Result<(), BodyError> {
            p.next_item(None)?;
            Err(BodyError::Custom)
        })
        .unwrap_err();
    assert!(matches!(err, BodyError::Custom));
    let r = p.stop_report().expect("stopped by scope");
    assert!(r.is_conserved());
    assert_eq!(p.live_threads(), 0);
}

#[test]
fn nested_scoped_run_is_rejected() {
    let mut p = PipelineBuilder::new()
        .add_source(0..3u32)
        .add_sink(1)
        .build(1)
        .unwrap();
    let inner = p
        .scoped_run(|p| Ok::<_, PipelineError>(p.scoped_run(|_| Ok::<_, PipelineError>(()))))
        .unwrap();
    assert_eq!(inner.unwrap_err(), PipelineError::AlreadyConsuming);
}

#[test]
fn stage_functions_never_run_on_control_thread() {
    let seen = Arc::new(Mutex::new(HashSet::new()));
    let s1 = seen.clone();
    let s2 = seen.clone();
    let mut p = PipelineBuilder::new()
        .add_source(0..200u32)
        .map(
            move |x| {
                s1.lock().unwrap().insert(thread::current().id());
                x
            },
            StageConfig::with_concurrency(4),
        )
        .map(
            move |x| {
                s2.lock().unwrap().insert(thread::current().id());
                x
            },
            StageConfig::with_concurrency(2).executor(ExecutorBinding::dedicated(2)),
        )
        .add_sink(3)
        .build(3)
        .unwrap();
    drain(&mut p);
    let control = p.control_thread_id().unwrap();
    let seen = seen.lock().unwrap();
    assert!(!seen.contains(&control));
    assert!(!seen.contains(&thread::current().id()));
}

#[test]
fn fifo_order_and_completion_multiset() {
    let jitter = |x: u32| {
        thread::sleep(Duration::from_micros(((x * 7919) % 13) as u64 * 100));
        x
    };
    let mut fifo = PipelineBuilder::new()
        .add_source(0..1000u32)
        .map(jitter, StageConfig::with_concurrency(8))
        .ordering(OrderMode::Fifo)
        .add_sink(3)
        .build(8)
        .unwrap();
    let a = drain(&mut fifo);
    assert_eq!(a, (0..1000).collect::<Vec<_>>());
    let mut comp = PipelineBuilder::new()
        .add_source(0..1000u32)
        .map(
            jitter,
            StageConfig::with_concurrency(8).ordering(OrderMode::Completion),
        )
        .add_sink(3)
        .build(8)
        .unwrap();
    assert_eq!(sorted(drain(&mut comp)), a);
}

#[test]
fn fifo_with_failures_skips_failed_slots() {
    let mut p = PipelineBuilder::new()
        .add_source(0..500u32)
        .pipe(
            |x| {
                thread::sleep(Duration::from_micros((x % 5) as u64 * 200));
                if x % 7 == 3 {
                    Err("bad")
                } else {
                    Ok(x)
                }
            },
            StageConfig::with_concurrency(6).ordering(OrderMode::Fifo),
        )
        .add_sink(2)
        .build(6)
        .unwrap();
    let want: Vec<u32> = (0..500).filter(|x| x % 7 != 3).collect();
    assert_eq!(drain(&mut p), want);
}

#[test]
fn fail_fast_surfaces_error() {
    let mut p = PipelineBuilder::new()
        .add_source(0..100u32)
        .pipe(
            |x| if x == 10 { Err("boom") } else { Ok(x) },
            StageConfig::new()
                .name("strict")
                .error_policy(ErrorPolicy::FailFast),
        )
        .add_sink(3)
        .build(1)
        .unwrap();
    let err = p.iter().find_map(Result::err).expect("error surfaced");
    assert_eq!(
        err,
        PipelineError::StageFailed {
            stage: "strict".into(),
            message: "boom".into()
        }
    );
    let r = p.stop(Duration::from_secs(1));
    assert!(r.is_conserved(), "{r:?}");
    assert!(r.items_pulled < 100);
}

#[test]
fn abort_ratio_stops_pipeline() {
    let mut p = PipelineBuilder::new()
        .add_source(0..10_000u32)
        .pipe(
            |x| if x % 2 == 0 { Err("half") } else { Ok(x) },
            StageConfig::new().name("flaky").failure_abort_ratio(0.3),
        )
        .add_sink(3)
        .build(1)
        .unwrap();
    let err = p.iter().find_map(Result::err).expect("aborted");
    assert!(
        matches!(err, PipelineError::FailureRatioExceeded { ref stage, observed, limit } if stage == "flaky" && observed > limit && limit == 0.3)
    );
    assert!(p.stop(Duration::from_secs(1)).is_conserved());
}

#[test]
fn abort_ratio_tolerates_rare_failures() {
    let mut p = PipelineBuilder::new()
        .add_source(0..1000u32)
        .pipe(
            |x| if x % 20 == 0 { Err("rare") } else { Ok(x) },
            StageConfig::with_concurrency(4).failure_abort_ratio(0.1),
        )
        .add_sink(3)
        .build(4)
        .unwrap();
    assert_eq!(drain(&mut p).len(), 950);
}

#[test]
fn panicking_stage_counts_as_failure() {
    let mut p = PipelineBuilder::new()
        .add_source(0..20u32)
        .map(
            |x| {
                if x == 5 {
                    panic!("stage bug");
                }
                x
            },
            StageConfig::with_concurrency(2),
        )
        .add_sink(3)
        .build(2)
        .unwrap();
    assert_eq!(drain(&mut p).len(), 19);
    let r = p.stop(Duration::from_secs(1));
    assert_eq!(r.items_failed, 1);
}

#[test]
fn timeout_has_no_side_effects() {
    let (tx, rx) = std::sync::mpsc::channel::<()>();
    let rx = Mutex::new(rx);
    let mut p = PipelineBuilder::new()
        .add_source(0..2u32)
        .map(
            move |x| {
                let _ = rx.lock().unwrap().recv();
                x
            },
            StageConfig::new(),
        )
        .add_sink(1)
        .build(1)
        .unwrap();
    assert!(matches!(
        p.next_item(Some(Duration::from_millis(30))),
        Ok(Next::TimedOut)
    ));
    assert_eq!(p.snapshot().sink_emitted, 0);
    tx.send(()).unwrap();
    tx.send(()).unwrap();
    assert_eq!(drain(&mut p), [0, 1]);
}

#[test]
fn deferred_stage_does_not_hold_workers() {
    // 20 deferred tasks, each resolving after 50ms on a helper thread, on a
    // single worker: overlap proves the worker is released immediately.
    let mut p = PipelineBuilder::new()
        .add_source(0..20u32)
        .pipe_deferred(
            |x| {
                let (c, d) = deferred::<Result<u32, String>>();
                thread::spawn(move || {
                    thread::sleep(Duration::from_millis(50));
                    c.complete(Ok(x));
                });
                d
            },
            StageConfig::with_concurrency(20),
        )
        .add_sink(20)
        .build(1)
        .unwrap();
    let t0 = Instant::now();
    assert_eq!(sorted(drain(&mut p)), (0..20).collect::<Vec<_>>());
    assert!(
        t0.elapsed() < Duration::from_millis(400),
        "{:?}",
        t0.elapsed()
    );
}

#[test]
fn dedicated_pool_of_one_serializes() {
    let active = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let (a, pk) = (active.clone(), peak.clone());
    let mut p = PipelineBuilder::new()
        .add_source(0..30u32)
        .map(
            move |x| {
                let now = a.fetch_add(1, Ordering::SeqCst) + 1;
                pk.fetch_max(now, Ordering::SeqCst);
                thread::sleep(Duration::from_millis(2));
                a.fetch_sub(1, Ordering::SeqCst);
                x
            },
            StageConfig::with_concurrency(8).executor(ExecutorBinding::dedicated(1)),
        )
        .add_sink(3)
        .build(8)
        .unwrap();
    assert_eq!(drain(&mut p).len(), 30);
    assert_eq!(peak.load(Ordering::SeqCst), 1);
}

#[test]
fn stats_reconcile_after_injected_failures() {
    let mut p = PipelineBuilder::new()
        .add_source(0..100u32)
        .pipe(
            |x| if x % 10 == 0 { Err("injected") } else { Ok(x) },
            StageConfig::with_concurrency(4).name("decode"),
        )
        .map(|x| x, StageConfig::new().name("tail"))
        .add_sink(3)
        .build(4)
        .unwrap();
    let mut prev = p.snapshot();
    let mut n = 0;
    while let Ok(Next::Item(_)) = p.next_item(None) {
        n += 1;
        let s = p.snapshot();
        assert!(s.source_pulled >= prev.source_pulled);
        assert!(s.sink_emitted >= prev.sink_emitted);
        for (a, b) in s.stages.iter().zip(&prev.stages) {
            assert!(a.dequeued >= b.dequeued && a.succeeded >= b.succeeded && a.failed >= b.failed);
            assert_eq!(a.dequeued, a.succeeded + a.failed + a.in_flight);
            assert!(a.output_queue_occupancy.max <= a.output_queue_occupancy.capacity);
        }
        prev = s;
    }
    assert_eq!(n, 90);
    let s = p.snapshot();
    let decode = s.stage("decode").unwrap();
    assert_eq!((decode.succeeded, decode.failed), (90, 10));
    assert_eq!(s.stage("tail").unwrap().dequeued, 90);
    assert_eq!(s.sink_emitted, 90);
    assert!(s.ttfb_us.is_some());
    let r = p.stop(Duration::from_secs(1));
    let s = p.snapshot();
    assert_eq!(
        (
            r.items_pulled,
            r.items_emitted,
            r.items_failed,
            r.items_abandoned
        ),
        (
            s.source_pulled,
            s.items.emitted,
            s.items.failed,
            s.items.abandoned
        )
    );
}

#[test]
fn concurrent_snapshots_from_other_thread() {
    let mut p = PipelineBuilder::new()
        .add_source(0..2000u32)
        .map(|x| x, StageConfig::with_concurrency(4))
        .add_sink(3)
        .build(2)
        .unwrap();
    let handle = p.stats_handle();
    let reader = thread::spawn(move || {
        let mut last = 0;
        for _ in 0..200 {
            let s = handle.snapshot();
            assert!(s.source_pulled >= last);
            last = s.source_pulled;
        }
    });
    assert_eq!(drain(&mut p).len(), 2000);
    reader.join().unwrap();
}

#[test]
fn snapshot_json_shape() {
    let mut p = PipelineBuilder::new()
        .add_source(0..10u32)
        .map(|x| x, StageConfig::new().name("m"))
        .add_sink(3)
        .build(1)
        .unwrap();
    drain(&mut p);
    let v: serde_json::Value = serde_json::from_str(&p.snapshot().to_json()).unwrap();
    assert_eq!(v["source_pulled"], 10);
    assert_eq!(v["stages"][0]["name"], "m");
    assert_eq!(v["stages"][0]["succeeded"], 10);
}
