//! Builds and drives benchmark pipelines.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use spindle::executors::decode_resize_args;
use spindle::media::{make_batch, BatchBuffer, BatchShape, BufferPool, ImageFrame};
use spindle::netsim::{CorpusError, CorpusManifest, FetchClient, ProfileError};
use spindle::{
    BuildError, ExecutorBinding, Pipeline, PipelineBuilder, PipelineError, PipelineStats,
    RemoteFunctionRegistry, StageConfig, StopReport, WorkerCommand,
};

use crate::config::{ordering_name, BenchConfig, ExecutorChoice, Workload};
use crate::report::{BaselineReport, BenchReport, BenchRow};
use crate::sampler::{ResourceSampler, ResourceUsage, SAMPLE_INTERVAL};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("corpus: {0}")]
    Corpus(#[from] CorpusError),
    #[error("fetch profile: {0}")]
    Profile(#[from] ProfileError),
    #[error("pipeline build: {0}")]
    Build(#[from] BuildError),
    #[error("pipeline: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Stage(String),
}

/// How subprocess-backed stages launch their workers.
#[derive(Debug, Clone)]
pub struct Runner {
    pub worker: WorkerCommand,
}

impl Runner {
    pub fn new(worker: WorkerCommand) -> Self {
        Self { worker }
    }

    /// Re-executes the current binary with a `worker` argument.
    pub fn self_hosted() -> std::io::Result<Self> {
        Ok(Self::new(
            WorkerCommand::new(std::env::current_exe()?).arg("worker"),
        ))
    }
}

/// Stage inputs fixed before a run so every repetition sees the same work.
enum Inputs {
    Sleep(Vec<Vec<u8>>),
    Files {
        manifest: CorpusManifest,
        entries: Vec<String>,
    },
}

fn sleep_arg(ms: u64, index: u64) -> Vec<u8> {
    let mut v = ms.to_le_bytes().to_vec();
    v.extend_from_slice(&index.to_le_bytes());
    v
}

fn inputs(cfg: &BenchConfig) -> Result<Inputs, RunError> {
    cfg.validate()?;
    if cfg.workload == Workload::Sleep {
        let ms = cfg.sleep.as_millis() as u64;
        return Ok(Inputs::Sleep(
            (0..cfg.sample_count as u64)
                .map(|i| sleep_arg(ms, i))
                .collect(),
        ));
    }
    let manifest = CorpusManifest::load(cfg.corpus.as_ref().expect("validated"))?;
    if manifest.is_empty() {
        return Err(CorpusError::Empty.into());
    }
    let entries = manifest
        .entries
        .iter()
        .cycle()
        .take(cfg.sample_count)
        .cloned()
        .collect();
    Ok(Inputs::Files { manifest, entries })
}

fn read_args(root: &Path, entry: &str, w: u32, h: u32, burn: u32) -> Result<Vec<u8>, String> {
    let bytes = std::fs::read(root.join(entry)).map_err(|e| format!("{entry}: {e}"))?;
    Ok(decode_resize_args(w, h, burn, &bytes))
}

fn batch_of(
    frames: Vec<Vec<u8>>,
    w: u32,
    h: u32,
    pool: &BufferPool,
) -> Result<BatchBuffer, String> {
    let frames = frames
        .into_iter()
        .map(|px| ImageFrame::new(w, h, px).map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    make_batch(&frames, pool).map_err(|e| e.to_string())
}

fn binding(runner: &Runner, exec: ExecutorChoice, concurrency: usize) -> ExecutorBinding {
    match exec {
        ExecutorChoice::Shared => ExecutorBinding::shared(),
        ExecutorChoice::Dedicated => ExecutorBinding::dedicated(concurrency),
        ExecutorChoice::Subprocess => {
            ExecutorBinding::subprocess(concurrency, runner.worker.clone())
        }
    }
}

/// Per-run measurements gathered by the consumer loop.
struct Measured {
    wall: Duration,
    first_batch: Option<Duration>,
    first_batch_items: u64,
    batches: u64,
    report: StopReport,
    stats: PipelineStats,
}

fn drive<T: Send + 'static>(
    mut p: Pipeline<T>,
    t0: Instant,
    mut weigh: impl FnMut(&T) -> u64,
) -> Result<Measured, RunError> {
    let (mut batches, mut first_batch, mut first_batch_items) = (0, None, 0);
    let mut outcome = Ok(());
    for item in p.iter() {
        match item {
            Ok(v) => {
                let n = weigh(&v);
                if first_batch.is_none() {
                    first_batch = Some(t0.elapsed());
                    first_batch_items = n;
                }
                batches += 1;
            }
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    let wall = t0.elapsed();
    let report = p.stop(Duration::from_secs(5));
    outcome?;
    Ok(Measured {
        wall,
        first_batch,
        first_batch_items,
        batches,
        report,
        stats: p.snapshot(),
    })
}

/// Runs one pipeline over `inputs`, appending each sink batch to `sink` as a
/// list of per-sample byte strings when one is given.
fn run_once(
    cfg: &BenchConfig,
    runner: &Runner,
    inputs: &Inputs,
    exec: ExecutorChoice,
    concurrency: usize,
    mut sink: Option<&mut Vec<Vec<u8>>>,
) -> Result<Measured, RunError> {
    let registry = Arc::new(RemoteFunctionRegistry::builtin());
    let work = StageConfig::with_concurrency(concurrency)
        .executor(binding(runner, exec, concurrency))
        .ordering(cfg.ordering);
    let t0 = Instant::now();
    match inputs {
        Inputs::Sleep(args) => {
            let p = PipelineBuilder::new()
                .add_source(args.clone())
                .pipe_remote(registry, "sleep_ms", work.name("sleep"))
                .aggregate_with(cfg.batch_size, false)
                .add_sink(cfg.sink_capacity)
                .build(cfg.workers)?;
            drive(p, t0, |batch: &Vec<Vec<u8>>| {
                if let Some(out) = sink.as_deref_mut() {
                    out.extend(batch.iter().map(|b| b[8..].to_vec()));
                }
                batch.len() as u64
            })
        }
        Inputs::Files { manifest, entries } => {
            let (w, h, burn) = (cfg.out_width, cfg.out_height, cfg.cpu_burn);
            let pool = BufferPool::new(BatchShape::new(cfg.batch_size, h, w));
            let acquire = StageConfig::with_concurrency(concurrency).ordering(cfg.ordering);
            let source = PipelineBuilder::new().add_source(entries.clone());
            let args = if cfg.workload == Workload::FetchImage {
                let client = FetchClient::for_corpus(manifest, cfg.fetch.clone())?;
                source
                    .pipe_deferred(move |e: String| client.fetch(&e), acquire.name("fetch"))
                    .map(
                        move |ppm: Vec<u8>| decode_resize_args(w, h, burn, &ppm),
                        StageConfig::new().name("frame"),
                    )
            } else {
                let root = manifest.root.clone();
                source.pipe(
                    move |e: String| read_args(&root, &e, w, h, burn),
                    acquire.name("read"),
                )
            };
            let p = args
                .pipe_remote(registry, "decode_resize", work.name("decode"))
                .aggregate_with(cfg.batch_size, false)
                .pipe(
                    move |frames: Vec<Vec<u8>>| batch_of(frames, w, h, &pool),
                    StageConfig::new().name("batch").reserve_output_slot(true),
                )
                .add_sink(cfg.sink_capacity)
                .build(cfg.workers)?;
            drive(p, t0, |b: &BatchBuffer| {
                if let Some(out) = sink.as_deref_mut() {
                    out.extend((0..b.shape().count).map(|i| b.frame(i).to_vec()));
                }
                b.shape().count as u64
            })
        }
    }
}

fn row(
    cfg: &BenchConfig,
    exec: ExecutorChoice,
    concurrency: usize,
    repetition: usize,
    m: Measured,
    usage: ResourceUsage,
) -> BenchRow {
    let items = m.report.items_emitted;
    let adjusted = m.first_batch.and_then(|ttfb| {
        let rest = m.wall.checked_sub(ttfb)?.as_secs_f64();
        (m.batches > 1 && rest > 0.0).then(|| (items - m.first_batch_items) as f64 / rest)
    });
    BenchRow {
        workload: cfg.workload.to_string(),
        executor: exec.to_string(),
        ordering: ordering_name(cfg.ordering).to_string(),
        concurrency,
        repetition,
        workers: cfg.workers,
        batch_size: cfg.batch_size,
        items,
        batches: m.batches,
        failed: m.report.items_failed,
        dropped_remainder: m.report.items_dropped_remainder,
        wall_us: m.wall.as_micros() as u64,
        ttfb_us: m.first_batch.map(|d| d.as_micros() as u64),
        throughput: items as f64 / m.wall.as_secs_f64(),
        throughput_adjusted: adjusted,
        peak_rss_bytes: usage.peak_rss_bytes,
        cpu_user_us: usage.cpu.user_us,
        cpu_system_us: usage.cpu.system_us,
        stats: m.stats,
    }
}

/// Sweeps every (executor, concurrency, repetition) of `cfg`.
pub fn run_benchmark(cfg: &BenchConfig, runner: &Runner) -> Result<BenchReport, RunError> {
    let inputs = inputs(cfg)?;
    let mut rows = Vec::new();
    for &exec in &cfg.executors {
        for &c in &cfg.concurrency {
            for rep in 0..cfg.repetitions {
                let sampler = ResourceSampler::start(SAMPLE_INTERVAL);
                let m = run_once(cfg, runner, &inputs, exec, c, None);
                let usage = sampler.finish();
                let m = m?;
                rows.push(row(cfg, exec, c, rep, m, usage));
            }
        }
    }
    let mut report = BenchReport { rows };
    report.sort();
    Ok(report)
}

/// Sorted per-sample outputs of the pipeline for `cfg`; used to check that
/// backends and the sequential loop agree.
pub fn pipeline_outputs(
    cfg: &BenchConfig,
    runner: &Runner,
    exec: ExecutorChoice,
    concurrency: usize,
) -> Result<Vec<Vec<u8>>, RunError> {
    let mut out = Vec::new();
    run_once(
        cfg,
        runner,
        &inputs(cfg)?,
        exec,
        concurrency,
        Some(&mut out),
    )?;
    out.sort();
    Ok(out)
}

/// The same stage functions as the pipeline, called in a plain loop. Complete
/// batches only, matching the pipeline's dropped remainder.
fn sequential(
    cfg: &BenchConfig,
    inputs: &Inputs,
    mut sink: Option<&mut Vec<Vec<u8>>>,
) -> Result<(u64, Duration), RunError> {
    let registry = RemoteFunctionRegistry::builtin();
    let t0 = Instant::now();
    let full = cfg.sample_count / cfg.batch_size * cfg.batch_size;
    let mut items = 0;
    match inputs {
        Inputs::Sleep(args) => {
            for a in &args[..full] {
                let out = registry.call("sleep_ms", a).map_err(RunError::Stage)?;
                if let Some(s) = sink.as_deref_mut() {
                    s.push(out[8..].to_vec());
                }
                items += 1;
            }
        }
        Inputs::Files { manifest, entries } => {
            let (w, h) = (cfg.out_width, cfg.out_height);
            let pool = BufferPool::new(BatchShape::new(cfg.batch_size, h, w));
            let client = FetchClient::for_corpus(manifest, cfg.fetch.clone())?;
            let mut frames = Vec::with_capacity(cfg.batch_size);
            for e in entries {
                let args = if cfg.workload == Workload::FetchImage {
                    match client.fetch_blocking(e) {
                        Ok(ppm) => decode_resize_args(w, h, cfg.cpu_burn, &ppm),
                        Err(_) => continue,
                    }
                } else {
                    read_args(&manifest.root, e, w, h, cfg.cpu_burn).map_err(RunError::Stage)?
                };
                let Ok(px) = registry.call("decode_resize", &args) else {
                    continue;
                };
                frames.push(px);
                if frames.len() == cfg.batch_size {
                    let b = batch_of(std::mem::take(&mut frames), w, h, &pool)
                        .map_err(RunError::Stage)?;
                    if let Some(s) = sink.as_deref_mut() {
                        s.extend((0..b.shape().count).map(|i| b.frame(i).to_vec()));
                    }
                    items += b.shape().count as u64;
                }
            }
        }
    }
    Ok((items, t0.elapsed()))
}

/// Sorted per-sample outputs of the sequential loop.
pub fn sequential_outputs(cfg: &BenchConfig) -> Result<Vec<Vec<u8>>, RunError> {
    let mut out = Vec::new();
    sequential(cfg, &inputs(cfg)?, Some(&mut out))?;
    out.sort();
    Ok(out)
}

/// Lower bound (stage functions in a plain loop) and upper bound (a no-op
/// pipeline at concurrency 1) for normalizing benchmark throughput.
pub fn run_baseline_sequential(cfg: &BenchConfig) -> Result<BaselineReport, RunError> {
    let inputs = inputs(cfg)?;
    let (seq_items, seq_wall) = sequential(cfg, &inputs, None)?;

    let n = cfg.sample_count as u64;
    let t0 = Instant::now();
    let p = PipelineBuilder::new()
        .add_source(0..n)
        .map(
            |x: u64| x,
            StageConfig::with_concurrency(1).name("passthrough"),
        )
        .add_sink(cfg.sink_capacity)
        .build(1)?;
    let m = drive(p, t0, |_| 1)?;

    Ok(BaselineReport {
        workload: cfg.workload.to_string(),
        sequential_items: seq_items,
        sequential_wall_us: seq_wall.as_micros() as u64,
        sequential_throughput: seq_items as f64 / seq_wall.as_secs_f64(),
        passthrough_items: m.report.items_emitted,
        passthrough_wall_us: m.wall.as_micros() as u64,
        passthrough_throughput: m.report.items_emitted as f64 / m.wall.as_secs_f64(),
        passthrough_overhead_us: m.wall.as_secs_f64() * 1e6 / m.report.items_emitted.max(1) as f64,
    })
}
