//! Flat `key = value` benchmark configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! workload = image
//! corpus = corpus/manifest.txt
//! concurrency = 1,2,4
//! executor = shared
//! ```
//!
//! Relative corpus paths resolve against the config file's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use spindle::netsim::FetchProfile;
use spindle::OrderMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Workload {
    Image,
    Sleep,
    FetchImage,
}

impl Workload {
    pub fn as_str(self) -> &'static str {
        match self {
            Workload::Image => "image",
            Workload::Sleep => "sleep",
            Workload::FetchImage => "fetch_image",
        }
    }

    pub fn needs_corpus(self) -> bool {
        self != Workload::Sleep
    }
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Workload {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "image" => Ok(Workload::Image),
            "sleep" => Ok(Workload::Sleep),
            "fetch_image" => Ok(Workload::FetchImage),
            _ => Err(format!(
                "unknown workload '{s}' (image, sleep, fetch_image)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExecutorChoice {
    Shared,
    Dedicated,
    Subprocess,
}

impl ExecutorChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecutorChoice::Shared => "shared",
            ExecutorChoice::Dedicated => "dedicated",
            ExecutorChoice::Subprocess => "subprocess",
        }
    }
}

impl fmt::Display for ExecutorChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExecutorChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shared" => Ok(ExecutorChoice::Shared),
            "dedicated" => Ok(ExecutorChoice::Dedicated),
            "subprocess" => Ok(ExecutorChoice::Subprocess),
            _ => Err(format!(
                "unknown executor '{s}' (shared, dedicated, subprocess)"
            )),
        }
    }
}

pub fn ordering_name(mode: OrderMode) -> &'static str {
    match mode {
        OrderMode::Fifo => "fifo",
        OrderMode::Completion => "completion",
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{key}: {message}")]
    Value { key: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub workload: Workload,
    pub corpus: Option<PathBuf>,
    pub concurrency: Vec<usize>,
    pub workers: usize,
    pub batch_size: usize,
    pub sink_capacity: usize,
    /// One or more backends; each is swept separately.
    pub executors: Vec<ExecutorChoice>,
    pub ordering: OrderMode,
    pub sample_count: usize,
    /// Extra hashing passes per decoded byte.
    pub cpu_burn: u32,
    pub out_width: u32,
    pub out_height: u32,
    pub sleep: Duration,
    pub fetch: FetchProfile,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            workload: Workload::Sleep,
            corpus: None,
            concurrency: vec![1, 2, 4],
            workers: 4,
            batch_size: 32,
            sink_capacity: 4,
            executors: vec![ExecutorChoice::Shared],
            ordering: OrderMode::Completion,
            sample_count: 256,
            cpu_burn: 0,
            out_width: 224,
            out_height: 224,
            sleep: Duration::from_millis(10),
            fetch: FetchProfile::default(),
            repetitions: 3,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    raw.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        message: e.to_string(),
    })
}

fn list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    raw.split(',').map(|s| value(key, s.trim())).collect()
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "workload" => c.workload = value(k, v)?,
                "corpus" => c.corpus = Some(PathBuf::from(v)),
                "concurrency" | "concurrency_list" => c.concurrency = list(k, v)?,
                "workers" | "worker_count" => c.workers = value(k, v)?,
                "batch_size" => c.batch_size = value(k, v)?,
                "sink_capacity" => c.sink_capacity = value(k, v)?,
                "executor" => c.executors = list(k, v)?,
                "ordering" => {
                    c.ordering = match v {
                        "fifo" => OrderMode::Fifo,
                        "completion" => OrderMode::Completion,
                        _ => {
                            return Err(ConfigError::Value {
                                key: k.into(),
                                message: format!("'{v}' is not fifo or completion"),
                            })
                        }
                    }
                }
                "sample_count" => c.sample_count = value(k, v)?,
                "cpu_burn" => c.cpu_burn = value(k, v)?,
                "out_width" => c.out_width = value(k, v)?,
                "out_height" => c.out_height = value(k, v)?,
                "sleep_ms" => c.sleep = Duration::from_millis(value(k, v)?),
                "fetch_latency_ms" => c.fetch.base_latency = Duration::from_millis(value(k, v)?),
                "fetch_jitter_ms" => c.fetch.jitter = Duration::from_millis(value(k, v)?),
                "fetch_failure_rate" => c.fetch.failure_rate = value(k, v)?,
                "fetch_rate_limit" => {
                    c.fetch.rate_limit = match v {
                        "none" => None,
                        _ => Some(value(k, v)?),
                    }
                }
                "fetch_rate_burst" => c.fetch.rate_burst = value(k, v)?,
                "fetch_seed" | "seed" => c.fetch.seed = value(k, v)?,
                "repetitions" => c.repetitions = value(k, v)?,
                _ => {
                    return Err(ConfigError::Syntax {
                        line: n + 1,
                        message: format!("unknown key '{k}'"),
                    })
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut c = Self::parse(&text)?;
        if let Some(corpus) = &c.corpus {
            if corpus.is_relative() {
                c.corpus = Some(path.parent().unwrap_or(Path::new(".")).join(corpus));
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.sample_count < self.batch_size {
            return Err(ConfigError::Invalid(format!(
                "sample_count ({}) must be at least batch_size ({})",
                self.sample_count, self.batch_size
            )));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if self.batch_size == 0 || self.sink_capacity == 0 || self.workers == 0 {
            return bad("batch_size, sink_capacity and workers must be positive");
        }
        if self.concurrency.is_empty() || self.concurrency.contains(&0) {
            return bad("concurrency list must be non-empty and positive");
        }
        if self.executors.is_empty() {
            return bad("executor list must be non-empty");
        }
        if self.out_width == 0 || self.out_height == 0 {
            return bad("output dimensions must be positive");
        }
        if self.workload.needs_corpus() && self.corpus.is_none() {
            return Err(ConfigError::Invalid(format!(
                "workload {} needs a corpus manifest",
                self.workload
            )));
        }
        self.fetch
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
