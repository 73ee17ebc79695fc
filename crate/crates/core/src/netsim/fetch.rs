use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CorpusManifest;
use crate::deferred::{deferred, Deferred};

/// Simulated remote-storage behavior. Delay and failure for a request are a
/// pure function of `(seed, ordinal)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FetchProfile {
    pub base_latency: Duration,
    /// Half-range of the uniform jitter around `base_latency`.
    pub jitter: Duration,
    /// Probability in `[0, 1]` that a request fails.
    pub failure_rate: f64,
    /// Admitted requests per second, or unlimited.
    pub rate_limit: Option<f64>,
    /// Requests that may be admitted back to back before spacing applies.
    pub rate_burst: u32,
    pub seed: u64,
}

impl Default for FetchProfile {
    fn default() -> Self {
        Self {
            base_latency: Duration::from_millis(50),
            jitter: Duration::ZERO,
            failure_rate: 0.0,
            rate_limit: None,
            rate_burst: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProfileError {
    #[error("failure_rate must be within [0, 1], got {0}")]
    FailureRate(f64),
    #[error("rate_limit must be positive, got {0}")]
    RateLimit(f64),
    #[error("rate_burst must be at least 1")]
    Burst,
}

/// What the simulator decided for one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FetchPlan {
    pub delay: Duration,
    pub fails: bool,
}

impl FetchProfile {
    pub fn with_latency(base_latency: Duration) -> Self {
        Self {
            base_latency,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if !(0.0..=1.0).contains(&self.failure_rate) {
            return Err(ProfileError::FailureRate(self.failure_rate));
        }
        if let Some(r) = self.rate_limit {
            if !(r > 0.0 && r.is_finite()) {
                return Err(ProfileError::RateLimit(r));
            }
        }
        if self.rate_burst == 0 {
            return Err(ProfileError::Burst);
        }
        Ok(())
    }

    pub fn plan(&self, ordinal: u64) -> FetchPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(ordinal);
        let jitter = self.jitter.as_nanos() as u64;
        let offset = if jitter == 0 {
            0
        } else {
            rng.gen_range(0..=2 * jitter)
        };
        let nanos = (self.base_latency.as_nanos() as u64 + offset).saturating_sub(jitter);
        let fails = rng.gen::<f64>() < self.failure_rate;
        FetchPlan {
            delay: Duration::from_nanos(nanos),
            fails,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("simulated fetch failure for request {ordinal}")]
    Simulated { ordinal: u64 },
    #[error("cannot fetch {entry:?}: {source}")]
    Missing {
        entry: String,
        #[source]
        source: io::Error,
    },
    #[error("fetch client shut down")]
    Cancelled,
}

struct Timed {
    at: Instant,
    seq: u64,
    run: Box<dyn FnOnce() + Send>,
}

impl PartialEq for Timed {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Timed {}
impl PartialOrd for Timed {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}
impl Ord for Timed {
    // Reversed so the max-heap pops the earliest deadline.
    fn cmp(&self, other: &Self) -> CmpOrdering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

fn timer_loop(rx: Receiver<Timed>) {
    let mut heap = BinaryHeap::new();
    let mut open = true;
    loop {
        let now = Instant::now();
        while heap.peek().is_some_and(|t: &Timed| t.at <= now) {
            (heap.pop().unwrap().run)();
        }
        if !open {
            match heap.peek() {
                Some(t) => thread::sleep(t.at.saturating_duration_since(Instant::now())),
                None => return,
            }
            continue;
        }
        let got = match heap.peek() {
            Some(t) => rx.recv_timeout(t.at.saturating_duration_since(now)),
            None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
        };
        match got {
            Ok(t) => heap.push(t),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => open = false,
        }
    }
}

struct Inner {
    root: PathBuf,
    profile: FetchProfile,
    ordinal: AtomicU64,
    /// Theoretical arrival time of the next request (GCRA).
    tat: Mutex<Option<Instant>>,
    timer: Sender<Timed>,
}

/// Simulated storage client. Waiting requests sit on one timer thread, so a
/// pending fetch holds no pool worker.
#[derive(Clone)]
pub struct FetchClient {
    inner: Arc<Inner>,
}

impl FetchClient {
    pub fn new(root: impl Into<PathBuf>, profile: FetchProfile) -> Result<Self, ProfileError> {
        profile.validate()?;
        let (tx, rx) = crossbeam_channel::unbounded();
        thread::Builder::new()
            .name("spindle-netsim-timer".into())
            .spawn(move || timer_loop(rx))
            .expect("spawn timer thread");
        Ok(Self {
            inner: Arc::new(Inner {
                root: root.into(),
                profile,
                ordinal: AtomicU64::new(0),
                tat: Mutex::new(None),
                timer: tx,
            }),
        })
    }

    pub fn for_corpus(
        manifest: &CorpusManifest,
        profile: FetchProfile,
    ) -> Result<Self, ProfileError> {
        Self::new(manifest.root.clone(), profile)
    }

    pub fn profile(&self) -> &FetchProfile {
        &self.inner.profile
    }

    /// Requests issued so far.
    pub fn issued(&self) -> u64 {
        self.inner.ordinal.load(Ordering::Relaxed)
    }

    /// Rate-limiter admission time for a request arriving `now`.
    fn admit(&self, now: Instant) -> Instant {
        let Some(rate) = self.inner.profile.rate_limit else {
            return now;
        };
        let interval = Duration::from_secs_f64(1.0 / rate);
        let tolerance = interval * (self.inner.profile.rate_burst - 1);
        let mut tat = self.inner.tat.lock();
        let earliest = tat.map_or(now, |t| t.checked_sub(tolerance).unwrap_or(now));
        let admitted = now.max(earliest);
        *tat = Some(admitted.max(tat.unwrap_or(admitted)) + interval);
        admitted
    }

    /// Starts a fetch and returns its completion. Never blocks the caller.
    pub fn fetch(&self, entry: &str) -> Deferred<Result<Vec<u8>, FetchError>> {
        let ordinal = self.inner.ordinal.fetch_add(1, Ordering::Relaxed);
        let plan = self.inner.profile.plan(ordinal);
        let at = self.admit(Instant::now()) + plan.delay;
        let (completer, out) = deferred();
        let path = self.inner.root.join(entry);
        let entry = entry.to_string();
        let run = Box::new(move || {
            let result = if plan.fails {
                Err(FetchError::Simulated { ordinal })
            } else {
                std::fs::read(&path).map_err(|source| FetchError::Missing { entry, source })
            };
            completer.complete(result);
        });
        // The timer outlives every client handle, so the send cannot fail
        // while `self` exists.
        let _ = self.inner.timer.send(Timed {
            at,
            seq: ordinal,
            run,
        });
        out
    }

    pub fn fetch_blocking(&self, entry: &str) -> Result<Vec<u8>, FetchError> {
        self.fetch(entry)
            .wait()
            .unwrap_or(Err(FetchError::Cancelled))
    }
}

impl std::fmt::Debug for FetchClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FetchClient")
            .field("root", &self.inner.root)
            .field("profile", &self.inner.profile)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::gen_corpus;

    fn corpus(n: usize) -> (tempfile::TempDir, CorpusManifest) {
        let d = tempfile::tempdir().unwrap();
        let m = gen_corpus(d.path(), n, 4, 4, 1).unwrap();
        (d, m)
    }

    fn profile(ms: u64) -> FetchProfile {
        FetchProfile::with_latency(Duration::from_millis(ms))
    }

    #[test]
    fn plan_is_pure_in_seed_and_ordinal() {
        let p = FetchProfile {
            jitter: Duration::from_millis(20),
            failure_rate: 0.3,
            seed: 42,
            ..profile(50)
        };
        let a: Vec<_> = (0..200).map(|i| p.plan(i)).collect();
        let b: Vec<_> = (0..200)
            .rev()
            .map(|i| p.plan(i))
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        assert_eq!(a, b);
        for plan in &a {
            assert!(
                plan.delay >= Duration::from_millis(30) && plan.delay <= Duration::from_millis(70)
            );
        }
        let fails = a.iter().filter(|p| p.fails).count();
        assert!((30..=90).contains(&fails), "{fails}");
        let other = FetchProfile {
            seed: 43,
            ..p.clone()
        };
        assert_ne!(a, (0..200).map(|i| other.plan(i)).collect::<Vec<_>>());
    }

    #[test]
    fn jitter_larger_than_base_clamps_at_zero() {
        let p = FetchProfile {
            jitter: Duration::from_millis(10),
            ..profile(2)
        };
        for i in 0..100 {
            assert!(p.plan(i).delay <= Duration::from_millis(12));
        }
    }

    #[test]
    fn bytes_match_disk() {
        let (_d, m) = corpus(3);
        let client = FetchClient::for_corpus(&m, profile(1)).unwrap();
        for e in &m.entries {
            assert_eq!(
                client.fetch_blocking(e).unwrap(),
                std::fs::read(m.path_of(e)).unwrap()
            );
        }
    }

    #[test]
    fn certain_failure() {
        let (_d, m) = corpus(2);
        let p = FetchProfile {
            failure_rate: 1.0,
            ..profile(0)
        };
        let client = FetchClient::for_corpus(&m, p).unwrap();
        for i in 0..20 {
            let e = &m.entries[i % 2];
            assert!(
                matches!(client.fetch_blocking(e), Err(FetchError::Simulated { ordinal }) if ordinal == i as u64)
            );
        }
    }

    #[test]
    fn missing_entry() {
        let (_d, m) = corpus(1);
        let client = FetchClient::for_corpus(&m, profile(0)).unwrap();
        let err = client.fetch_blocking("nope.ppm").unwrap_err();
        assert!(matches!(err, FetchError::Missing { ref entry, .. } if entry == "nope.ppm"));
    }

    #[test]
    fn delay_is_applied_without_blocking_caller() {
        let (_d, m) = corpus(1);
        let client = FetchClient::for_corpus(&m, profile(60)).unwrap();
        let t0 = Instant::now();
        let pending: Vec<_> = (0..20).map(|_| client.fetch(&m.entries[0])).collect();
        assert!(t0.elapsed() < Duration::from_millis(30));
        for p in pending {
            p.wait().unwrap().unwrap();
        }
        let wall = t0.elapsed();
        assert!(
            wall >= Duration::from_millis(60) && wall < Duration::from_millis(300),
            "{wall:?}"
        );
    }

    #[test]
    fn rate_limit_spaces_admissions() {
        let (_d, m) = corpus(1);
        let p = FetchProfile {
            rate_limit: Some(50.0),
            ..profile(0)
        };
        let client = FetchClient::for_corpus(&m, p).unwrap();
        let done = Arc::new(Mutex::new(Vec::new()));
        let t0 = Instant::now();
        let pending: Vec<_> = (0..26).map(|_| client.fetch(&m.entries[0])).collect();
        for d in pending {
            let done = done.clone();
            d.on_complete(move |_| done.lock().push(Instant::now()));
        }
        while done.lock().len() < 26 {
            thread::sleep(Duration::from_millis(5));
        }
        // 26 requests at 50/s need 25 intervals of 20ms.
        let wall = t0.elapsed();
        assert!(wall >= Duration::from_millis(490), "{wall:?}");
        let mut times = done.lock().clone();
        times.sort();
        for w in times.windows(2) {
            assert!(
                w[1] - w[0] >= Duration::from_millis(15),
                "{:?}",
                w[1] - w[0]
            );
        }
    }

    #[test]
    fn burst_admits_back_to_back() {
        let (_d, m) = corpus(1);
        let p = FetchProfile {
            rate_limit: Some(10.0),
            rate_burst: 5,
            ..profile(0)
        };
        let client = FetchClient::for_corpus(&m, p).unwrap();
        let t0 = Instant::now();
        let pending: Vec<_> = (0..5).map(|_| client.fetch(&m.entries[0])).collect();
        for p in pending {
            p.wait().unwrap().unwrap();
        }
        assert!(t0.elapsed() < Duration::from_millis(80));
    }

    #[test]
    fn profile_validation() {
        assert!(FetchProfile {
            failure_rate: 1.5,
            ..profile(1)
        }
        .validate()
        .is_err());
        assert!(FetchProfile {
            rate_limit: Some(0.0),
            ..profile(1)
        }
        .validate()
        .is_err());
        assert!(FetchProfile {
            rate_burst: 0,
            ..profile(1)
        }
        .validate()
        .is_err());
        assert!(profile(1).validate().is_ok());
    }
}
