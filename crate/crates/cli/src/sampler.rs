//! Process resource sampling from OS accounting.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

pub const SAMPLE_INTERVAL: Duration = Duration::from_millis(100);

/// Resident set size of this process, from `/proc/self/status`.
pub fn current_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CpuTimes {
    pub user_us: u64,
    pub system_us: u64,
}

impl CpuTimes {
    pub fn now() -> Self {
        let mut ru = std::mem::MaybeUninit::<libc::rusage>::zeroed();
        // SAFETY: getrusage fills the struct; RUSAGE_SELF is always valid.
        let ru = unsafe {
            if libc::getrusage(libc::RUSAGE_SELF, ru.as_mut_ptr()) != 0 {
                return Self::default();
            }
            ru.assume_init()
        };
        let us = |t: libc::timeval| t.tv_sec as u64 * 1_000_000 + t.tv_usec as u64;
        Self {
            user_us: us(ru.ru_utime),
            system_us: us(ru.ru_stime),
        }
    }

    pub fn since(self, earlier: CpuTimes) -> CpuTimes {
        CpuTimes {
            user_us: self.user_us.saturating_sub(earlier.user_us),
            system_us: self.system_us.saturating_sub(earlier.system_us),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ResourceUsage {
    pub peak_rss_bytes: u64,
    pub cpu: CpuTimes,
    pub samples: u64,
}

/// Samples RSS on its own thread until [`finish`](Self::finish).
pub struct ResourceSampler {
    stop: Arc<AtomicBool>,
    peak: Arc<AtomicU64>,
    samples: Arc<AtomicU64>,
    cpu_start: CpuTimes,
    handle: Option<JoinHandle<()>>,
}

impl ResourceSampler {
    pub fn start(interval: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let peak = Arc::new(AtomicU64::new(current_rss_bytes().unwrap_or(0)));
        let samples = Arc::new(AtomicU64::new(1));
        let (s, p, n) = (stop.clone(), peak.clone(), samples.clone());
        let handle = std::thread::Builder::new()
            .name("rss-sampler".into())
            .spawn(move || {
                while !s.load(Ordering::Acquire) {
                    std::thread::park_timeout(interval);
                    if let Some(rss) = current_rss_bytes() {
                        p.fetch_max(rss, Ordering::AcqRel);
                        n.fetch_add(1, Ordering::Relaxed);
                    }
                }
            })
            .expect("spawn sampler");
        Self {
            stop,
            peak,
            samples,
            cpu_start: CpuTimes::now(),
            handle: Some(handle),
        }
    }

    pub fn finish(mut self) -> ResourceUsage {
        let cpu = CpuTimes::now().since(self.cpu_start);
        self.shutdown();
        if let Some(rss) = current_rss_bytes() {
            self.peak.fetch_max(rss, Ordering::AcqRel);
        }
        ResourceUsage {
            peak_rss_bytes: self.peak.load(Ordering::Acquire),
            cpu,
            samples: self.samples.load(Ordering::Relaxed),
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.handle.take() {
            h.thread().unpark();
            let _ = h.join();
        }
    }
}

impl Drop for ResourceSampler {
    fn drop(&mut self) {
        self.shutdown();
    }
}
