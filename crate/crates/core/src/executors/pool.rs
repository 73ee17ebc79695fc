use std::panic::{catch_unwind, AssertUnwindSafe};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Sender};
use parking_lot::Mutex;

use super::{ShutdownStatus, SubmitError};
use crate::deferred::{deferred, Deferred};
use crate::threads::{join_until, ThreadTracker};

pub(crate) type Job = Box<dyn FnOnce() + Send + 'static>;

/// Fixed-size pool of worker threads fed from one unbounded job queue.
pub struct ThreadPool {
    name: String,
    size: usize,
    jobs: Mutex<Option<Sender<Job>>>,
    handles: Mutex<Vec<JoinHandle<()>>>,
    tracker: ThreadTracker,
}

impl ThreadPool {
    pub fn new(name: impl Into<String>, size: usize) -> Self {
        Self::with_tracker(name, size, ThreadTracker::default())
    }

    pub(crate) fn with_tracker(
        name: impl Into<String>,
        size: usize,
        tracker: ThreadTracker,
    ) -> Self {
        let name = name.into();
        let size = size.max(1);
        let (tx, rx) = unbounded::<Job>();
        let handles = (0..size)
            .map(|i| {
                let rx = rx.clone();
                tracker.spawn(format!("{name}-{i}"), move || {
                    for job in rx.iter() {
                        // A panicking job must not take the worker down.
                        let _ = catch_unwind(AssertUnwindSafe(job));
                    }
                })
            })
            .collect();
        Self {
            name,
            size,
            jobs: Mutex::new(Some(tx)),
            handles: Mutex::new(handles),
            tracker,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Live worker threads of this pool.
    pub fn live_threads(&self) -> usize {
        self.tracker.live()
    }

    pub(crate) fn execute(&self, job: Job) -> Result<(), SubmitError> {
        match &*self.jobs.lock() {
            Some(tx) => tx.send(job).map_err(|_| SubmitError::ShutDown),
            None => Err(SubmitError::ShutDown),
        }
    }

    /// Runs `f` on a worker and returns its deferred result.
    pub fn submit<F, R>(&self, f: F) -> Result<Deferred<R>, SubmitError>
    where
        F: FnOnce() -> R + Send + 'static,
        R: Send + 'static,
    {
        let (completer, result) = deferred();
        self.execute(Box::new(move || completer.complete(f())))?;
        Ok(result)
    }

    /// Stops accepting jobs, lets queued jobs finish and joins workers until
    /// `deadline`. Workers still busy after that are detached.
    pub fn shutdown(&self, deadline: Duration) -> ShutdownStatus {
        self.shutdown_until(Instant::now() + deadline)
    }

    pub(crate) fn shutdown_until(&self, deadline: Instant) -> ShutdownStatus {
        self.jobs.lock().take();
        let handles = std::mem::take(&mut *self.handles.lock());
        let mut status = ShutdownStatus::default();
        for h in handles {
            match join_until(h, deadline) {
                Some(_) => status.joined += 1,
                None => status.detached += 1,
            }
        }
        status
    }
}

impl Drop for ThreadPool {
    fn drop(&mut self) {
        // Idle workers exit once the queue closes; busy ones finish on their own.
        self.jobs.lock().take();
    }
}

impl std::fmt::Debug for ThreadPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThreadPool")
            .field("name", &self.name)
            .field("size", &self.size)
            .finish()
    }
}
