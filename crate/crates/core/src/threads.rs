use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

/// Counts the live background threads spawned on behalf of one owner.
#[derive(Debug, Clone, Default)]
pub struct ThreadTracker(Arc<AtomicUsize>);

struct LiveGuard(Arc<AtomicUsize>);

impl Drop for LiveGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::AcqRel);
    }
}

impl ThreadTracker {
    pub fn live(&self) -> usize {
        self.0.load(Ordering::Acquire)
    }

    pub(crate) fn spawn<F, R>(&self, name: String, f: F) -> JoinHandle<R>
    where
        F: FnOnce() -> R + Send + 'static,
        R: Send + 'static,
    {
        self.0.fetch_add(1, Ordering::AcqRel);
        let guard = LiveGuard(self.0.clone());
        std::thread::Builder::new()
            .name(name)
            .spawn(move || {
                let _guard = guard;
                f()
            })
            .expect("failed to spawn thread")
    }
}

/// Joins `handle` if it finishes before `deadline`; otherwise leaves it detached.
pub(crate) fn join_until<R>(
    handle: JoinHandle<R>,
    deadline: Instant,
) -> Option<std::thread::Result<R>> {
    while !handle.is_finished() {
        let now = Instant::now();
        if now >= deadline {
            return None;
        }
        std::thread::sleep((deadline - now).min(Duration::from_millis(1)));
    }
    Some(handle.join())
}
