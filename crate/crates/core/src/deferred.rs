//! One-shot deferred completions.
//!
//! A [`Deferred`] is the non-blocking result of a stage invocation or an executor
//! submission. Whoever holds the matching [`Completer`] resolves it, possibly from
//! a different thread. Dropping a `Completer` without resolving it cancels the
//! deferred value.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

/// The completer went away without producing a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("deferred completion was cancelled")]
pub struct Cancelled;

type Callback<T> = Box<dyn FnOnce(Result<T, Cancelled>) + Send>;

enum State<T> {
    Pending(Option<Callback<T>>),
    Ready(Result<T, Cancelled>),
    Taken,
}

struct Shared<T> {
    state: Mutex<State<T>>,
    ready: Condvar,
}

impl<T> Shared<T> {
    fn resolve(&self, value: Result<T, Cancelled>) {
        let mut state = self.state.lock();
        match std::mem::replace(&mut *state, State::Taken) {
            State::Pending(Some(cb)) => {
                drop(state);
                cb(value);
            }
            State::Pending(None) => {
                *state = State::Ready(value);
                self.ready.notify_all();
            }
            // Already resolved; keep the first value.
            other => *state = other,
        }
    }
}

/// Creates a linked completer/deferred pair.
pub fn deferred<T>() -> (Completer<T>, Deferred<T>) {
    let shared = Arc::new(Shared {
        state: Mutex::new(State::Pending(None)),
        ready: Condvar::new(),
    });
    (
        Completer {
            shared: Some(shared.clone()),
        },
        Deferred { shared },
    )
}

/// Write side of a deferred completion.
pub struct Completer<T> {
    shared: Option<Arc<Shared<T>>>,
}

impl<T> Completer<T> {
    pub fn complete(mut self, value: T) {
        if let Some(shared) = self.shared.take() {
            shared.resolve(Ok(value));
        }
    }
}

impl<T> Drop for Completer<T> {
    fn drop(&mut self) {
        if let Some(shared) = self.shared.take() {
            shared.resolve(Err(Cancelled));
        }
    }
}

impl<T> fmt::Debug for Completer<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Completer").finish_non_exhaustive()
    }
}

/// Read side of a deferred completion.
pub struct Deferred<T> {
    shared: Arc<Shared<T>>,
}

impl<T: Send + 'static> Deferred<T> {
    /// An already resolved value.
    pub fn ready(value: T) -> Self {
        let (c, d) = deferred();
        c.complete(value);
        d
    }

    /// Runs `cb` exactly once with the outcome. If the value is already there,
    /// `cb` runs on the calling thread; otherwise on the completing thread.
    pub fn on_complete(self, cb: impl FnOnce(Result<T, Cancelled>) + Send + 'static) {
        let mut state = self.shared.state.lock();
        match std::mem::replace(&mut *state, State::Taken) {
            State::Ready(v) => {
                drop(state);
                cb(v);
            }
            State::Pending(_) => *state = State::Pending(Some(Box::new(cb))),
            State::Taken => {}
        }
    }

    /// Blocks until resolved.
    pub fn wait(self) -> Result<T, Cancelled> {
        let mut state = self.shared.state.lock();
        loop {
            match std::mem::replace(&mut *state, State::Taken) {
                State::Ready(v) => return v,
                pending @ State::Pending(_) => {
                    *state = pending;
                    self.shared.ready.wait(&mut state);
                }
                State::Taken => return Err(Cancelled),
            }
        }
    }

    /// Blocks until resolved or `timeout` elapses; on timeout the deferred is handed back.
    pub fn wait_timeout(self, timeout: Duration) -> Result<Result<T, Cancelled>, Self> {
        let deadline = Instant::now() + timeout;
        let mut state = self.shared.state.lock();
        loop {
            match std::mem::replace(&mut *state, State::Taken) {
                State::Ready(v) => return Ok(v),
                pending @ State::Pending(_) => {
                    *state = pending;
                    if self
                        .shared
                        .ready
                        .wait_until(&mut state, deadline)
                        .timed_out()
                    {
                        if let State::Ready(_) = &*state {
                            continue;
                        }
                        drop(state);
                        return Err(self);
                    }
                }
                State::Taken => return Ok(Err(Cancelled)),
            }
        }
    }

    pub fn is_ready(&self) -> bool {
        matches!(&*self.shared.state.lock(), State::Ready(_))
    }
}

impl<T> fmt::Debug for Deferred<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Deferred").finish_non_exhaustive()
    }
}
