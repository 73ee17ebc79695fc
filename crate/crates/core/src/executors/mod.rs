//! Execution backends that stages are bound to: the shared worker pool,
//! dedicated per-stage pools, and a pool of worker processes speaking a framed
//! byte protocol over stdin/stdout.

mod pool;
mod registry;
mod subprocess;
pub mod wire;
mod worker;

pub use pool::ThreadPool;
pub use registry::{decode_resize_args, RemoteFn, RemoteFunctionRegistry};
pub use subprocess::{
    PoolShutdown, RemoteError, StartError, SubprocessPool, SubprocessStats, WorkerCommand,
};
pub use wire::{Opcode, WireError, WireFrame};
pub use worker::{run_worker, EXIT_HANDSHAKE, EXIT_PROTOCOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum SubmitError {
    #[error("executor is shut down")]
    ShutDown,
}

/// Outcome of stopping a thread pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ShutdownStatus {
    pub joined: usize,
    /// Threads still running a task at the deadline.
    pub detached: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecutorKind {
    SharedPool,
    DedicatedPool { size: usize },
    SubprocessPool { size: usize, command: WorkerCommand },
}

/// Which backend runs a stage's tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutorBinding {
    pub kind: ExecutorKind,
    pub name: Option<String>,
}

impl Default for ExecutorBinding {
    fn default() -> Self {
        Self::shared()
    }
}

impl ExecutorBinding {
    pub fn shared() -> Self {
        Self {
            kind: ExecutorKind::SharedPool,
            name: None,
        }
    }

    pub fn dedicated(size: usize) -> Self {
        Self {
            kind: ExecutorKind::DedicatedPool { size },
            name: None,
        }
    }

    pub fn subprocess(size: usize, command: WorkerCommand) -> Self {
        Self {
            kind: ExecutorKind::SubprocessPool { size, command },
            name: None,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    /// Identifier used in stats.
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match &self.kind {
            ExecutorKind::SharedPool => "shared".to_string(),
            ExecutorKind::DedicatedPool { size } => format!("dedicated({size})"),
            ExecutorKind::SubprocessPool { size, .. } => format!("subprocess({size})"),
        }
    }

    pub(crate) fn size(&self) -> Option<usize> {
        match &self.kind {
            ExecutorKind::SharedPool => None,
            ExecutorKind::DedicatedPool { size } | ExecutorKind::SubprocessPool { size, .. } => {
                Some(*size)
            }
        }
    }
}
