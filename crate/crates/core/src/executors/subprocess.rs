use std::ffi::OsString;
use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};
use parking_lot::Mutex;

use super::registry::RemoteFunctionRegistry;
use super::wire::{
    encode_call_frame, handshake_payload, parse_handshake, read_frame, write_frame, Opcode,
    WireFrame, HANDSHAKE_FN, PROTOCOL_VERSION,
};
use super::SubmitError;
use crate::deferred::{deferred, Completer, Deferred};
use crate::threads::{join_until, ThreadTracker};

/// How to launch one worker process. The process must speak the frame
/// protocol on stdin/stdout, e.g. via [`run_worker`](super::run_worker).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerCommand {
    pub program: PathBuf,
    pub args: Vec<OsString>,
}

impl WorkerCommand {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self {
            program: program.into(),
            args: Vec::new(),
        }
    }

    pub fn arg(mut self, arg: impl Into<OsString>) -> Self {
        self.args.push(arg.into());
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error("failed to spawn worker: {0}")]
    Spawn(#[source] io::Error),
    #[error("worker {worker} handshake failed: {reason}")]
    Handshake { worker: usize, reason: String },
    #[error("worker {worker} registry digest or protocol version mismatch")]
    DigestMismatch { worker: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RemoteError {
    #[error("{0}")]
    Remote(String),
    #[error("worker crashed: {0}")]
    WorkerCrashed(String),
    #[error("call cancelled before completion")]
    Cancelled,
    #[error("submission rejected: {0}")]
    Submit(#[from] SubmitError),
}

/// Result of [`SubprocessPool::shutdown`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PoolShutdown {
    /// Exit code per worker slot; `None` when killed by a signal.
    pub exit_codes: Vec<Option<i32>>,
    /// Workers killed after the deadline.
    pub killed: usize,
}

impl PoolShutdown {
    pub fn all_clean(&self) -> bool {
        self.killed == 0 && self.exit_codes.iter().all(|c| *c == Some(0))
    }
}

#[derive(Debug, Default)]
struct Counters {
    payload_serializations: AtomicU64,
    result_serializations: AtomicU64,
    crashes: AtomicU64,
    respawns: AtomicU64,
}

/// Snapshot of the IPC counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SubprocessStats {
    /// Call frames encoded in the parent.
    pub payload_serializations: u64,
    /// Result or error frames decoded in the parent.
    pub result_serializations: u64,
    pub crashes: u64,
    pub respawns: u64,
}

struct Request {
    task_id: u64,
    frame: Vec<u8>,
    completer: Completer<Result<Vec<u8>, RemoteError>>,
}

struct Pipe {
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

struct Shared {
    command: WorkerCommand,
    digest: [u8; 32],
    children: Vec<Mutex<Option<Child>>>,
    shutting_down: AtomicBool,
    counters: Counters,
}

/// Pool of worker processes running registered functions.
///
/// Each worker is driven by one parent thread that writes a call frame and
/// waits for the reply, so a slow call never occupies a thread of the shared
/// worker pool. A crashed worker fails its in-flight call (no retry) and is
/// respawned.
pub struct SubprocessPool {
    shared: Arc<Shared>,
    requests: Mutex<Option<Sender<Request>>>,
    drivers: Mutex<Vec<JoinHandle<()>>>,
    next_task: AtomicU64,
    startup: Duration,
    tracker: ThreadTracker,
    shutdown: Mutex<Option<PoolShutdown>>,
}

fn spawn_worker(command: &WorkerCommand) -> io::Result<(Child, Pipe)> {
    let mut child = Command::new(&command.program)
        .args(&command.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()?;
    let pipe = Pipe {
        stdin: child.stdin.take().expect("piped stdin"),
        stdout: BufReader::new(child.stdout.take().expect("piped stdout")),
    };
    Ok((child, pipe))
}

fn send_handshake(pipe: &mut Pipe, digest: &[u8; 32]) -> io::Result<()> {
    let frame = encode_call_frame(0, HANDSHAKE_FN, &handshake_payload(digest));
    io::Write::write_all(&mut pipe.stdin, &frame)?;
    io::Write::flush(&mut pipe.stdin)
}

fn finish_handshake(pipe: &mut Pipe, digest: &[u8; 32], worker: usize) -> Result<(), StartError> {
    let reply = read_frame(&mut pipe.stdout).map_err(|e| StartError::Handshake {
        worker,
        reason: e.to_string(),
    })?;
    match reply {
        Some(f) if f.opcode == Opcode::Result => match parse_handshake(&f.payload) {
            Some((PROTOCOL_VERSION, d)) if &d == digest => Ok(()),
            _ => Err(StartError::DigestMismatch { worker }),
        },
        Some(f) if f.opcode == Opcode::Error => Err(StartError::DigestMismatch { worker }),
        Some(f) => Err(StartError::Handshake {
            worker,
            reason: format!("unexpected {:?} frame", f.opcode),
        }),
        None => Err(StartError::Handshake {
            worker,
            reason: "worker closed its output".to_string(),
        }),
    }
}

impl SubprocessPool {
    /// Launches `size` workers concurrently, then completes every handshake.
    pub fn start(
        size: usize,
        command: WorkerCommand,
        registry: &RemoteFunctionRegistry,
    ) -> Result<Self, StartError> {
        Self::start_tracked(size, command, registry.digest(), ThreadTracker::default())
    }

    pub(crate) fn start_tracked(
        size: usize,
        command: WorkerCommand,
        digest: [u8; 32],
        tracker: ThreadTracker,
    ) -> Result<Self, StartError> {
        let began = Instant::now();
        let size = size.max(1);
        let mut children = Vec::with_capacity(size);
        let mut pipes = Vec::with_capacity(size);
        let kill_all = |children: &mut Vec<Child>| {
            for c in children.iter_mut() {
                let _ = c.kill();
                let _ = c.wait();
            }
        };
        for _ in 0..size {
            match spawn_worker(&command) {
                Ok((child, pipe)) => {
                    children.push(child);
                    pipes.push(pipe);
                }
                Err(e) => {
                    kill_all(&mut children);
                    return Err(StartError::Spawn(e));
                }
            }
        }
        // All processes are already booting; handshakes overlap with their startup.
        let mut result = Ok(());
        for (i, pipe) in pipes.iter_mut().enumerate() {
            if let Err(e) = send_handshake(pipe, &digest) {
                result = Err(StartError::Handshake {
                    worker: i,
                    reason: e.to_string(),
                });
                break;
            }
        }
        if result.is_ok() {
            for (i, pipe) in pipes.iter_mut().enumerate() {
                if let Err(e) = finish_handshake(pipe, &digest, i) {
                    result = Err(e);
                    break;
                }
            }
        }
        if let Err(e) = result {
            drop(pipes);
            kill_all(&mut children);
            return Err(e);
        }

        let shared = Arc::new(Shared {
            command,
            digest,
            children: children.into_iter().map(|c| Mutex::new(Some(c))).collect(),
            shutting_down: AtomicBool::new(false),
            counters: Counters::default(),
        });
        let (tx, rx) = unbounded();
        let drivers = pipes
            .into_iter()
            .enumerate()
            .map(|(i, pipe)| {
                let shared = shared.clone();
                let rx = rx.clone();
                tracker.spawn(format!("spindle-subproc-{i}"), move || {
                    drive(i, pipe, rx, shared)
                })
            })
            .collect();
        Ok(Self {
            shared,
            requests: Mutex::new(Some(tx)),
            drivers: Mutex::new(drivers),
            next_task: AtomicU64::new(1),
            startup: began.elapsed(),
            tracker,
            shutdown: Mutex::new(None),
        })
    }

    pub fn size(&self) -> usize {
        self.shared.children.len()
    }

    /// Wall time `start` took, handshakes included.
    pub fn startup_time(&self) -> Duration {
        self.startup
    }

    pub fn stats(&self) -> SubprocessStats {
        let c = &self.shared.counters;
        SubprocessStats {
            payload_serializations: c.payload_serializations.load(Ordering::Acquire),
            result_serializations: c.result_serializations.load(Ordering::Acquire),
            crashes: c.crashes.load(Ordering::Acquire),
            respawns: c.respawns.load(Ordering::Acquire),
        }
    }

    /// Process ids of the current workers.
    pub fn worker_pids(&self) -> Vec<Option<u32>> {
        self.shared
            .children
            .iter()
            .map(|c| c.lock().as_ref().map(Child::id))
            .collect()
    }

    /// Queues a call; the payload is serialized exactly once, here.
    pub fn submit(
        &self,
        func: &str,
        args: &[u8],
    ) -> Result<Deferred<Result<Vec<u8>, RemoteError>>, SubmitError> {
        let guard = self.requests.lock();
        let tx = guard.as_ref().ok_or(SubmitError::ShutDown)?;
        let task_id = self.next_task.fetch_add(1, Ordering::Relaxed);
        let frame = encode_call_frame(task_id, func, args);
        self.shared
            .counters
            .payload_serializations
            .fetch_add(1, Ordering::AcqRel);
        let (completer, result) = deferred();
        tx.send(Request {
            task_id,
            frame,
            completer,
        })
        .map_err(|_| SubmitError::ShutDown)?;
        Ok(result)
    }

    /// Blocking call.
    pub fn remote_call(&self, func: &str, args: &[u8]) -> Result<Vec<u8>, RemoteError> {
        self.submit(func, args)?
            .wait()
            .unwrap_or(Err(RemoteError::Cancelled))
    }

    /// Sends shutdown to every worker, waits until `deadline` for them to exit
    /// and kills the rest. Idempotent.
    pub fn shutdown(&self, deadline: Duration) -> PoolShutdown {
        let mut done = self.shutdown.lock();
        if let Some(s) = &*done {
            return s.clone();
        }
        let deadline = Instant::now() + deadline;
        self.shared.shutting_down.store(true, Ordering::Release);
        self.requests.lock().take();

        let n = self.shared.children.len();
        let mut codes: Vec<Option<Option<i32>>> = vec![None; n];
        let mut killed = 0;
        loop {
            for (i, slot) in self.shared.children.iter().enumerate() {
                if codes[i].is_some() {
                    continue;
                }
                let mut slot = slot.lock();
                match slot.as_mut().map(Child::try_wait) {
                    Some(Ok(Some(status))) => {
                        codes[i] = Some(status.code());
                        *slot = None;
                    }
                    Some(Ok(None)) => {}
                    Some(Err(_)) | None => codes[i] = Some(None),
                }
            }
            if codes.iter().all(Option::is_some) {
                break;
            }
            if Instant::now() >= deadline {
                for (i, slot) in self.shared.children.iter().enumerate() {
                    if codes[i].is_none() {
                        if let Some(mut child) = slot.lock().take() {
                            let _ = child.kill();
                            codes[i] = Some(child.wait().ok().and_then(|s| s.code()));
                            killed += 1;
                        }
                    }
                }
                break;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        // Killing the stragglers unblocks their drivers.
        let grace = Instant::now() + Duration::from_secs(1);
        for h in std::mem::take(&mut *self.drivers.lock()) {
            join_until(h, grace);
        }
        let status = PoolShutdown {
            exit_codes: codes.into_iter().map(|c| c.flatten()).collect(),
            killed,
        };
        *done = Some(status.clone());
        status
    }

    /// Live driver threads, one per worker process.
    pub fn live_threads(&self) -> usize {
        self.tracker.live()
    }
}

impl Drop for SubprocessPool {
    fn drop(&mut self) {
        self.shutdown(Duration::from_millis(500));
    }
}

impl std::fmt::Debug for SubprocessPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubprocessPool")
            .field("command", &self.shared.command)
            .field("size", &self.size())
            .finish()
    }
}

fn exchange(pipe: &mut Pipe, req: &Request) -> Result<WireFrame, String> {
    io::Write::write_all(&mut pipe.stdin, &req.frame).map_err(|e| e.to_string())?;
    io::Write::flush(&mut pipe.stdin).map_err(|e| e.to_string())?;
    match read_frame(&mut pipe.stdout) {
        Ok(Some(f)) if f.task_id == req.task_id => Ok(f),
        Ok(Some(f)) => Err(format!(
            "reply for task {} while waiting for {}",
            f.task_id, req.task_id
        )),
        Ok(None) => Err("worker exited".to_string()),
        Err(e) => Err(e.to_string()),
    }
}

fn respawn(slot: usize, shared: &Shared) -> Option<Pipe> {
    let (child, mut pipe) = spawn_worker(&shared.command).ok()?;
    *shared.children[slot].lock() = Some(child);
    send_handshake(&mut pipe, &shared.digest).ok()?;
    finish_handshake(&mut pipe, &shared.digest, slot).ok()?;
    shared.counters.respawns.fetch_add(1, Ordering::AcqRel);
    Some(pipe)
}

fn reap(slot: usize, shared: &Shared) {
    if let Some(mut child) = shared.children[slot].lock().take() {
        let _ = child.kill();
        let _ = child.wait();
    }
}

fn drive(slot: usize, pipe: Pipe, requests: Receiver<Request>, shared: Arc<Shared>) {
    let mut pipe = Some(pipe);
    for req in requests.iter() {
        let stopping = shared.shutting_down.load(Ordering::Acquire);
        if pipe.is_none() && !stopping {
            pipe = respawn(slot, &shared);
        }
        let Some(p) = pipe.as_mut() else {
            req.completer.complete(Err(RemoteError::WorkerCrashed(
                "worker unavailable".to_string(),
            )));
            continue;
        };
        match exchange(p, &req) {
            Ok(frame) => {
                shared
                    .counters
                    .result_serializations
                    .fetch_add(1, Ordering::AcqRel);
                let out = match frame.opcode {
                    Opcode::Result => Ok(frame.payload),
                    Opcode::Error => Err(RemoteError::Remote(
                        String::from_utf8_lossy(&frame.payload).into_owned(),
                    )),
                    other => Err(RemoteError::WorkerCrashed(format!(
                        "unexpected {other:?} frame"
                    ))),
                };
                req.completer.complete(out);
            }
            Err(reason) => {
                shared.counters.crashes.fetch_add(1, Ordering::AcqRel);
                req.completer
                    .complete(Err(RemoteError::WorkerCrashed(reason)));
                pipe = None;
                if !shared.shutting_down.load(Ordering::Acquire) {
                    reap(slot, &shared);
                    pipe = respawn(slot, &shared);
                }
            }
        }
    }
    if let Some(mut p) = pipe {
        let _ = write_frame(&mut p.stdin, &WireFrame::shutdown());
    }
}
