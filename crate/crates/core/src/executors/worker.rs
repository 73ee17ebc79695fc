use std::io::{self, BufReader, BufWriter};
use std::panic::{catch_unwind, AssertUnwindSafe};

use super::registry::{unknown_function, RemoteFunctionRegistry};
use super::wire::{
    decode_call, handshake_payload, parse_handshake, read_frame, write_frame, Opcode, WireFrame,
    HANDSHAKE_FN, PROTOCOL_VERSION,
};

/// Exit code after a handshake mismatch.
pub const EXIT_HANDSHAKE: i32 = 2;
/// Exit code after a protocol violation.
pub const EXIT_PROTOCOL: i32 = 3;

/// Serves `registry` over stdin/stdout until shutdown or end of input.
/// Returns the process exit code.
pub fn run_worker(registry: &RemoteFunctionRegistry) -> i32 {
    let stdin = io::stdin();
    let stdout = io::stdout();
    serve(
        registry,
        &mut BufReader::new(stdin.lock()),
        &mut BufWriter::new(stdout.lock()),
    )
}

pub(crate) fn serve(
    registry: &RemoteFunctionRegistry,
    input: &mut impl io::Read,
    output: &mut impl io::Write,
) -> i32 {
    let digest = registry.digest();
    loop {
        let frame = match read_frame(input) {
            Ok(Some(f)) => f,
            Ok(None) => return 0,
            Err(e) => {
                eprintln!("spindle-worker: {e}");
                return EXIT_PROTOCOL;
            }
        };
        let reply = match frame.opcode {
            Opcode::Shutdown => return 0,
            Opcode::Call => match decode_call(&frame.payload) {
                Ok((HANDSHAKE_FN, args)) => {
                    if parse_handshake(args) != Some((PROTOCOL_VERSION, digest)) {
                        let _ = write_frame(
                            output,
                            &WireFrame::new(
                                Opcode::Error,
                                frame.task_id,
                                b"handshake mismatch".to_vec(),
                            ),
                        );
                        return EXIT_HANDSHAKE;
                    }
                    WireFrame::new(Opcode::Result, frame.task_id, handshake_payload(&digest))
                }
                Ok((name, args)) => match registry.get(name) {
                    Some(f) => match catch_unwind(AssertUnwindSafe(|| f(args))) {
                        Ok(Ok(out)) => WireFrame::new(Opcode::Result, frame.task_id, out),
                        Ok(Err(msg)) => {
                            WireFrame::new(Opcode::Error, frame.task_id, msg.into_bytes())
                        }
                        Err(_) => WireFrame::new(
                            Opcode::Error,
                            frame.task_id,
                            format!("function '{name}' panicked").into_bytes(),
                        ),
                    },
                    None => WireFrame::new(
                        Opcode::Error,
                        frame.task_id,
                        unknown_function(name).into_bytes(),
                    ),
                },
                Err(e) => WireFrame::new(Opcode::Error, frame.task_id, e.to_string().into_bytes()),
            },
            Opcode::Result | Opcode::Error => {
                eprintln!("spindle-worker: unexpected {:?} frame", frame.opcode);
                return EXIT_PROTOCOL;
            }
        };
        if write_frame(output, &reply).is_err() {
            return 0;
        }
    }
}
