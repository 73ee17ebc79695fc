//! Subprocess worker serving the builtin function registry over stdin/stdout.

use spindle::executors::{run_worker, RemoteFunctionRegistry};

fn main() {
    std::process::exit(run_worker(&RemoteFunctionRegistry::builtin()));
}
