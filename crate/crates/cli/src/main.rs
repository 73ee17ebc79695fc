use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spindle::executors::run_worker;
use spindle::netsim::gen_corpus;
use spindle::RemoteFunctionRegistry;
use spindle_cli::report::Format;
use spindle_cli::{
    emit_report, run_baseline_sequential, run_benchmark, BenchConfig, BenchReport, RunError, Runner,
};

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "bench", about = "Pipeline benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "json")]
        format: Format,
        /// Also measure the sequential loop and a no-op pipeline.
        #[arg(long)]
        baseline: bool,
    },
    /// Generate a deterministic PPM corpus.
    Corpus {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        width: u32,
        #[arg(long, default_value_t = 256)]
        height: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a JSON report to CSV or JSON.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(hide = true)]
    Worker,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("bench: {msg}");
    ExitCode::from(code)
}

fn print_summary(report: &BenchReport) {
    println!(
        "{:<12} {:<11} {:>4} {:>12} {:>12} {:>12} {:>10}",
        "workload", "executor", "c", "tput_min", "tput_med", "tput_max", "ttfb_ms"
    );
    for s in report.summarize() {
        let t = s.throughput.expect("one row per group");
        let ttfb = s
            .ttfb_us
            .map(|t| format!("{:.1}", t.median / 1e3))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<12} {:<11} {:>4} {:>12.1} {:>12.1} {:>12.1} {:>10}",
            s.workload, s.executor, s.concurrency, t.min, t.median, t.max, ttfb
        );
    }
    for d in report.ttfb_deltas() {
        println!(
            "ttfb delta {} c={}: subprocess {:.1}ms vs shared {:.1}ms ({:+.1}ms)",
            d.workload,
            d.concurrency,
            d.subprocess_us / 1e3,
            d.shared_us / 1e3,
            d.delta_us() / 1e3
        );
    }
}

fn run(config: PathBuf, out: Option<PathBuf>, format: Format, baseline: bool) -> ExitCode {
    let cfg = match BenchConfig::load(&config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let runner = match Runner::self_hosted() {
        Ok(r) => r,
        Err(e) => return fail(EXIT_RUNTIME, e),
    };
    let report = match run_benchmark(&cfg, &runner) {
        Ok(r) => r,
        Err(RunError::Config(e)) => return fail(EXIT_USAGE, e),
        Err(e) => return fail(EXIT_RUNTIME, e),
    };
    print_summary(&report);
    if baseline {
        match run_baseline_sequential(&cfg) {
            Ok(b) => println!(
                "baseline: sequential {:.1}/s over {} items, no-op pipeline {:.1}us/item",
                b.sequential_throughput, b.sequential_items, b.passthrough_overhead_us
            ),
            Err(e) => return fail(EXIT_RUNTIME, e),
        }
    }
    if let Some(path) = out {
        if let Err(e) = emit_report(&report, format, &path) {
            return fail(EXIT_RUNTIME, format_args!("{}: {e}", path.display()));
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match cli.command {
        Command::Run {
            config,
            out,
            format,
            baseline,
        } => run(config, out, format, baseline),
        Command::Corpus {
            n,
            width,
            height,
            seed,
            out,
        } => match gen_corpus(&out, n, width, height, seed) {
            Ok(m) => {
                println!("{}", m.manifest_path().display());
                ExitCode::SUCCESS
            }
            Err(
                e @ (spindle::netsim::CorpusError::Empty
                | spindle::netsim::CorpusError::ZeroDimension(..)),
            ) => fail(EXIT_USAGE, e),
            Err(e) => fail(EXIT_RUNTIME, e),
        },
        Command::Report { input, format, out } => {
            let text = match std::fs::read_to_string(&input) {
                Ok(t) => t,
                Err(e) => return fail(EXIT_RUNTIME, format_args!("{}: {e}", input.display())),
            };
            let report = match BenchReport::from_json(&text) {
                Ok(r) => r,
                Err(e) => return fail(EXIT_USAGE, format_args!("{}: {e}", input.display())),
            };
            match emit_report(&report, format, &out) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => fail(EXIT_RUNTIME, format_args!("{}: {e}", out.display())),
            }
        }
        Command::Worker => ExitCode::from(run_worker(&RemoteFunctionRegistry::builtin()) as u8),
    }
}
