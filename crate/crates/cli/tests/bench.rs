use std::path::Path;
use std::process::Command;
use std::time::Duration;

use spindle::netsim::{gen_corpus, FetchProfile};
use spindle::WorkerCommand;
use spindle_cli::{
    pipeline_outputs, run_baseline_sequential, run_benchmark, sequential_outputs, BenchConfig,
    ExecutorChoice, Runner, Workload,
};

const BIN: &str = env!("CARGO_BIN_EXE_bench");

fn runner() -> Runner {
    Runner::new(WorkerCommand::new(BIN).arg("worker"))
}

fn image_config(dir: &Path, n: usize) -> BenchConfig {
    let m = gen_corpus(dir.join("corpus"), n, 48, 40, 11).unwrap();
    BenchConfig {
        workload: Workload::Image,
        corpus: Some(m.manifest_path()),
        concurrency: vec![2],
        batch_size: 8,
        sample_count: n,
        out_width: 20,
        out_height: 16,
        repetitions: 1,
        ..BenchConfig::default()
    }
}

fn median_throughput(cfg: &BenchConfig, c: usize) -> f64 {
    let r = run_benchmark(
        &BenchConfig {
            concurrency: vec![c],
            ..cfg.clone()
        },
        &runner(),
    )
    .unwrap();
    let mut t: Vec<f64> = r.rows.iter().map(|r| r.throughput).collect();
    t.sort_by(f64::total_cmp);
    t[t.len() / 2]
}

#[test]
fn sleep_throughput_scales_with_concurrency() {
    let cfg = BenchConfig {
        workload: Workload::Sleep,
        sleep: Duration::from_millis(10),
        sample_count: 200,
        batch_size: 10,
        workers: 4,
        concurrency: vec![1, 2, 4],
        repetitions: 1,
        ..BenchConfig::default()
    };
    let r = run_benchmark(&cfg, &runner()).unwrap();
    let t: Vec<f64> = r.rows.iter().map(|r| r.throughput).collect();
    assert_eq!(
        r.rows.iter().map(|r| r.concurrency).collect::<Vec<_>>(),
        [1, 2, 4]
    );
    // Perfect overlap predicts 1:2:4.
    for (i, want) in [(1, 2.0), (2, 4.0)] {
        let ratio = t[i] / t[0];
        assert!(
            (ratio - want).abs() <= 0.3 * want,
            "ratio {ratio:.2} vs {want} ({t:?})"
        );
    }
    for row in &r.rows {
        assert_eq!(row.items, 200);
        let expect = row.items as f64 / (row.wall_us as f64 / 1e6);
        assert!((row.throughput - expect).abs() / expect < 1e-3);
        assert!(row.peak_rss_bytes > 0);
    }
}

#[test]
#[ignore = "needs a host with at least 4 physical cores"]
fn image_throughput_scales_on_multicore_hosts() {
    let d = tempfile::tempdir().unwrap();
    let m = gen_corpus(d.path().join("c"), 1000, 256, 256, 1).unwrap();
    let cfg = BenchConfig {
        workload: Workload::Image,
        corpus: Some(m.manifest_path()),
        sample_count: 1000,
        workers: 5,
        repetitions: 3,
        ..BenchConfig::default()
    };
    let (t1, t2, t4) = (
        median_throughput(&cfg, 1),
        median_throughput(&cfg, 2),
        median_throughput(&cfg, 4),
    );
    assert!(t2 >= t1 && t4 >= t2, "not monotone: {t1} {t2} {t4}");
    assert!(t4 >= 2.5 * t1, "x4 = {}", t4 / t1);
}

#[test]
fn sequential_sleep_takes_n_times_delay() {
    let cfg = BenchConfig {
        workload: Workload::Sleep,
        sleep: Duration::from_millis(10),
        sample_count: 100,
        batch_size: 10,
        ..BenchConfig::default()
    };
    let b = run_baseline_sequential(&cfg).unwrap();
    assert_eq!(b.sequential_items, 100);
    let wall = b.sequential_wall_us as f64 / 1e6;
    assert!((wall - 1.0).abs() <= 0.1, "{wall}s");
    assert_eq!(b.passthrough_items, 100);
    assert!(
        b.passthrough_overhead_us <= 200.0,
        "{}us per item",
        b.passthrough_overhead_us
    );
}

#[test]
fn sequential_and_pipelines_agree() {
    let d = tempfile::tempdir().unwrap();
    let cfg = image_config(d.path(), 37);
    let seq = sequential_outputs(&cfg).unwrap();
    assert_eq!(seq.len(), 32);
    assert!(seq.iter().all(|f| f.len() == 20 * 16 * 3));
    assert_eq!(
        pipeline_outputs(&cfg, &runner(), ExecutorChoice::Shared, 3).unwrap(),
        seq
    );
    assert_eq!(
        pipeline_outputs(&cfg, &runner(), ExecutorChoice::Dedicated, 2).unwrap(),
        seq
    );
    assert_eq!(
        pipeline_outputs(&cfg, &runner(), ExecutorChoice::Subprocess, 2).unwrap(),
        seq
    );
}

#[test]
fn fetch_failures_match_profile() {
    let d = tempfile::tempdir().unwrap();
    let profile = FetchProfile {
        base_latency: Duration::from_millis(2),
        failure_rate: 0.1,
        seed: 5,
        ..FetchProfile::default()
    };
    let cfg = BenchConfig {
        workload: Workload::FetchImage,
        fetch: profile.clone(),
        sample_count: 120,
        concurrency: vec![6],
        ..image_config(d.path(), 120)
    };
    let expected = (0..120).filter(|&o| profile.plan(o).fails).count() as u64;
    assert!(expected > 0);
    let r = run_benchmark(&cfg, &runner()).unwrap();
    let row = &r.rows[0];
    assert_eq!(row.failed, expected);
    assert_eq!(row.items + row.failed + row.dropped_remainder, 120);
    assert_eq!(row.stats.stage("fetch").unwrap().failed, expected);
}

#[test]
fn subprocess_first_batch_is_slower() {
    let d = tempfile::tempdir().unwrap();
    let cfg = BenchConfig {
        executors: vec![ExecutorChoice::Shared, ExecutorChoice::Subprocess],
        repetitions: 3,
        ..image_config(d.path(), 32)
    };
    let deltas = run_benchmark(&cfg, &runner()).unwrap().ttfb_deltas();
    assert_eq!(deltas.len(), 1);
    assert!(deltas[0].delta_us() > 0.0, "{:?}", deltas[0]);
}

fn bench(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn cli_corpus_run_report() {
    let d = tempfile::tempdir().unwrap();
    let out = bench(
        &[
            "corpus", "--n", "24", "--width", "16", "--height", "12", "--seed", "3", "--out", "c",
        ],
        d.path(),
    );
    assert!(out.status.success());
    std::fs::write(
        d.path().join("b.conf"),
        "workload = image\ncorpus = c/manifest.txt\nconcurrency = 1,2\nbatch_size = 8\n\
         sample_count = 24\nout_width = 8\nout_height = 6\nrepetitions = 2\n",
    )
    .unwrap();
    let out = bench(&["run", "--config", "b.conf", "--out", "r.json"], d.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("image"));

    assert!(bench(
        &["report", "--input", "r.json", "--format", "csv", "--out", "r.csv"],
        d.path()
    )
    .status
    .success());
    let csv = std::fs::read_to_string(d.path().join("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(bench(
        &["report", "--input", "r.json", "--format", "csv", "--out", "r2.csv"],
        d.path()
    )
    .status
    .success());
    assert_eq!(
        std::fs::read(d.path().join("r2.csv")).unwrap(),
        csv.as_bytes()
    );

    let json: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path().join("r.json")).unwrap()).unwrap();
    let keys: Vec<(String, u64, u64)> = json
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            (
                r["workload"].as_str().unwrap().into(),
                r["concurrency"].as_u64().unwrap(),
                r["repetition"].as_u64().unwrap(),
            )
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

#[test]
fn cli_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("bad.conf"),
        "batch_size = 32\nsample_count = 31\n",
    )
    .unwrap();
    let out = bench(&["run", "--config", "bad.conf"], d.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sample_count"));
    assert_eq!(bench(&["run"], d.path()).status.code(), Some(2));
    assert_eq!(bench(&["frobnicate"], d.path()).status.code(), Some(2));
    assert_eq!(
        bench(
            &["report", "--input", "x.json", "--format", "xml", "--out", "o"],
            d.path()
        )
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        bench(&["corpus", "--n", "0", "--out", "c"], d.path())
            .status
            .code(),
        Some(2)
    );

    std::fs::write(
        d.path().join("nc.conf"),
        "workload = image\ncorpus = missing/manifest.txt\n",
    )
    .unwrap();
    assert_eq!(
        bench(&["run", "--config", "nc.conf"], d.path())
            .status
            .code(),
        Some(3)
    );
    assert_eq!(
        bench(
            &[
                "report",
                "--input",
                "missing.json",
                "--format",
                "csv",
                "--out",
                "o"
            ],
            d.path()
        )
        .status
        .code(),
        Some(3)
    );
}

#[test]
fn trace_lines_on_stderr() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("s.conf"),
        "workload = sleep\nsleep_ms = 1\nsample_count = 4\nbatch_size = 2\nconcurrency = 2\nrepetitions = 1\n",
    )
    .unwrap();
    let out = Command::new(BIN)
        .args(["run", "--config", "s.conf"])
        .current_dir(d.path())
        .env("SPINDLE_TRACE", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err
        .lines()
        .filter(|l| l.starts_with("stage=sleep "))
        .collect();
    for event in ["start", "ok", "eos"] {
        assert!(
            lines.iter().any(|l| l.contains(&format!("event={event} "))),
            "{event}: {err}"
        );
    }
    assert_eq!(lines.iter().filter(|l| l.contains("event=ok ")).count(), 4);
    assert!(lines
        .iter()
        .all(|l| l.contains("item_seq=") && l.contains("dur_us=")));

    let quiet = Command::new(BIN)
        .args(["run", "--config", "s.conf"])
        .current_dir(d.path())
        .env_remove("SPINDLE_TRACE")
        .output()
        .unwrap();
    assert!(!String::from_utf8_lossy(&quiet.stderr).contains("stage="));
}
