use std::process::Command;

use dhash_harness::report::{read_csv, read_json};

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dhash-bench"))
}

const SMALL: [&str; 8] = [
    "--keys",
    "4096",
    "--buckets",
    "256",
    "--seconds",
    "0.2",
    "--load-factor",
    "2",
];

#[test]
fn csv_has_one_row_per_thread_plus_summary() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    let status = bench()
        .args(SMALL)
        .args(["--threads", "2", "--format", "csv", "--out"])
        .arg(&path)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{text}");
    assert!(rows.iter().filter(|r| r.starts_with("thread,")).count() == 2);
    assert!(rows.iter().any(|r| r.starts_with("summary,")));

    let report = read_csv(text.as_bytes()).unwrap();
    assert_eq!(report.threads.len(), 2);
    assert!(report.is_conserved());
    assert!(report.totals.total() > 0);
}

#[test]
fn json_and_csv_describe_the_same_run() {
    let out = |format: &str| {
        let o = bench()
            .args(SMALL)
            .args([
                "--threads",
                "2",
                "--seed",
                "7",
                "--rebuild",
                "continuous",
                "--format",
                format,
            ])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let j = read_json(&out("json")[..]).unwrap();
    let c = read_csv(&out("csv")[..]).unwrap();
    assert_eq!(j.config, c.config);
    assert_eq!(j.prefilled, c.prefilled);
    assert_eq!(j.threads.len(), c.threads.len());
    assert_eq!(j.config.rebuild.name(), "continuous");
}

#[test]
fn text_report_mentions_throughput() {
    let o = bench()
        .args(SMALL)
        .args(["--threads", "1"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Mops/s"), "{text}");
}

#[test]
fn bad_arguments_fail() {
    for args in [
        &["--mix", "50,50,50"][..],
        &["--threads", "0"],
        &["--buckets", "0"],
        &["--format", "xml"],
        &["--pin", "sideways"],
    ] {
        let o = bench().args(SMALL).args(args).output().unwrap();
        assert!(!o.status.success(), "{args:?} accepted");
    }
}

#[test]
fn rebuild_measurement_is_json() {
    let o = bench()
        .args([
            "--measure-rebuild",
            "1000,2000",
            "--reps",
            "2",
            "--threads",
            "1",
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let samples = v.as_array().unwrap();
    assert_eq!(samples.len(), 2);
    assert_eq!(samples[0]["seconds"].as_array().unwrap().len(), 2);
}

#[test]
fn micro_benchmark_reports_both_loops() {
    let o = bench()
        .args(["--micro-reclaim", "100000"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["enter_exit_ns"].as_f64().unwrap() > 0.0);
    assert!(v["baseline_ns"].as_f64().unwrap() > 0.0);
}
