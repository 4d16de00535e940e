//! End-to-end checks of the `selora` binary beyond the acceptance gate:
//! flag overrides land in the effective config, the report table agrees
//! with `rank_report.csv`, and sweep sub-runs are interchangeable with
//! individually launched runs.

use std::path::Path;
use std::process::Output;

use selora::adapter::ExpansionEvent;
use selora::harness::train::RunReport;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_selora")
}

fn run(args: &[&str]) -> Output {
    std::process::Command::new(bin())
        .args(args)
        .output()
        .expect("binary spawns")
}

fn base_config(lambda: &str, total_steps: u64, sweep: Option<&str>) -> String {
    let sweep_block = sweep
        .map(|s| format!(",\n  \"sweep\": {{ \"lambdas\": {s} }}"))
        .unwrap_or_default();
    format!(
        r#"{{
  "task": {{ "linear_teacher": {{
    "layer_dims": [[8, 8], [8, 8]],
    "true_ranks": [1, 3],
    "n_samples": 48
  }} }},
  "train": {{ "total_steps": {total_steps}, "eval_interval": 40 }},
  "policy": {{ "lambda": {lambda}, "test_interval": 20 }}{sweep_block}
}}"#
    )
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).expect("config writes");
    path.to_str().expect("utf-8 path").to_string()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref())
        .unwrap_or_else(|e| panic!("read {}: {e}", path.as_ref().display()))
}

#[test]
fn report_table_matches_rank_report_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &base_config("1.05", 200, None));
    let out_dir = tmp.path().join("run");
    let out_s = out_dir.to_str().unwrap();
    assert_eq!(run(&["run", "--config", &cfg, "--out", out_s]).status.code(), Some(0));

    let report = run(&["report", out_s]);
    assert_eq!(report.status.code(), Some(0));
    let stdout = String::from_utf8(report.stdout).unwrap();

    let csv = read(out_dir.join("rank_report.csv"));
    let mut csv_rows = csv.lines().skip(1);
    // Each CSV row appears in the table with identical field renderings.
    for row in csv_rows.by_ref() {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 4, "csv row {row}");
        let table_line = stdout
            .lines()
            .find(|l| l.split_whitespace().next() == Some(fields[0]))
            .unwrap_or_else(|| panic!("layer {} missing from report table", fields[0]));
        let cells: Vec<&str> = table_line.split_whitespace().collect();
        assert_eq!(cells, fields, "table row disagrees with csv row");
    }
    assert!(stdout.contains("total"), "report table has a totals line");
}

#[test]
fn seed_override_changes_run_and_lands_in_effective_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &base_config("1.1", 80, None));
    let base = tmp.path().join("base");
    let seeded = tmp.path().join("seeded");
    assert_eq!(
        run(&["run", "--config", &cfg, "--out", base.to_str().unwrap()]).status.code(),
        Some(0)
    );
    assert_eq!(
        run(&["run", "--config", &cfg, "--out", seeded.to_str().unwrap(), "--seed", "7"])
            .status
            .code(),
        Some(0)
    );
    let effective: serde_json::Value =
        serde_json::from_str(&read(seeded.join("effective_config.json"))).unwrap();
    assert_eq!(effective["train"]["seed"], serde_json::json!(7));
    assert_ne!(
        read(base.join("run.json")),
        read(seeded.join("run.json")),
        "a different seed must change the run"
    );
}

#[test]
fn ratio_orientation_flag_lands_in_effective_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &base_config("1.1", 80, None));
    let out_dir = tmp.path().join("run");
    let out = run(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--ratio-orientation",
        "paper-literal",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let effective: serde_json::Value =
        serde_json::from_str(&read(out_dir.join("effective_config.json"))).unwrap();
    assert_eq!(
        effective["policy"]["ratio_orientation"],
        serde_json::json!("paper-literal")
    );
    // The literal orientation scores orig/exp <= 1 < lambda, so nothing
    // can clear the threshold and the run stays at rank 1 throughout.
    let report: RunReport = serde_json::from_str(&read(out_dir.join("run.json"))).unwrap();
    assert!(report.expansion_events.is_empty());
    assert!(report.layers.iter().all(|l| l.final_rank == 1));
}

#[test]
fn report_notes_absence_of_expansions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &base_config("\"inf\"", 80, None));
    let out_dir = tmp.path().join("run");
    let out_s = out_dir.to_str().unwrap();
    assert_eq!(run(&["run", "--config", &cfg, "--out", out_s]).status.code(), Some(0));
    let report = run(&["report", out_s]);
    assert_eq!(report.status.code(), Some(0));
    let stdout = String::from_utf8(report.stdout).unwrap();
    assert!(
        stdout.contains("no expansions"),
        "zero-expansion report must say so, got:\n{stdout}"
    );
}

#[test]
fn events_jsonl_lines_parse_as_expansion_events() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &base_config("1.05", 200, None));
    let out_dir = tmp.path().join("run");
    assert_eq!(
        run(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]).status.code(),
        Some(0)
    );
    let report: RunReport = serde_json::from_str(&read(out_dir.join("run.json"))).unwrap();
    let lines: Vec<ExpansionEvent> = read(out_dir.join("events.jsonl"))
        .lines()
        .map(|l| serde_json::from_str(l).expect("event line parses"))
        .collect();
    assert!(!lines.is_empty(), "the low threshold should trigger expansions");
    assert_eq!(lines, report.expansion_events);
}

#[test]
fn sweep_runs_are_interchangeable_with_individual_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep_cfg = write_config(
        tmp.path(),
        "sweep.json",
        &base_config("1.1", 120, Some("[1.1, 2.0]")),
    );
    let sweep_dir = tmp.path().join("sweep");
    assert_eq!(
        run(&["sweep", "--config", &sweep_cfg, "--out", sweep_dir.to_str().unwrap()]).status.code(),
        Some(0)
    );
    let summary = read(sweep_dir.join("sweep_summary.csv"));
    assert_eq!(
        summary.lines().next(),
        Some("lambda,total_final_rank,final_eval_loss,param_count,seconds")
    );
    assert_eq!(summary.lines().count(), 3, "one row per lambda plus header");

    // Directory labels use the shortest f64 rendering, so 2.0 lands in
    // `lambda_2`.
    for (value, label) in [("1.1", "1.1"), ("2.0", "2")] {
        let single_cfg = write_config(
            tmp.path(),
            &format!("single_{label}.json"),
            &base_config(value, 120, None),
        );
        let single_dir = tmp.path().join(format!("single_{label}"));
        assert_eq!(
            run(&["run", "--config", &single_cfg, "--out", single_dir.to_str().unwrap()])
                .status
                .code(),
            Some(0)
        );
        let from_sweep = read(sweep_dir.join(format!("lambda_{label}")).join("run.json"));
        let individual = read(single_dir.join("run.json"));
        assert_eq!(from_sweep, individual, "lambda {label} sweep run differs");
    }
}

#[test]
fn parallel_sweep_matches_serial_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "sweep.json",
        &base_config("1.1", 120, Some("[1.05, 1.3, \"inf\"]")),
    );
    let serial = tmp.path().join("serial");
    let parallel = tmp.path().join("parallel");
    assert_eq!(
        run(&["sweep", "--config", &cfg, "--out", serial.to_str().unwrap()]).status.code(),
        Some(0)
    );
    assert_eq!(
        run(&["sweep", "--config", &cfg, "--out", parallel.to_str().unwrap(), "--jobs", "3"])
            .status
            .code(),
        Some(0)
    );
    for label in ["1.05", "1.3", "inf"] {
        assert_eq!(
            read(serial.join(format!("lambda_{label}")).join("run.json")),
            read(parallel.join(format!("lambda_{label}")).join("run.json")),
            "lambda {label} differs between serial and parallel sweeps"
        );
    }
}

#[test]
fn selftest_passes() {
    let out = run(&["selftest"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("selftest passed"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{ "task": { "linear_teacher": {} }, "trian": { "total_steps": 10 } }"#,
    );
    let out = run(&["run", "--config", &cfg, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("trian"), "error names the unknown key, got: {stderr}");
}
