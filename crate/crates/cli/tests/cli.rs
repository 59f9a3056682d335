use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use netsched_core::{Checkpoint, CsTable, Trace};

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netsched"))
        .args(args)
        .current_dir(dir)
        .env_remove("NETSCHED_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap().trim().to_string()
}

fn code(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = run_in(dir, args);
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Small trace plus a tiny checkpoint trained on it.
fn trained(dir: &Path, branch: &str) -> (String, String) {
    let trace = ok(
        dir,
        &["gen-trace", "--jobs", "10", "--sets", "2", "--seed", "1"],
    );
    let ck = ok(
        dir,
        &[
            "train",
            "--trace",
            &trace,
            "--branch",
            branch,
            "--episodes",
            "1",
            "--hidden",
            "8",
        ],
    );
    (trace, ck)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn heavy_mix_is_two_thirds_fsdp_and_moe() {
    let dir = tempfile::tempdir().unwrap();
    let path = ok(
        dir.path(),
        &[
            "gen-trace",
            "--mix",
            "heavy",
            "--jobs",
            "256",
            "--seed",
            "7",
        ],
    );
    let trace = Trace::load(dir.path().join(path)).unwrap();
    let jobs: Vec<_> = trace.sets.iter().flatten().collect();
    let heavy = jobs
        .iter()
        .filter(|j| matches!(j.model_class.name(), "FSDP" | "MoE"))
        .count() as f64;
    let n = jobs.len() as f64;
    let se = (2.0 / 9.0 / n).sqrt();
    assert!((heavy / n - 2.0 / 3.0).abs() < 4.0 * se, "{heavy}/{n}");
}

#[test]
fn gen_trace_is_repeatable_and_stamped() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "gen-trace",
        "--mix",
        "medium",
        "--jobs",
        "20",
        "--seed",
        "3",
        "--out",
        "t.trace",
    ];
    ok(dir.path(), &args);
    let first = std::fs::read(dir.path().join("t.trace")).unwrap();
    ok(dir.path(), &args);
    assert_eq!(first, std::fs::read(dir.path().join("t.trace")).unwrap());
    let text = String::from_utf8(first).unwrap();
    let second = text.lines().nth(1).unwrap();
    assert!(second.starts_with("# provenance ") && second.contains("\"seed\":3"));
}

#[test]
fn bad_trace_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["gen-trace", "--jobs", "0"]).0, 2);
    let (c, err) = code(dir.path(), &["gen-trace", "--mix", "bursty"]);
    assert_eq!(c, 2);
    for name in ["normal", "heavy", "medium", "low"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn branch_and_w1_set_the_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (trace, ck) = trained(dir.path(), "E");
    let meta = Checkpoint::load(dir.path().join(ck)).unwrap().meta;
    assert_eq!((meta.weights.w1(), meta.weights.w2()), (0.7, 1.0 - 0.7));
    let ck = ok(
        dir.path(),
        &[
            "train",
            "--trace",
            &trace,
            "--w1",
            "0.4",
            "--episodes",
            "1",
            "--hidden",
            "8",
        ],
    );
    let w = Checkpoint::load(dir.path().join(ck)).unwrap().meta.weights;
    assert_eq!((w.w1(), w.w2()), (0.4, 0.6));
    assert_eq!(code(dir.path(), &["train", "--w1", "1.5"]).0, 2);
    assert_eq!(
        code(dir.path(), &["train", "--w1", "0.4", "--w2", "0.5"]).0,
        2
    );
    assert_eq!(code(dir.path(), &["train", "--branch", "F"]).0, 2);
}

#[test]
fn train_writes_checkpoint_curve_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = trained(dir.path(), "B");
    let ck = PathBuf::from(ck);
    let curve = ck.with_extension("curve.csv");
    assert_eq!(csv_rows(&dir.path().join(&curve)).len(), 1);
    let stem = ck.file_stem().unwrap().to_string_lossy().into_owned();
    let manifest = dir
        .path()
        .join("netsched-out/reports")
        .join(format!("train-{stem}"))
        .join("manifest.json");
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(manifest).unwrap()).unwrap();
    assert_eq!(doc["files"].as_array().unwrap().len(), 2);
    assert_eq!(doc["provenance"]["command"], "train");
}

#[test]
fn rl_eval_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(dir.path(), &["eval", "--policy", "rl-base", "--jobs", "4"]).0,
        2
    );
    let (c, _) = code(
        dir.path(),
        &[
            "eval",
            "--policy",
            "rl-hybrid",
            "--checkpoint",
            "missing.json",
            "--jobs",
            "4",
        ],
    );
    assert_eq!(c, 3);
}

#[test]
fn empty_trace_gives_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("empty.trace"),
        "#netsched-trace v1 mix=normal ratios=1:1:1:1:1:1 jobs=0 sets=1 seed=0 arrivals=all-at-zero isolated_runtime=3600 time_scale=0.016666666666666666 jitter=0.2 max_demand=32\n",
    )
    .unwrap();
    let out = ok(
        dir.path(),
        &["eval", "--policy", "fifo-greedy", "--trace", "empty.trace"],
    );
    let report = PathBuf::from(out);
    let summary: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.path().join(&report).join("summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["sets"][0]["num_jobs"], 0);
    assert!(csv_rows(&dir.path().join(report).join("set-00-jobs.csv")).is_empty());
}

#[test]
fn no_contention_forces_unit_cs_and_eval_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "eval",
        "--policy",
        "las",
        "--jobs",
        "24",
        "--sets",
        "2",
        "--no-contention",
        "--id",
        "x",
    ];
    let report = dir.path().join(ok(dir.path(), &args));
    let rows = csv_rows(&report.join("set-01-jobs.csv"));
    assert_eq!(rows.len(), 24);
    assert!(rows.iter().all(|r| r[9] == "1"), "{rows:?}");
    let first = std::fs::read(report.join("summary.json")).unwrap();
    ok(dir.path(), &args);
    assert_eq!(first, std::fs::read(report.join("summary.json")).unwrap());
}

#[test]
fn dump_tensor_writes_one_grid_per_feature() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "eval",
        "--policy",
        "srtf",
        "--jobs",
        "6",
        "--sets",
        "1",
        "--dump-tensor",
    ];
    let report = dir.path().join(ok(dir.path(), &args));
    let text = std::fs::read_to_string(report.join("tensor.csv")).unwrap();
    assert_eq!(
        text.lines().filter(|l| l.starts_with("# feature")).count(),
        10
    );
    let grid_rows = text.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(grid_rows, 10 * 4);
}

#[test]
fn compare_needs_two_policies_and_an_existing_trace() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(dir.path(), &["compare", "--policies", "las"]).0, 2);
    let (c, _) = code(
        dir.path(),
        &[
            "compare",
            "--policies",
            "las,srtf",
            "--trace",
            "nowhere.trace",
        ],
    );
    assert_eq!(c, 3);
    assert_eq!(
        code(
            dir.path(),
            &["compare", "--policies", "las,rl-base", "--jobs", "4"]
        )
        .0,
        2
    );
}

#[test]
fn self_comparison_has_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join(ok(
        dir.path(),
        &[
            "compare",
            "--policies",
            "srtf,srtf",
            "--jobs",
            "12",
            "--sets",
            "2",
        ],
    ));
    let rows = csv_rows(&report.join("deltas.csv"));
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r[2..].iter().all(|v| v == "0"), "{r:?}");
    }
    for f in [
        "jct_cdf.csv",
        "utilization_hist.csv",
        "cs_distribution.csv",
        "aggregates.csv",
    ] {
        assert!(!csv_rows(&report.join(f)).is_empty(), "{f}");
    }
}

#[test]
fn five_branches_give_five_scatter_points_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let trace = ok(
        dir.path(),
        &["gen-trace", "--jobs", "8", "--sets", "1", "--seed", "2"],
    );
    let mut args: Vec<String> = [
        "compare",
        "--policies",
        "rl-base,rl-hybrid",
        "--trace",
        &trace,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for b in ["A", "B", "C", "D", "E"] {
        let ck = ok(
            dir.path(),
            &[
                "train",
                "--trace",
                &trace,
                "--branch",
                b,
                "--episodes",
                "1",
                "--hidden",
                "8",
            ],
        );
        args.push("--checkpoint".into());
        args.push(ck);
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let report = dir.path().join(ok(dir.path(), &args));
    let rows = csv_rows(&report.join("branch_scatter.csv"));
    for variant in ["rl-base", "rl-hybrid"] {
        let branches: Vec<&str> = rows
            .iter()
            .filter(|r| r[0] == variant)
            .map(|r| r[1].as_str())
            .collect();
        assert_eq!(branches, ["A", "B", "C", "D", "E"], "{variant}");
    }
}

#[test]
fn config_file_values_yield_to_flags_and_env() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "output_root = \"from-file\"\nseed = 4\n[trace]\nmix = \"low\"\njobs = 8\nsets = 1\n",
    )
    .unwrap();
    let path = ok(
        dir.path(),
        &["--config", "run.toml", "gen-trace", "--jobs", "5"],
    );
    assert_eq!(path, "from-file/traces/low-j5-n1-s4.trace");
    let out = Command::new(env!("CARGO_BIN_EXE_netsched"))
        .args(["--config", "run.toml", "gen-trace"])
        .current_dir(dir.path())
        .env("NETSCHED_OUTPUT_ROOT", "from-env")
        .output()
        .unwrap();
    assert_eq!(
        String::from_utf8(out.stdout).unwrap().trim(),
        "from-env/traces/low-j8-n1-s4.trace"
    );
    std::fs::write(dir.path().join("bad.toml"), "[trace]\nmixx = \"low\"\n").unwrap();
    assert_eq!(
        code(dir.path(), &["--config", "bad.toml", "gen-trace"]).0,
        3
    );
    assert_eq!(
        code(dir.path(), &["--config", "none.toml", "gen-trace"]).0,
        3
    );
}

#[test]
fn cs_table_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["cs-table", "--out", "t.csv"]);
    let t = CsTable::load(dir.path().join("t.csv")).unwrap();
    assert_eq!(t, CsTable::shipped());
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    for sub in [
        "gen-trace",
        "train",
        "eval",
        "compare",
        "cs-table",
        "NETSCHED_OUTPUT_ROOT",
    ] {
        assert!(help.contains(sub), "{sub}");
    }
}
