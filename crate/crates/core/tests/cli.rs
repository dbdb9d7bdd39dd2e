use std::path::Path;
use std::process::{Command, Output};

fn dalign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dalign"))
        .current_dir(dir)
        .env("DALIGN_THREADS", "2")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = dalign(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(dalign(d, &["bogus"]).status.code(), Some(1));
    assert_eq!(dalign(d, &["oracle-check", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(dalign(d, &["sweep", "--preset", "nope"]).status.code(), Some(1));
    assert_eq!(dalign(d, &["--help"]).status.code(), Some(0));
    assert_eq!(dalign(d, &["--version"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = dalign(d, &["sft", "--data", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("missing.jsonl"), "{}", stderr(&out));

    let out = dalign(d, &["eval", "--metrics", "nothing.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nothing.csv"), "{}", stderr(&out));
}

#[test]
fn oracle_check_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["oracle-check", "--out-dir", "o", "--beta", "0.5"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("o/oracle.json")).unwrap()).unwrap();
    assert_eq!(report["n_sequences"], 40);
    assert!(report["bijection_error"].as_f64().unwrap() < 1e-12);
    assert!(report["avg_residual_std"].as_f64().unwrap() < 1e-9);
    assert!(d.join("o/diagnostics.csv").exists());
    let cfg = std::fs::read_to_string(d.join("o/effective.cfg")).unwrap();
    assert!(cfg.lines().any(|l| l.trim() == "beta = 0.5"), "{cfg}");
}

#[test]
fn pipeline_and_sweep_preset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let space = ["--vocab", "4", "--l-max", "5"];
    let mut args = vec!["gen-data", "--n-prompts", "8", "--out-dir", "data"];
    args.extend(space);
    ok(d, &args);
    let mut args = vec!["sft", "--data", "data/train.jsonl", "--max-steps", "3", "--out-dir", "sft"];
    args.extend(space);
    ok(d, &args);
    ok(
        d,
        &[
            "align", "--data", "data/train.jsonl", "--reference", "sft/policy.json", "--algo", "ipo_avg", "--beta", "0.3",
            "--max-steps", "4", "--eval-every", "2", "--generations", "8", "--svg", "--out-dir", "align",
        ],
    );
    let metrics = std::fs::read_to_string(d.join("align/metrics.csv")).unwrap();
    // evaluations at steps 0, 2 and 4
    assert_eq!(metrics.lines().count(), 4, "{metrics}");
    assert!(d.join("align/scatter.svg").exists());

    ok(
        d,
        &[
            "sweep", "--preset", "paper-ipo-avg", "--data", "data/train.jsonl", "--reference", "sft/policy.json", "--max-steps", "2",
            "--generations", "4", "--out-dir", "sweep",
        ],
    );
    let table: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(d.join("sweep/sweep.json")).unwrap()).unwrap();
    let betas: Vec<f64> = table.iter().map(|r| r["beta"].as_f64().unwrap()).collect();
    assert_eq!(betas, vec![0.01, 0.03, 0.1, 0.3, 1.0]);
    assert!(table.iter().all(|r| r["algorithm"] == "ipo_avg"));

    ok(d, &["eval", "--metrics", "sweep/metrics.csv", "--out-dir", "ev"]);
    assert!(d.join("ev/front.csv").exists());
}

#[test]
fn config_file_and_flags_merge() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "# oracle settings\nvocab = 2\nl_max = 3\nbeta = 2\n").unwrap();
    ok(d, &["oracle-check", "--config", "run.cfg", "--beta", "0.25", "--out-dir", "o"]);
    let cfg = std::fs::read_to_string(d.join("o/effective.cfg")).unwrap();
    for line in ["vocab = 2", "l-max = 3", "beta = 0.25"] {
        assert!(cfg.lines().any(|l| l.trim() == line), "missing `{line}` in\n{cfg}");
    }
    std::fs::write(d.join("bad.cfg"), "vocab = 2\nnot a pair\n").unwrap();
    assert_eq!(dalign(d, &["oracle-check", "--config", "bad.cfg"]).status.code(), Some(1));
}
