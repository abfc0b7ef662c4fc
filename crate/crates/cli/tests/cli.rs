use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_deferral");

const BASE: &str = r#"
[small]
kind = "synthetic"
name = "small-synthetic"
temperature = 0.55
noise_scale = 0.85
seed = 11

[large]
kind = "synthetic"
name = "large-synthetic"
temperature = 0.55
noise_scale = 0.75
seed = 23

[calibration]
k_target = 5.0
episodes = 30

[run]
episodes = 40
parallelism = 3
policies = ["never", "always", "random", "threshold-ppl"]

[report]
bootstrap_resamples = 200

[prices.small-synthetic]
input = 0.15
output = 1.50

[prices.large-synthetic]
input = 1.75
output = 14.00
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn deferral(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let out = dir.path().join("out");
    let o = deferral(&["calibrate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);

    let o = deferral(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let runs = out.join("runs");
    for p in ["never", "always", "random", "threshold-ppl"] {
        let text = fs::read_to_string(runs.join(format!("{p}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), 40);
    }

    let o = deferral(&[
        "report",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        s(&runs.join("never.jsonl")),
        s(&runs.join("always.jsonl")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let never: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("reports/never.json")).unwrap()).unwrap();
    assert_eq!(never["cost"]["per_model"]["large-synthetic"], 0.0);
    let bins = never["histogram"].as_array().unwrap().len();
    let max_len = fs::read_to_string(runs.join("never.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["steps"].as_array().unwrap().len())
        .max()
        .unwrap();
    assert_eq!(bins, max_len);
    let csv_rows = fs::read_to_string(out.join("reports/never_histogram.csv")).unwrap().lines().count();
    assert_eq!(csv_rows, max_len + 1);

    let o = deferral(&["label", "--config", s(&cfg), "--out", s(&out), s(&runs.join("never.jsonl"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("labels/never.csv").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, par) in [(&a, "1"), (&b, "4")] {
        assert_eq!(code(&deferral(&["calibrate", "--config", s(&cfg), "--out", s(out), "--parallelism", par])), 0);
        assert_eq!(
            code(&deferral(&["run", "--config", s(&cfg), "--out", s(out), "--policy", "threshold", "--measure", "mte", "--parallelism", par])),
            0
        );
    }
    for rel in ["calibration/result_ppl.json", "calibration/episodes.jsonl", "runs/threshold-mte.jsonl"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn seed_override_changes_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let out = dir.path().join("out");
    assert_eq!(code(&deferral(&["run", "--config", s(&cfg), "--out", s(&out), "--policy", "never"])), 0);
    let first = fs::read(out.join("runs/never.jsonl")).unwrap();
    assert_eq!(code(&deferral(&["run", "--config", s(&cfg), "--out", s(&out), "--policy", "never", "--seed", "5"])), 0);
    assert_ne!(first, fs::read(out.join("runs/never.jsonl")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let cfg = write_config(dir.path(), &BASE.replace("k_target = 5.0", "k_target = 0.0"));
    let o = deferral(&["calibrate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("k_target"));

    let cfg = write_config(dir.path(), &BASE.replace("seed = 11", "seed = 11\nsize = 9"));
    assert_eq!(code(&deferral(&["calibrate", "--config", s(&cfg)])), 2);

    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&deferral(&["calibrate", "--config", s(&missing)])), 2);

    let cfg = write_config(dir.path(), BASE);
    let o = deferral(&["run", "--config", s(&cfg), "--out", s(&out), "--policy", "threshold-ppl"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing calibration"));

    let o = deferral(&["run", "--config", s(&cfg), "--out", s(&out), "--policy", "sometimes"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&deferral(&["run", "--config", s(&cfg), "--policy", "never", "--measure", "sp"])), 2);
    assert_eq!(code(&deferral(&["frobnicate"])), 2);
    assert_eq!(code(&deferral(&["report", "--config", s(&cfg)])), 2);
}

#[test]
fn schema_mismatch_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let out = dir.path().join("out");
    assert_eq!(code(&deferral(&["run", "--config", s(&cfg), "--out", s(&out), "--policy", "never"])), 0);
    let log = out.join("runs/never.jsonl");
    let text = fs::read_to_string(&log).unwrap().replacen("\"schema_version\":1", "\"schema_version\":99", 1);
    let old = dir.path().join("old.jsonl");
    fs::write(&old, text).unwrap();
    let o = deferral(&["report", "--config", s(&cfg), "--out", s(&out), s(&old)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("schema version 99"));
}

#[test]
fn truncated_log_keeps_a_parseable_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let out = dir.path().join("out");
    assert_eq!(code(&deferral(&["run", "--config", s(&cfg), "--out", s(&out), "--policy", "always"])), 0);
    let text = fs::read_to_string(out.join("runs/always.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // simulate a kill after 7 complete records
    let prefix = format!("{}\n", lines[..7].join("\n"));
    let cut = dir.path().join("cut.jsonl");
    fs::write(&cut, &prefix).unwrap();
    let o = deferral(&["report", "--config", s(&cfg), "--out", s(&out), s(&cut)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("7 episodes"));
}

#[test]
fn unreachable_backend_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // bind then drop to get a port nothing listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let remote = BASE.replace(
        "[large]\nkind = \"synthetic\"\nname = \"large-synthetic\"\ntemperature = 0.55\nnoise_scale = 0.75\nseed = 23",
        &format!(
            "[large]\nkind = \"remote\"\nbase_url = \"http://127.0.0.1:{port}/v1\"\nmodel = \"large-synthetic\"\nmax_attempts = 1\nbackoff_ms = 0"
        ),
    );
    assert!(remote.contains("remote"));
    let cfg = write_config(dir.path(), &remote);
    let out = dir.path().join("out");
    let o = deferral(&["run", "--config", s(&cfg), "--out", s(&out), "--policy", "always"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("infrastructure"));
    // failures are still logged
    assert_eq!(fs::read_to_string(out.join("runs/always.jsonl")).unwrap().lines().count(), 40);
    // the small model is synthetic, so small-only runs are unaffected
    assert_eq!(code(&deferral(&["run", "--config", s(&cfg), "--out", s(&out), "--policy", "never"])), 0);
}

#[test]
fn help_exits_cleanly() {
    let o = deferral(&["--help"]);
    assert_eq!(code(&o), 0);
    for cmd in ["calibrate", "run", "report", "label"] {
        assert!(String::from_utf8_lossy(&o.stdout).contains(cmd));
    }
}
