use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "--iterations",
    "20",
    "--query",
    "2",
    "--mc-samples",
    "1",
    "--set",
    "channels=4",
    "--set",
    "n_blocks=2",
    "--set",
    "log_every=5",
    "--set",
    "eval_every=10",
    "--set",
    "val_episodes=5",
    "--set",
    "checkpoint_every=10",
    "--eval-episodes",
    "20",
    "--eval-query",
    "5",
];

fn metamod(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metamod"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = metamod(dir, args);
    assert!(
        out.status.success(),
        "metamod {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(dir: &Path, args: &[&str]) -> String {
    let out = metamod(dir, args);
    assert!(!out.status.success(), "metamod {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Trains a tiny model and returns its run directory (first stdout line).
fn train(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["--quiet", "train"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    let stdout = ok(dir, &args);
    dir.join(stdout.lines().next().unwrap())
}

fn manifest_outputs_exist(run: &Path) {
    let m = json(&run.join("manifest.json"));
    let outputs = m["outputs"].as_object().unwrap();
    assert!(!outputs.is_empty());
    for file in outputs.values() {
        assert!(run.join(file.as_str().unwrap()).is_file(), "{file} missing");
    }
}

#[test]
fn unknown_method_lists_all_five() {
    let tmp = tempfile::tempdir().unwrap();
    let stderr = err(tmp.path(), &["train", "--method", "foo"]);
    for m in ["vanilla", "mlti", "mtm", "vtm", "hvtm"] {
        assert!(stderr.contains(m), "{stderr}");
    }
}

#[test]
fn bad_config_key_lists_valid_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let stderr = err(tmp.path(), &["train", "--dry-run", "--set", "learning_rate=0.1"]);
    assert!(stderr.contains("learning_rate"), "{stderr}");
    assert!(stderr.contains("kl_weight") && stderr.contains("mc_samples"), "{stderr}");
}

#[test]
fn iterations_are_echoed_into_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(tmp.path(), &["train", "--dry-run", "--method", "hvtm", "--iterations", "50000", "--seed", "3"]);
    let run = tmp.path().join(stdout.trim());
    let m = json(&run.join("manifest.json"));
    assert_eq!(m["config"]["iterations"], 50000);
    assert_eq!(m["config"]["method"], "hvtm");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["status"], "planned");
    assert!(run.starts_with(tmp.path().join("runs")));
    manifest_outputs_exist(&run);
    let toml = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(toml.contains("iterations = 50000"), "{toml}");
}

#[test]
fn train_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), &["--method", "hvtm", "--seed", "0"]);
    let name = run.file_name().unwrap().to_string_lossy().into_owned();
    assert!(name.ends_with("-hvtm-seed0"), "{name}");
    let m = json(&run.join("manifest.json"));
    assert_eq!(m["status"], "completed");
    assert!(m["finished"].is_string());
    for key in ["config", "metrics", "checkpoint", "eval"] {
        assert!(m["outputs"].get(key).is_some(), "{key} not listed");
    }
    manifest_outputs_exist(&run);
    let lines = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let iters: Vec<u64> = lines
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["iter"].as_u64().unwrap())
        .collect();
    assert_eq!(iters, vec![5, 10, 15, 20]);
    assert_eq!(json(&run.join("eval.json"))["n_episodes"], 20);

    // A second invocation in the same second gets its own directory.
    let again = train(tmp.path(), &["--method", "hvtm", "--seed", "0", "--dry-run"]);
    assert_ne!(again, run);
}

#[test]
fn config_echo_reproduces_the_metrics_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let first = train(tmp.path(), &["--method", "vtm", "--seed", "5"]);
    let config = first.join("config.toml");
    let second = tmp.path().join("again");
    ok(
        tmp.path(),
        &["--quiet", "train", "--config", config.to_str().unwrap(), "--run-dir", second.to_str().unwrap(), "--eval-episodes", "20"],
    );
    assert_eq!(
        std::fs::read(first.join("metrics.jsonl")).unwrap(),
        std::fs::read(second.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(first.join("checkpoint.bin")).unwrap(),
        std::fs::read(second.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn stopped_run_resumes_to_the_uninterrupted_result() {
    let tmp = tempfile::tempdir().unwrap();
    let whole = train(tmp.path(), &["--method", "mtm", "--seed", "2"]);
    let part = train(tmp.path(), &["--method", "mtm", "--seed", "2", "--stop-after", "7"]);
    assert_eq!(json(&part.join("manifest.json"))["status"], "stopped");
    assert!(!part.join("eval.json").exists());
    ok(tmp.path(), &["--quiet", "resume", part.to_str().unwrap()]);
    assert_eq!(json(&part.join("manifest.json"))["status"], "completed");
    for file in ["metrics.jsonl", "checkpoint.bin"] {
        assert_eq!(std::fs::read(whole.join(file)).unwrap(), std::fs::read(part.join(file)).unwrap(), "{file}");
    }
    assert_eq!(json(&whole.join("eval.json")), json(&part.join("eval.json")));
}

#[test]
fn eval_ignores_method_with_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), &["--method", "vanilla"]);
    let ckpt = run.join("checkpoint.bin");
    let out = metamod(
        tmp.path(),
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--method", "hvtm", "--episodes", "30"],
    );
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("WARN") && stderr.contains("ignored"), "{stderr}");
    let record = json(&run.join("eval-synthetic-stripes.json"));
    assert_eq!(record["n_episodes"], 30);
    assert_eq!(record["per_episode"].as_array().unwrap().len(), 30);

    // Without the flag: same episodes, same numbers, no warning.
    let plain = tmp.path().join("plain.json");
    let out = metamod(
        tmp.path(),
        &["eval", "--checkpoint", run.to_str().unwrap(), "--episodes", "30", "--out", plain.to_str().unwrap()],
    );
    assert!(!String::from_utf8_lossy(&out.stderr).contains("WARN"));
    assert_eq!(json(&plain)["per_episode"], record["per_episode"]);
}

#[test]
fn eval_on_another_family_is_cross_domain() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), &["--method", "vanilla"]);
    let stdout = ok(
        tmp.path(),
        &["--quiet", "eval", "--checkpoint", run.to_str().unwrap(), "--dataset", "synthetic-blobs", "--episodes", "10"],
    );
    assert!(stdout.contains("synthetic-blobs"), "{stdout}");
    assert!(run.join("eval-synthetic-blobs.json").is_file());
}

#[test]
fn missing_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in ["eval", "analyze"] {
        let stderr = err(tmp.path(), &[sub, "--checkpoint", "nowhere/checkpoint.bin"]);
        assert!(stderr.contains("not found"), "{stderr}");
    }
    let stderr = err(tmp.path(), &["resume", "nowhere"]);
    assert!(stderr.contains("manifest.json"), "{stderr}");
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn beta_sweep_emits_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let values = "0.0001,0.001,0.01,0.05,0.1";
    let mut args = vec!["--quiet", "sweep", "--param", "beta", "--values", values, "--method", "vtm"];
    args.extend_from_slice(TINY);
    let stdout = ok(tmp.path(), &args);
    let csv = tmp.path().join(stdout.trim());
    let rows = csv_rows(&csv);
    assert_eq!(rows[0], ["value", "accuracy_mean", "ci95"]);
    assert_eq!(rows.len(), 6);
    for (row, v) in rows[1..].iter().zip(values.split(',')) {
        assert_eq!(row[0], v);
        let acc: f64 = row[1].parse().unwrap();
        let ci: f64 = row[2].parse().unwrap();
        assert!(acc.is_finite() && ci.is_finite() && (0.0..=100.0).contains(&acc));
    }
    let root = csv.parent().unwrap();
    let m = json(&root.join("manifest.json"));
    assert_eq!(m["key"], "kl_weight");
    assert_eq!(m["runs"].as_array().unwrap().len(), 5);
    let point = root.join("kl_weight=0.05");
    assert_eq!(json(&point.join("manifest.json"))["config"]["kl_weight"], 0.05);
    manifest_outputs_exist(&point);
}

#[test]
fn parallel_sweep_matches_sequential() {
    let tmp = tempfile::tempdir().unwrap();
    let mut results = Vec::new();
    for jobs in ["1", "2"] {
        let mut args = vec!["--quiet", "sweep", "--param", "lambda", "--values", "0.1,1", "--method", "mtm", "--jobs", jobs];
        args.extend_from_slice(TINY);
        let stdout = ok(tmp.path(), &args);
        results.push(csv_rows(&tmp.path().join(stdout.trim())));
    }
    assert_eq!(results[0], results[1]);
    assert_eq!(results[0].len(), 3);
}

#[test]
fn sweep_rejects_unknown_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    let stderr = err(tmp.path(), &["sweep", "--param", "gamma", "--values", "1"]);
    assert!(stderr.contains("gamma") && stderr.contains("kl_weight"), "{stderr}");
}

#[test]
fn analyze_writes_matrix_heatmap_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let run = train(tmp.path(), &["--method", "mtm"]);
    let out = tmp.path().join("analysis");
    ok(
        tmp.path(),
        &[
            "--quiet",
            "analyze",
            "--checkpoint",
            run.to_str().unwrap(),
            "--train-tasks",
            "6",
            "--test-tasks",
            "4",
            "--query",
            "3",
            "--out",
            out.to_str().unwrap(),
        ],
    );
    for name in ["modulated", "original"] {
        let rows = csv_rows(&out.join(format!("similarity-{name}.csv")));
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].len(), 5);
        let png = std::fs::read(out.join(format!("similarity-{name}.png"))).unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }
    let summary = json(&out.join("similarity.json"));
    assert_eq!(summary["method"], "mtm");
    let (m, o) = (summary["mean_distance_modulated"].as_f64().unwrap(), summary["mean_distance_original"].as_f64().unwrap());
    assert!(m > 0.0 && o > 0.0 && m != o, "{m} {o}");
}
