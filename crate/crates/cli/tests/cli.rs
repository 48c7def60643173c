//! End-to-end tests of the `tlm` binary: exit codes, artifact layout, and
//! byte-level determinism of the outputs.

use std::path::Path;
use std::process::{Command, Output};

const TINY_CONFIG: &str = "\
task = \"copy\"
vocab = 6
min_len = 2
max_len = 3
train_examples = 8
eval_examples = 4
d_emb = 8
heads = 2
layers = 1
hidden_dropout = 0.0
batch_size = 4
max_epochs = 2
scheme = \"tlm\"
";

fn tlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlm"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

#[test]
fn train_writes_three_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", TINY_CONFIG);
    let out = tlm(dir.path(), &["train", "--config", "exp.toml", "--out-dir", "out"]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("out")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let run_dir = runs[0].as_ref().unwrap().path();
    for file in ["runrecord.json", "metrics.csv", "model.ckpt"] {
        assert!(run_dir.join(file).exists(), "missing {file}");
    }
    let record = std::fs::read_to_string(run_dir.join("runrecord.json")).unwrap();
    assert!(record.contains("\"status\""));
}

#[test]
fn bad_rate_exits_two_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", &format!("{TINY_CONFIG}rate = 1.0\n"));
    let out = tlm(dir.path(), &["train", "--config", "exp.toml"]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("rate"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", &format!("{TINY_CONFIG}warp_factor = 9\n"));
    let out = tlm(dir.path(), &["train", "--config", "exp.toml"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_factor"));
}

#[test]
fn rerun_produces_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", TINY_CONFIG);
    let a = tlm(dir.path(), &["train", "--config", "exp.toml", "--out-dir", "a", "--seed", "5"]);
    let b = tlm(dir.path(), &["train", "--config", "exp.toml", "--out-dir", "b", "--seed", "5"]);
    assert_eq!(code(&a), 0);
    assert_eq!(code(&b), 0);
    let read = |root: &str| {
        let runs: Vec<_> = std::fs::read_dir(dir.path().join(root)).unwrap().collect();
        std::fs::read(runs[0].as_ref().unwrap().path().join("metrics.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn divergence_exits_three_with_partial_record() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", &format!("{TINY_CONFIG}lr = 1e200\n"));
    let out = tlm(dir.path(), &["train", "--config", "exp.toml", "--out-dir", "out"]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("out")).unwrap().collect();
    let run_dir = runs[0].as_ref().unwrap().path();
    let record = std::fs::read_to_string(run_dir.join("runrecord.json")).unwrap();
    assert!(record.contains("\"diverged\""), "{record}");
    assert!(run_dir.join("metrics.csv").exists());
}

#[test]
fn verify_passes_on_a_clean_build() {
    let dir = tempfile::tempdir().unwrap();
    let out = tlm(dir.path(), &["verify"]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS siblings_one_hot"));
    assert!(stdout.contains("PASS gradients_match_finite_difference"));
    assert!(stdout.contains("all 10 checks passed"));
}

#[test]
fn verify_tamper_exits_four_naming_the_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = tlm(dir.path(), &["verify", "--tamper"]);
    assert_eq!(code(&out), 4);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL siblings_one_hot"), "stdout: {stdout}");
}

#[test]
fn sweep_is_resumable_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", TINY_CONFIG);
    let args = [
        "sweep", "--config", "exp.toml", "--out-dir", "out", "--rates", "0.0,0.1", "--seeds",
        "1,2", "--summary",
    ];
    let first = tlm(dir.path(), &args);
    assert_eq!(code(&first), 0, "stderr: {}", String::from_utf8_lossy(&first.stderr));
    let csv = dir.path().join("out/sweep.csv");
    let first_bytes = std::fs::read(&csv).unwrap();
    let lines = String::from_utf8(first_bytes.clone()).unwrap();
    assert_eq!(lines.lines().count(), 5, "{lines}");
    assert!(lines.starts_with("config_hash,seed,"));
    assert!(dir.path().join("out/summary.csv").exists());

    // Second invocation reuses the written cells and reproduces the CSV.
    let second = tlm(dir.path(), &args);
    assert_eq!(code(&second), 0);
    assert_eq!(std::fs::read(&csv).unwrap(), first_bytes);
}

#[test]
fn gen_data_and_export_agree_for_generated_tasks() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", TINY_CONFIG);
    let gen = tlm(dir.path(), &["gen-data", "--config", "exp.toml", "--out", "d1"]);
    assert_eq!(code(&gen), 0);
    let exp = tlm(dir.path(), &["export-dataset", "--config", "exp.toml", "--out", "d2"]);
    assert_eq!(code(&exp), 0);
    for file in ["train.tsv", "eval.tsv"] {
        let a = std::fs::read(dir.path().join("d1").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("d2").join(file)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn scheme_override_flag_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "exp.toml", TINY_CONFIG);
    let out = tlm(
        dir.path(),
        &["train", "--config", "exp.toml", "--out-dir", "out", "--scheme", "drophead+tlm"],
    );
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8_lossy(&out.stdout);
    // Atoms are canonicalized to registry order.
    assert!(stdout.contains("scheme tlm+drophead"), "stdout: {stdout}");
}
