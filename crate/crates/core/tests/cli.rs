use boxhead::config::RunConfig;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "train_sequences = 3
eval_sequences = 2
frames = 4
steps = 12
batch_size = 4
";

fn boxhead(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxhead"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = boxhead(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = boxhead(dir, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn tiny(dir: &Path, extra: &str) {
    std::fs::write(dir.join("run.toml"), format!("{TINY}{extra}")).unwrap();
    ok(dir, &["gen", "--config", "run.toml"]);
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn checksum(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("checksum: "))
        .expect("checksum line")
        .to_string()
}

#[test]
fn gen_defaults_and_checksum_stability() {
    let tmp = tempfile::tempdir().unwrap();
    let first = ok(tmp.path(), &["gen", "--dataset", "a"]);
    assert!(first.contains("train sequences: 64") && first.contains("eval sequences: 16"));
    assert_eq!(std::fs::read_dir(tmp.path().join("a/train")).unwrap().count(), 64);
    assert_eq!(std::fs::read_dir(tmp.path().join("a/eval")).unwrap().count(), 16);
    let again = ok(tmp.path(), &["gen", "--dataset", "b"]);
    assert_eq!(checksum(&first), checksum(&again));
    let other = ok(tmp.path(), &["gen", "--dataset", "c", "--seed", "1"]);
    assert_ne!(checksum(&first), checksum(&other));
}

#[test]
fn gen_rejects_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("e.toml"), "train_sequences = 0\neval_sequences = 0\n").unwrap();
    let err = fails(tmp.path(), &["gen", "--config", "e.toml"], 1);
    assert!(err.contains("empty dataset"), "{err}");
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_train_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny(dir, "");
    ok(dir, &["train", "--config", "run.toml", "--out", "r"]);
    for f in ["checkpoint.bin", "loss.csv", "train_report.json", "train_report.csv", "config.toml"] {
        assert!(dir.join("r").join(f).is_file(), "missing {f}");
    }
    let loss = String::from_utf8(read(dir, "r/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 13);

    ok(dir, &["eval", "--config", "run.toml", "--out", "r", "--split", "train"]);
    assert_eq!(read(dir, "r/eval_train.json"), read(dir, "r/train_report.json"));
    assert_eq!(read(dir, "r/eval_train.csv"), read(dir, "r/train_report.csv"));
}

#[test]
fn output_directory_holds_effective_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny(dir, "");
    ok(dir, &["train", "--config", "run.toml", "--out", "r", "--variant", "plain", "--seed", "0"]);
    let written = RunConfig::from_file(&dir.join("r/config.toml")).unwrap();
    let mut expected = RunConfig::from_file(&dir.join("run.toml")).unwrap();
    expected.variant = boxhead::head::HeadVariant::Plain;
    expected.out = "r".into();
    assert_eq!(written, expected);
}

#[test]
fn eval_with_wrong_variant_names_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny(dir, "");
    ok(dir, &["train", "--config", "run.toml", "--out", "r"]);
    let err = fails(dir, &["eval", "--config", "run.toml", "--out", "r", "--variant", "plain"], 1);
    assert!(err.contains("first mismatched parameter"), "{err}");
    assert!(err.contains("body.0."), "{err}");
}

#[test]
fn oracle_eval_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny(dir, "");
    let out = ok(dir, &["eval", "--config", "run.toml", "--out", "o", "--oracle"]);
    assert!(out.contains("AO 1.0000 SR_0.5 1.0000 SR_0.75 1.0000 AUC 1.0000"), "{out}");
    let report: serde_json::Value = serde_json::from_slice(&read(dir, "o/eval_eval_oracle.json")).unwrap();
    for key in ["ao", "sr_50", "sr_75", "auc"] {
        assert_eq!(report[key], 1.0);
    }
}

#[test]
fn missing_dataset_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = fails(tmp.path(), &["train", "--dataset", "nowhere", "--out", "r"], 3);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny(dir, "lr = 1e300\n");
    let err = fails(dir, &["train", "--config", "run.toml", "--out", "r"], 2);
    assert!(err.contains("non-finite loss") && err.contains("at step"), "{err}");
}

#[test]
fn config_errors_are_contract_failures() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.toml"), "learning_rate = 0.1\n").unwrap();
    let err = fails(tmp.path(), &["gen", "--config", "bad.toml"], 1);
    assert!(err.contains("learning_rate"), "{err}");
    fails(tmp.path(), &["gen", "--config", "absent.toml"], 3);
}

#[test]
fn compare_heads_table_is_stable_and_parallel_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny(dir, "");
    ok(dir, &["compare-heads", "--config", "run.toml", "--out", "a"]);
    ok(dir, &["compare-heads", "--config", "run.toml", "--out", "b", "--parallel"]);
    let csv = String::from_utf8(read(dir, "a/compare_heads.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    for col in ["AO", "SR_0.5", "SR_0.75"] {
        assert!(header.contains(&col));
    }
    let variants: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["plain", "inception", "deform_only", "deform_inception"]);
    assert_eq!(read(dir, "a/compare_heads.csv"), read(dir, "b/compare_heads.csv"));
    assert_eq!(read(dir, "a/compare_heads.txt"), read(dir, "b/compare_heads.txt"));
    for v in variants {
        let p = format!("{v}/checkpoint.bin");
        assert_eq!(read(&dir.join("a"), &p), read(&dir.join("b"), &p));
    }
}

#[test]
fn gradcheck_and_bench_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["gradcheck", "--seeds", "1"]);
    assert!(out.contains("deform_inception_block"));
    let out = ok(tmp.path(), &["bench", "--reps", "1", "--out", "b"]);
    assert!(out.contains("deform_conv") && out.contains("(8,32,12,12)x(32,32,3,3)"));
    assert!(tmp.path().join("b/bench.csv").is_file());
}
