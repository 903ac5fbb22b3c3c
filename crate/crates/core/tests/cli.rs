use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_pvgru");

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/memorize.jsonl")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "pvgru {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    fs::write(
        &path,
        r#"{"model": {"d_embed": 16, "d_hidden": 16}, "train": {"seed": 4, "batch_size": 8}}"#,
    )
    .unwrap();
    path
}

fn train(dir: &Path, out: &str, epochs: usize) -> PathBuf {
    let config = small_config(dir);
    let out = dir.join(out);
    ok(&[
        "train",
        "--preset",
        "desk",
        "--config",
        config.to_str().unwrap(),
        "--corpus",
        corpus().to_str().unwrap(),
        "--epochs",
        &epochs.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    out
}

#[test]
fn train_evaluate_generate_export() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = train(dir.path(), "run", 2);
    let ckpt = run_dir.join("last.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let log = fs::read_to_string(run_dir.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss_total"].as_f64().unwrap().is_finite());
    }

    let report = dir.path().join("report.json");
    let text = ok(&[
        "evaluate",
        "--checkpoint",
        ckpt,
        "--corpus",
        corpus().to_str().unwrap(),
        "--greedy",
        "--max-len",
        "10",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(text.contains("bleu1="), "{text}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["metrics"].is_object());

    let c = corpus();
    let common = ["generate", "--checkpoint", ckpt, "--corpus", c.to_str().unwrap(), "--max-len", "8"];
    let greedy = ok(&[&common[..], &["--greedy"]].concat());
    let beam1 = ok(&[&common[..], &["--beam", "1"]].concat());
    assert_eq!(greedy, beam1);
    assert_eq!(greedy.lines().count(), 16);
    let sampled = ok(&[&common[..], &["--beam", "3", "--mode", "sample", "--seed", "2"]].concat());
    assert_eq!(sampled, ok(&[&common[..], &["--beam", "3", "--mode", "sample", "--seed", "2"]].concat()));

    let one = ok(&["generate", "--checkpoint", ckpt, "-c", "hello there", "--greedy", "--max-len", "5"]);
    assert_eq!(one.lines().count(), 1);

    let vars = dir.path().join("vars.jsonl");
    ok(&[
        "export-vars",
        "--checkpoint",
        ckpt,
        "--corpus",
        corpus().to_str().unwrap(),
        "--out",
        vars.to_str().unwrap(),
    ]);
    assert!(!fs::read_to_string(vars).unwrap().is_empty());
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let straight = train(dir.path(), "straight", 3);
    let resumed = train(dir.path(), "resumed", 1);
    ok(&[
        "train",
        "--corpus",
        corpus().to_str().unwrap(),
        "--checkpoint",
        resumed.join("last.ckpt").to_str().unwrap(),
        "--epochs",
        "3",
        "--out",
        resumed.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read_to_string(straight.join("log.jsonl")).unwrap(),
        fs::read_to_string(resumed.join("log.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(straight.join("last.ckpt")).unwrap(),
        fs::read(resumed.join("last.ckpt")).unwrap()
    );
}

#[test]
fn gradcheck_passes() {
    let text = ok(&["gradcheck", "--seed", "1"]);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{text}");
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"train": {"learning_rat": 0.1}}"#).unwrap();
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--corpus",
        corpus().to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));

    let out = run(&["generate", "--checkpoint", dir.path().join("missing.ckpt").to_str().unwrap(), "-c", "hi"]);
    assert!(!out.status.success());
    let out = run(&["train", "--corpus", corpus().to_str().unwrap(), "--mode", "mean"]);
    assert!(!out.status.success());
}
