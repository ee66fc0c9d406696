use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
method = "MOINCL"
seed = 3
epochs_per_task = 1
batch_size = 4
pretrain_steps = 5
pretrain_context_lines = 20
max_gen_len = 6

[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
context = 48
rank = 2
feat_dim = 8

[splits]
train = 12
val = 2
test = 6
"#;

fn micl(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_micl"))
        .args(args)
        .env("MICL_OUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn training_twice_gives_identical_matrices_and_eval_prints_one_score() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(micl(dir.path(), &["train", "--config", &cfg, "--out", out.to_str().unwrap()]));
    }
    let ma = std::fs::read(a.join("score_matrix.json")).unwrap();
    let mb = std::fs::read(b.join("score_matrix.json")).unwrap();
    assert_eq!(ma, mb);
    for f in ["config.json", "train_log.jsonl", "step_scores.csv", "report.txt", "model.ckpt"] {
        assert!(a.join(f).exists(), "{f} missing");
    }

    let ck = a.join("model.ckpt");
    let stdout = ok(micl(dir.path(), &["eval", "--checkpoint", ck.to_str().unwrap(), "--task-index", "2"]));
    let line = stdout.trim();
    assert_eq!(stdout.lines().count(), 1);
    let score: f64 = line.parse().unwrap();
    let matrix = micl_core::metrics::ScoreMatrix::load(&a.join("score_matrix.json")).unwrap();
    let last = matrix.n_tasks();
    assert!((score - matrix.get(2, last).unwrap()).abs() < 1e-4, "{score}");

    let bad = micl(dir.path(), &["eval", "--checkpoint", ck.to_str().unwrap(), "--task-index", "99"]);
    assert!(!bad.status.success());
}

#[test]
fn unknown_verb_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = micl(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn replay_metrics_prints_every_block() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("replay");
    let text = ok(micl(dir.path(), &["replay-metrics", "--out", out_dir.to_str().unwrap()]));
    for m in ["FINETUNE", "LWF", "EWC", "EWF", "PATHWEAVE", "MOINCL"] {
        assert!(text.contains(m), "{m} missing");
    }
    assert!(text.contains("14.21"));
    assert_eq!(std::fs::read_to_string(out_dir.join("replay.txt")).unwrap(), text);
}

#[test]
fn gen_data_writes_one_file_per_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    ok(micl(dir.path(), &["gen-data", "--config", &cfg]));
    let data = dir.path().join("data");
    let files: Vec<_> = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".jsonl"))
        .collect();
    assert_eq!(files.len(), 6);
    assert!(data.join("instructions.txt").exists());
}
