//! Runs the `makd` binary end to end on a small generated corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn makd(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_makd"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = makd(dir, args);
    assert!(out.status.success(), "makd {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(dir: &Path, artifact: &str) -> serde_json::Value {
    let path = dir.join(format!("{artifact}.manifest.json"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}", path.display()));
    serde_json::from_str(&text).unwrap()
}

fn bytes(path: PathBuf) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn pretrain_factorize_distill_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["corpus", "--kind", "grammar", "--docs", "200", "--out", "corpus.txt"]);
    assert_eq!(manifest(dir, "corpus.txt")["command"], "corpus");

    let arch = ["--set", "layers=2", "--set", "hidden=16", "--set", "heads=2", "--set", "seq_len=16"];
    let mut args = vec!["pretrain-teacher", "--set", "corpus=\"corpus.txt\"", "--set", "out=\"teacher.ckpt\""];
    args.extend(arch);
    args.extend(["--set", "steps=30", "--set", "batch_size=4", "--set", "peak_lr=0.003", "--seed", "5"]);
    args.extend(["--set", "metrics=\"teacher.metrics.jsonl\"", "--set", "eval_interval=10"]);
    ok(dir, &args);
    let m = manifest(dir, "teacher.ckpt");
    assert_eq!(m["command"], "pretrain-teacher");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["steps"], 30);
    assert!(dir.join("teacher.ckpt.vocab").exists());
    assert!(dir.join("teacher.metrics.jsonl").exists());
    let teacher_bytes = bytes(dir.join("teacher.ckpt"));

    ok(dir, &["factorize", "--teacher", "teacher.ckpt", "--rank", "4", "--out", "student0.ckpt"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("student0.ckpt.report.json")).unwrap()).unwrap();
    assert!(report.is_object());
    assert_eq!(manifest(dir, "student0.ckpt")["command"], "factorize");

    ok(
        dir,
        &[
            "distill",
            "--set",
            "corpus=\"corpus.txt\"",
            "--set",
            "teacher=\"teacher.ckpt\"",
            "--set",
            "rank=4",
            "--set",
            "out=\"student.ckpt\"",
            "--set",
            "steps=20",
            "--set",
            "batch_size=4",
            "--set",
            "seq_len=16",
        ],
    );
    let m = manifest(dir, "student.ckpt");
    assert_eq!(m["command"], "distill");
    assert_eq!(m["inputs"]["teacher"], "teacher.ckpt");

    let report = ok(
        dir,
        &[
            "eval",
            "--model",
            "student.ckpt",
            "--teacher",
            "teacher.ckpt",
            "--corpus",
            "corpus.txt",
            "--out",
            "eval.txt",
        ],
    );
    for key in ["masked_accuracy", "logit_kl", "top1_agreement", "attention_kl.1"] {
        assert!(report.contains(key), "{key} missing from {report}");
    }
    assert_eq!(manifest(dir, "eval.txt")["command"], "eval");

    let shown = ok(dir, &["inspect", "student.ckpt", "--json"]);
    let info: serde_json::Value = serde_json::from_str(&shown).unwrap();
    assert!(info.is_object());

    ok(
        dir,
        &[
            "bench",
            "--hidden",
            "16",
            "--heads",
            "2",
            "--rank",
            "4",
            "--seq-len",
            "8",
            "--reps",
            "1",
            "--warmup",
            "0",
            "--out",
            "bench.json",
        ],
    );
    assert_eq!(manifest(dir, "bench.json")["command"], "bench");

    // None of the commands above may touch their inputs.
    assert_eq!(bytes(dir.join("teacher.ckpt")), teacher_bytes);
}

#[test]
fn decoder_pipeline_reports_rouge() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["corpus", "--kind", "instruction", "--docs", "120", "--out", "inst.txt"]);
    ok(
        dir,
        &[
            "pretrain-teacher",
            "--set",
            "corpus=\"inst.txt\"",
            "--set",
            "out=\"t.ckpt\"",
            "--set",
            "kind=\"decoder-causal\"",
            "--set",
            "layers=2",
            "--set",
            "hidden=16",
            "--set",
            "heads=2",
            "--set",
            "seq_len=16",
            "--set",
            "steps=10",
            "--set",
            "batch_size=4",
        ],
    );
    let report = ok(
        dir,
        &[
            "eval",
            "--model",
            "t.ckpt",
            "--teacher",
            "t.ckpt",
            "--corpus",
            "inst.txt",
            "--prompts",
            "5",
            "--max-new",
            "4",
        ],
    );
    assert!(report.contains("next_token_accuracy"), "{report}");
    assert!(report.contains("rouge_l_reference"), "{report}");
    assert!(report.contains("rouge_l_teacher"), "{report}");
}

#[test]
fn usage_and_missing_files_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = makd(dir, &["factorize", "--teacher", "t.ckpt", "--rank", "0", "--out", "s.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rank"));
    let out = makd(dir, &["factorize", "--teacher", "nope.ckpt", "--rank", "2", "--out", "s.ckpt"]);
    assert_eq!(out.status.code(), Some(3));
    let out = makd(dir, &["distill", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.join("s.ckpt").exists());
}
