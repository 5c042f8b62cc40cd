use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn dualattn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualattn")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = dualattn(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_json(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    assert_eq!(line.lines().count(), 1, "{line}");
    serde_json::from_str(line.trim()).unwrap()
}

fn read(dir: &Path, name: &str) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join(name)).unwrap()).unwrap()
}

const SMALL: &str = r#"{
  "corpus": {"n_train": 16, "n_held_out": 6},
  "pretrain": {"epochs": 1},
  "finetune": {"epochs": 1}
}"#;

#[test]
fn pipeline_runs_end_to_end_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), SMALL).unwrap();
    let c = ["--config", "c.json"];
    let with = |rest: &[&'static str]| -> Vec<&'static str> { c.iter().copied().chain(rest.iter().copied()).collect() };

    ok(d, &with(&["gen-data", "--out", "data"]));
    for f in ["train.jsonl", "held_out.jsonl", "pretrain.jsonl", "corpus.json"] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }
    assert_eq!(read(d, "data/corpus.json")["held_out"], 6);

    ok(d, &with(&["pretrain", "--data", "data", "--out", "pre.ckpt"]));
    assert_eq!(read(d, "pre.ckpt.json")["stage"], "pretrain");
    ok(d, &with(&["finetune", "--data", "data", "--pretrained", "pre.ckpt", "--out", "ft.ckpt"]));

    let base = with(&["--mode", "pretrained-base", "decode", "--checkpoint", "pre.ckpt", "--input", "data/held_out.jsonl", "--out", "base.jsonl", "--report", "base.json"]);
    ok(d, &base);
    ok(d, &with(&["decode", "--checkpoint", "ft.ckpt", "--input", "data/held_out.jsonl", "--out", "cand.jsonl", "--report", "cand.json"]));
    let report = read(d, "cand.json");
    assert_eq!(report["model"]["biasing"]["mode"], "dual-attn");
    assert!(report["metrics"]["wer"].is_number());
    let lines = std::fs::read_to_string(d.join("cand.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);

    let out = ok(d, &["eval", "--baseline", "base.json", "--candidate", "cand.json", "--out", "rel.json"]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("dual-attn-16") && table.contains("WERR"), "{table}");
    assert!(read(d, "rel.json")["relative"].is_object());

    ok(d, &["attn-trace", "--checkpoint", "ft.ckpt", "--input", "data/held_out.jsonl", "--out", "focus.json"]);
    assert!(read(d, "focus.json")["focus"].is_object());
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    let id = first["id"].as_str().unwrap();
    ok(d, &["attn-trace", "--checkpoint", "ft.ckpt", "--input", "data/held_out.jsonl", "--id", id, "--out", "t.csv"]);
    let csv = std::fs::read_to_string(d.join("t.csv")).unwrap();
    assert!(csv.starts_with("frame,entry_index,kind,surface,weight"));

    // Same config and seed: identical artifacts.
    ok(d, &with(&["gen-data", "--out", "data2"]));
    ok(d, &with(&["pretrain", "--data", "data2", "--out", "pre2.ckpt"]));
    assert_eq!(std::fs::read(d.join("data/train.jsonl")).unwrap(), std::fs::read(d.join("data2/train.jsonl")).unwrap());
    assert_eq!(std::fs::read(d.join("pre.ckpt")).unwrap(), std::fs::read(d.join("pre2.ckpt")).unwrap());
    assert_eq!(std::fs::read(d.join("pre.ckpt.json")).unwrap(), std::fs::read(d.join("pre2.ckpt.json")).unwrap());

    // Seed override changes the corpus.
    ok(d, &with(&["--seed", "99", "gen-data", "--out", "data3"]));
    assert_ne!(std::fs::read(d.join("data/train.jsonl")).unwrap(), std::fs::read(d.join("data3/train.jsonl")).unwrap());
    assert_eq!(read(d, "data3/corpus.json")["config"]["model_seed"], 99);
}

#[test]
fn flops_report_scales_with_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let get = |lambda: &str| -> Value {
        let out = ok(dir.path(), &["--lambda", lambda, "flops"]);
        serde_json::from_slice(&out.stdout).unwrap()
    };
    let (a, b) = (get("16"), get("32"));
    assert_eq!(a["config"]["model"]["biasing"]["lambda"], 16);
    assert!(a["flops"].is_object() && a["params"].is_object());
    assert_ne!(a["flops"], b["flops"]);
}

#[test]
fn failures_exit_with_distinct_codes_and_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = dualattn(d, &["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "usage");

    std::fs::write(d.join("bad.json"), r#"{"modle": {}}"#).unwrap();
    let out = dualattn(d, &["--config", "bad.json", "flops"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("modle"));

    let out = dualattn(d, &["--lambda", "0", "flops"]);
    assert_eq!(out.status.code(), Some(3));
    let out = dualattn(d, &["--mode", "triple-attn", "flops"]);
    assert_eq!(out.status.code(), Some(3));

    let out = dualattn(d, &["decode", "--checkpoint", "missing.ckpt", "--input", "x", "--out", "y", "--report", "z"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_json(&out)["error"], "missing_file");

    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = dualattn(d, &["attn-trace", "--checkpoint", "junk.ckpt", "--input", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(error_json(&out)["error"], "checkpoint");

    let out = dualattn(d, &["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-data"));
}
