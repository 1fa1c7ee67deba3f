//! The `miss` binary end to end: exit codes and command output.

use std::path::Path;
use std::process::{Command, Output};

fn miss(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_miss")).args(args).current_dir(cwd).env("TRANSCAP_CACHE_DIR", cwd.join("cache")).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(miss(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(miss(&["pretrain", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(miss(&[], dir.path()).status.code(), Some(1));
    let missing = miss(&["eval", "--ckpt", "nowhere", "--data", "none.jsonl"], dir.path());
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));
    let bad_set = miss(&["pretrain", "--set", "no_such_key=1"], dir.path());
    assert_eq!(bad_set.status.code(), Some(2));
}

#[test]
fn transcap_with_fixture_llm() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let data = fixtures.join("rsna_rows.csv");
    let fixture = fixtures.join("llm_transcript.json");
    let args = [
        "transcap",
        "--data",
        data.to_str().unwrap(),
        "--backend",
        "llm",
        "--policy",
        "all",
        "--fixture",
        fixture.to_str().unwrap(),
        "--out",
        "pairs.jsonl",
    ];
    let o = miss(&args, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["written"], 4);
    let text = std::fs::read_to_string(dir.path().join("pairs.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().all(|l| l.contains("\"provenance\":\"fixture-llm-1\"")));
    let again = miss(&args, dir.path());
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(dir.path().join("pairs.jsonl")).unwrap(), text);
}

const SMALL: &[&str] = &[
    "--set",
    "model.vision.d=16",
    "--set",
    "model.vision.heads=2",
    "--set",
    "model.vision.ffn_dim=32",
    "--set",
    "model.vision.depth=1",
    "--set",
    "model.jtm={\"depth\":1,\"heads\":2,\"ffn_dim\":32}",
    "--set",
    "model.decoder={\"depth\":1,\"heads\":2,\"ffn_dim\":32}",
    "--set",
    "model.d_proj=8",
    "--set",
    "epochs=2",
    "--set",
    "image_size=16",
];

#[test]
fn synth_train_generate_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = miss(&["synth", "--n", "6", "--image-size", "16", "--out", "data"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["pairs.jsonl", "vqa.jsonl", "attrs.csv", "pretrain.json", "finetune.json"] {
        assert!(d.join("data").join(f).is_file(), "{f}");
    }

    let mut pre = vec!["pretrain", "--config", "data/pretrain.json"];
    pre.extend_from_slice(SMALL);
    let o = miss(&pre, d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["steps"], 2);
    assert!(summary["diagnostics"]["itc_i2t_acc"].is_number());

    let mut fine = vec!["finetune", "--config", "data/finetune.json"];
    fine.extend_from_slice(SMALL);
    fine.extend(["--set", "image_size=32"]);
    let o = miss(&fine, d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let o = miss(&["generate", "--ckpt", "data/ckpt/finetune", "--image", "data/images/img_0000.png", "--question", "what color is the shape?"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 1);

    let o = miss(&["eval", "--ckpt", "data/ckpt/finetune", "--data", "data/vqa.jsonl", "--out", "report.json"], d);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["predictions"].as_array().unwrap().len(), 6);
    assert_eq!(std::fs::read_to_string(d.join("report.json")).unwrap().trim(), stdout(&o).trim());
}
