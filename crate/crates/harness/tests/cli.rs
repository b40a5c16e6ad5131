//! The `ashnet` binary: exit codes and output files.

mod common;

use std::process::Command;

fn ashnet(out: &std::path::Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ashnet"));
    cmd.arg("--out").arg(out);
    for o in common::TINY {
        cmd.args(["--set", o]);
    }
    cmd.args(["--set", "model.transformer.d_ff=32"]);
    cmd
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 0}}"#).unwrap();
    let st = Command::new(env!("CARGO_BIN_EXE_ashnet"))
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("epochs"));

    std::fs::write(&cfg, r#"{"model": {"no_such_field": 1}}"#).unwrap();
    let st = Command::new(env!("CARGO_BIN_EXE_ashnet"))
        .args(["eval", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn train_then_eval_and_encode() {
    let dir = tempfile::tempdir().unwrap();
    let st = ashnet(dir.path()).arg("train").output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    for f in ["metrics.csv", "checkpoint_final.bin", "vocab.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }

    let st = ashnet(dir.path()).arg("eval").output().unwrap();
    assert!(st.status.success());
    let r: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert!(r["r_at_1"].as_f64().unwrap() >= 0.0);

    let img = dir.path().join("x.ppm");
    let size = 32;
    let mut bytes = format!("P6\n{size} {size}\n255\n").into_bytes();
    bytes.extend((0..size * size * 3).map(|i| (i % 251) as u8));
    std::fs::write(&img, bytes).unwrap();
    let st = ashnet(dir.path()).arg("encode").arg(&img).output().unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let v: serde_json::Value = serde_json::from_slice(&st.stdout).unwrap();
    assert_eq!(v["shape"], serde_json::json!([1, 16, 32]));
}

#[test]
fn unreadable_image_is_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("broken.ppm");
    std::fs::write(&img, b"P6\n4 4\n").unwrap();
    let st = ashnet(dir.path()).arg("encode").arg(&img).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
}
