mod common;

use std::path::Path;
use std::process::Command;

use common::*;
use teocc::TrainConfig;

fn teocc(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_teocc")).args(args).output().unwrap();
    assert!(out.status.success(), "teocc {:?} failed:\n{}", args, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let cfg = TrainConfig { data_dir: s(&data).into(), steps: 2, eval_every: 0, ..tiny_config() };
    let cfg_path = root.join("train.toml");
    write_config(&cfg, &cfg_path);

    teocc(&["gen-data", "--config", s(&cfg_path), "--out", s(&data), "--episodes", "3", "--seed", "100"]);
    assert!(data.join("episode_0002").join("manifest.json").exists());

    let run = root.join("run");
    let msg = teocc(&["train", "--config", s(&cfg_path), "--out", s(&run)]);
    assert!(msg.contains("val mIoU"), "{}", msg);
    for f in ["checkpoint.json", "metrics.ndjson", "report.json", "config.toml"] {
        assert!(run.join(f).exists(), "{} missing", f);
    }

    let table = teocc(&["eval", "--checkpoint", s(&run), "--data", s(&data)]);
    assert!(table.lines().last().unwrap().starts_with("mIoU"), "{}", table);
    assert_eq!(table.lines().count(), 7);

    let pred = root.join("pred");
    teocc(&["infer", "--checkpoint", s(&run.join("checkpoint.json")), "--episode", s(&data.join("episode_0000")), "--frame", "3", "--out", s(&pred)]);
    for f in ["logits.teoc", "labels.teoc", "grid.json"] {
        assert!(pred.join(f).exists(), "{} missing", f);
    }

    let viz = root.join("pred.txt");
    teocc(&["export-viz", "--in", s(&pred), "--out", s(&viz)]);
    let text = std::fs::read_to_string(&viz).unwrap();
    assert!(text.starts_with("teocc-voxels v1 count="));
    let gt = root.join("gt.txt");
    teocc(&["export-viz", "--in", s(&data.join("episode_0001")), "--frame", "0", "--out", s(&gt)]);
    let n: usize = std::fs::read_to_string(&gt).unwrap().lines().next().unwrap()["teocc-voxels v1 count=".len()..].parse().unwrap();
    assert!(n > 0);

    let report = root.join("ablation.json");
    let out = teocc(&["ablate", "--config", s(&cfg_path), "--variants", "baseline,long+short+random", "--seeds", "1", "--out", s(&report)]);
    assert!(out.contains("baseline") && out.contains("train overhead"), "{}", out);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    std::fs::write(&cfg_path, "stepz = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_teocc")).args(["train", "--config", s(&cfg_path)]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    let out = Command::new(env!("CARGO_BIN_EXE_teocc"))
        .args(["ablate", "--config", s(&cfg_path), "--variants", "bogus"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown variant"));
}
