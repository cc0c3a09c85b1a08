use std::path::Path;
use std::process::{Command, Output};

fn cafuser(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_cafuser"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 10] = [
    "--set",
    "train.epochs=1",
    "--set",
    "model.channels=4,8,12,16",
    "--set",
    "condition.ct_dim=8",
    "--set",
    "condition.text_layers=1",
    "--set",
    "train.batch_size=4",
];

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    cafuser(&["gen-data", "--out", path(&data), "--train", "8", "--val", "8", "--test", "8", "--seed", "3"]);
    for f in ["train.cfd", "val.cfd", "test.cfd", "stats.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let config = dir.path().join("tiny.cfg");
    std::fs::write(&config, "[train]\nseed = 5\n").unwrap();
    let mut args = vec!["train", "--data", path(&data), "--out", path(&run), "--config", path(&config)];
    args.extend(TINY);
    cafuser(&args);
    for f in ["checkpoint.cfw", "config.cfg", "report.json", "train.log"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let cfg = std::fs::read_to_string(run.join("config.cfg")).unwrap();
    assert!(cfg.contains("seed = 5") && cfg.contains("channels = 4,8,12,16"));
    let log = std::fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let trained_test = report["miou"]["test"].as_f64().unwrap();

    cafuser(&["eval", "--data", path(&data), "--run", path(&run)]);
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("eval_test.json")).unwrap()).unwrap();
    assert_eq!(eval["miou"].as_f64().unwrap(), trained_test);

    let out = cafuser(&["report-weights", "--data", path(&data), "--run", path(&run)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("fog-night"));
    assert!(std::fs::read_to_string(run.join("caa_weights.svg")).unwrap().starts_with("<svg"));
    assert_eq!(std::fs::read_to_string(run.join("caa_weights.csv")).unwrap().lines().count(), 9);
}

#[test]
fn ablation_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("ablate");
    cafuser(&["gen-data", "--out", path(&data), "--train", "4", "--val", "0", "--test", "8"]);
    assert!(!data.join("val.cfd").exists());
    let mut args = vec![
        "ablate", "--data", path(&data), "--out", path(&out), "--seeds", "1", "--axes", "modalities",
    ];
    args.extend(TINY);
    cafuser(&args);
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(table.starts_with("axis,value,seed,miou,"));
    assert_eq!(table.lines().count(), 5);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let values: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["C", "CL", "CLR", "CLRE"]);
}

#[test]
fn params_and_gradient_checks() {
    let out = cafuser(&["params"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ratio"));
    let out = cafuser(&["check-grad"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("end_to_end/model_loss") && !text.contains("FAIL"));
}

#[test]
fn bad_input_fails_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_cafuser"))
        .args(["params", "--set", "model.modalities=LR"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = Command::new(env!("CARGO_BIN_EXE_cafuser"))
        .args(["eval", "--data", "/nonexistent", "--run", "/nonexistent"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
