use std::path::Path;
use std::process::{Command, Output};

use advreg::models::{build_mnist_cnn, save_checkpoint};

fn advreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advreg"))
        .args(args)
        .env_remove("ADVREG_SEED")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes a tiny IDX test split of random 28x28 digits.
fn fake_mnist(dir: &Path, n: u32) {
    let mut images = Vec::new();
    for v in [2051u32, n, 28, 28] {
        images.extend(v.to_be_bytes());
    }
    images.extend((0..n * 784).map(|i| (i.wrapping_mul(2_654_435_761) >> 24) as u8));
    let mut labels = Vec::new();
    for v in [2049u32, n] {
        labels.extend(v.to_be_bytes());
    }
    labels.extend((0..n).map(|i| (i % 10) as u8));
    std::fs::write(dir.join("t10k-images-idx3-ubyte"), images).unwrap();
    std::fs::write(dir.join("t10k-labels-idx1-ubyte"), labels).unwrap();
}

fn fixture() -> (tempfile::TempDir, String, String) {
    let tmp = tempfile::tempdir().unwrap();
    fake_mnist(tmp.path(), 6);
    let model = tmp.path().join("cnn.bin");
    save_checkpoint(&build_mnist_cnn(0), &model).unwrap();
    let m = model.to_str().unwrap().to_string();
    let d = tmp.path().to_str().unwrap().to_string();
    (tmp, m, d)
}

#[test]
fn missing_checkpoint_exits_2() {
    let o = advreg(&["attack", "--model", "/nonexistent/model.bin", "--spec", "PGD10-8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint not found"), "{}", stderr(&o));
}

#[test]
fn missing_pretrained_in_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"id": "x", "dataset": {{"source": "mnist"}}, "pretrained": "/nonexistent.bin", "output_dir": "{}"}}"#,
            tmp.path().join("out").display()
        ),
    )
    .unwrap();
    let o = advreg(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("checkpoint not found"));
}

#[test]
fn unknown_subcommand_exits_2() {
    let o = advreg(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_attack_spec_is_a_one_line_error() {
    let (_tmp, model, data) = fixture();
    let o = advreg(&["attack", "--model", &model, "--spec", "PGD-8", "--data", &data]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim().lines().count(), 1, "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn attack_reports_accuracy() {
    let (_tmp, model, data) = fixture();
    for spec in ["PGD10-8", "FGSM4"] {
        let o = advreg(&["attack", "--model", &model, "--spec", spec, "--data", &data, "--samples", "4"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        assert!(out.starts_with(spec), "{out}");
        assert!(out.contains("accuracy"));
    }
    let o = advreg(&["attack", "--model", &model, "--spec", "pgd10-8", "--data", &data, "--restarts", "1"]);
    assert!(stdout(&o).contains("restarts=1"));
}

#[test]
fn curve_writes_csv() {
    let (tmp, model, data) = fixture();
    let out = tmp.path().join("curve.csv");
    let o = advreg(&[
        "curve",
        "--model",
        &model,
        "eps-curve",
        "--grid",
        "0,4",
        "--data",
        &data,
        "--samples",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn train_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    let out = tmp.path().join("run");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"id": "toy", "seed": 1,
                "dataset": {{"source": "synthetic", "kind": {{"kind": "gaussian_pair", "separation": 2.0}}, "train_n": 64, "test_n": 16, "dim": 4}},
                "model": {{"arch": "mlp", "sizes": [4, 2]}},
                "attacks": ["FGSM8"],
                "output_dir": "{}"}}"#,
            out.display()
        ),
    )
    .unwrap();
    let o = advreg(&["train", "--config", cfg.to_str().unwrap(), "--set", "train.epochs=1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["training"]["value"][0].as_array().unwrap().len(), 1);
}
