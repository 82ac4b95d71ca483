use advreg::attacks::*;
use advreg::data::*;
use advreg::diagnostics::*;
use advreg::experiment::*;
use advreg::models::*;
use advreg::training::*;
use advreg::Error;
use serde_json::Value;

fn toy(n: usize, seed: u64) -> Dataset {
    synth_dataset(SynthKind::GaussianPair { separation: 2.0 }, n, 10, seed).unwrap()
}

fn trained(method: Method, epochs: usize) -> Model {
    let cfg = TrainConfig {
        epochs,
        batch_size: 32,
        ..TrainConfig::for_method(method)
    };
    train(build_mlp(&[10, 16, 2], 1).unwrap(), &toy(400, 1), &cfg).unwrap().0
}

#[test]
fn smoothed_training_loss_is_non_increasing() {
    let ds = toy(400, 2);
    for method in Method::ALL {
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 32,
            ..TrainConfig::for_method(method)
        };
        let (_, report) = train(build_mlp(&[10, 16, 2], 2).unwrap(), &ds, &cfg).unwrap();
        let losses: Vec<f64> = report.epochs.iter().map(|e| e.loss).collect();
        let smooth: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        for w in smooth.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{method}: {losses:?}");
        }
    }
}

#[test]
fn more_steps_do_not_lower_success() {
    let model = trained(Method::Normal, 5);
    let ds = toy(300, 3);
    let short = AttackConfig::linf(0.05, 0.005, 10);
    let long = AttackConfig::linf(0.05, 0.005, 40);
    let a = robust_accuracy(&model, &ds, &short, 3).unwrap();
    let b = robust_accuracy(&model, &ds, &long, 3).unwrap();
    assert!(b <= a + 0.005, "PGD10 {a}, PGD40 {b}");
}

#[test]
fn large_budget_collapses_accuracy() {
    for method in [Method::Normal, Method::Pat] {
        let model = trained(method, 3);
        let ds = toy(200, 4);
        let acc = robust_accuracy(&model, &ds, &AttackConfig::linf(0.6, 0.05, 40), 4).unwrap();
        assert!(acc < 0.01, "{method}: {acc}");
    }
}

#[test]
fn eps_curve_starts_at_clean_accuracy() {
    let model = trained(Method::Normal, 3);
    let ds = toy(100, 5);
    let curve = accuracy_eps_curve(&model, &ds, &[0.0, 8.0 / 255.0], 1, 0).unwrap();
    assert_eq!(curve[0].accuracy, clean_accuracy(&model, &ds).unwrap());
    assert!(curve[1].accuracy <= curve[0].accuracy);
}

#[test]
fn transfer_and_white_box_on_toy_models() {
    let proxy = trained(Method::Normal, 3);
    let target = trained(Method::Entm, 3);
    let ds = toy(100, 6);
    let cfg: AttackConfig = "PGD10-16".parse::<AttackSpec>().unwrap().to_config();
    let black = transfer_attack(&proxy, &target, &ds, &cfg, 0).unwrap();
    let white = robust_accuracy(&target, &ds, &cfg, 0).unwrap();
    assert!((0.0..=1.0).contains(&black));
    assert!(white <= black + 1e-12 || gradient_obfuscation_suspected(white, black));
    let other = build_mlp(&[5, 2], 0).unwrap();
    assert!(transfer_attack(&other, &target, &ds, &cfg, 0).is_err());
}

#[test]
fn diagnostics_records_and_csv() {
    let model = trained(Method::Normal, 3);
    let ds = toy(30, 7);
    let cfg = DiagnoseConfig {
        samples: 10,
        ..DiagnoseConfig::default()
    };
    let records = diagnose(&model, &ds, &cfg, 0).unwrap();
    assert_eq!(records.len(), 10);
    for r in &records {
        assert!(r.spectral_norm >= 0.0);
        if r.margin > 0.0 {
            assert!(r.min_distortion.is_some());
        }
    }
    let mut out = Vec::new();
    write_records_csv(&records, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn surface_grid_csv_has_one_row_per_cell() {
    let model = trained(Method::Normal, 2);
    let ds = toy(5, 8);
    let grid = surface_grid(&model, ds.sample(0), ds.labels()[0], DEFAULT_SURFACE_RANGE, 7, SurfaceQuantity::Loss, 0).unwrap();
    let mut out = Vec::new();
    grid.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "eps1,eps2,value");
    assert_eq!(text.lines().count(), 1 + 49);
}

fn synthetic_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_json(
        r#"{
            "id": "toy",
            "seed": 5,
            "dataset": {"source": "synthetic", "kind": {"kind": "ring"}, "train_n": 200, "test_n": 40, "dim": 6},
            "model": {"arch": "mlp", "sizes": [6, 12, 2]},
            "train": {"method": "pat", "epochs": 2, "batch_size": 32},
            "attacks": ["FGSM8", {"name": "l2", "config": {"norm": "l2", "eps": 0.5, "step_size": 0.1, "steps": 5, "restarts": 1, "init_noise_std": 0.0, "objective": {"kind": "cw"}}}]
        }"#,
    )
    .unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn status(v: &Value) -> &str {
    v["status"].as_str().unwrap()
}

#[test]
fn every_report_field_is_computed_or_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(&tmp.path().join("a"));
    let report = run_experiment(&cfg, tmp.path()).unwrap();
    assert!(!report.partial);
    let v: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("a/report.json")).unwrap()).unwrap();
    assert_eq!(status(&v["training"]), "computed");
    assert_eq!(status(&v["clean_accuracy"]), "computed");
    assert_eq!(status(&v["diagnostics"]), "skipped");
    assert_eq!(v["attacks"].as_array().unwrap().len(), 2);
    for a in v["attacks"].as_array().unwrap() {
        assert_eq!(status(&a["accuracy"]), "computed");
    }
    for f in ["training.csv", "attacks.csv", "model-0.bin"] {
        assert!(tmp.path().join("a").join(f).exists(), "{f}");
    }

    // Re-evaluate the checkpoint without training.
    let mut pre = synthetic_config(&tmp.path().join("b"));
    pre.pretrained = Some(tmp.path().join("a/model-0.bin"));
    pre.diagnostics.enabled = true;
    pre.diagnostics.config.samples = 5;
    let r = run_experiment(&pre, tmp.path()).unwrap();
    assert_eq!(r.method, "pretrained");
    let v: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("b/report.json")).unwrap()).unwrap();
    assert_eq!(status(&v["training"]), "skipped");
    assert_eq!(status(&v["diagnostics"]), "computed");
}

#[test]
fn missing_checkpoint_leaves_partial_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = synthetic_config(&tmp.path().join("out"));
    cfg.pretrained = Some(tmp.path().join("absent.bin"));
    let err = run_experiment(&cfg, tmp.path()).unwrap_err();
    let mut e = &err;
    while let Error::Stage { source, .. } = e {
        e = source;
    }
    assert!(matches!(e, Error::CheckpointNotFound(_)), "{err}");
    let v: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(v["partial"], Value::Bool(true));
    assert!(v["error"].as_str().unwrap().contains("checkpoint not found"));
}

#[test]
fn lambda_sweep_covers_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let base = TrainConfig {
        epochs: 1,
        batch_size: 32,
        ..TrainConfig::for_method(Method::Entm)
    };
    let all = toy(240, 9);
    let train_ds = all.select(&(0..200).collect::<Vec<_>>());
    let test_ds = all.select(&(200..240).collect::<Vec<_>>());
    let spec = ModelSpec::Mlp { sizes: vec![10, 8, 2] };
    let attack = "FGSM8".parse::<AttackSpec>().unwrap().to_config();
    let points = sweep_lambda(&spec, &train_ds, &test_ds, &base, &[0.1, 1.0, 10.0], &attack).unwrap();
    assert_eq!(points.iter().map(|p| p.lambda).collect::<Vec<_>>(), vec![0.1, 1.0, 10.0]);
    drop(tmp);
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap();
        cfg.train.validate().unwrap();
        for a in &cfg.attacks {
            a.resolve().unwrap();
        }
        n += 1;
    }
    assert!(n >= 3);
}
