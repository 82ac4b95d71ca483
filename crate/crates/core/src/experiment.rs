//! Experiment configuration, the train → attack → diagnose pipeline and its
//! JSON/CSV reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::{clean_accuracy, robust_accuracy_runs, AttackConfig, AttackSpec};
use crate::data::{load_mnist_dir, mnist_dir, synth_dataset, Dataset, SynthKind};
use crate::diagnostics::{diagnose, margin_distortion_correlation, mean, write_records_csv, DiagnoseConfig};
use crate::error::{Error, Result};
use crate::models::{build_mlp, build_mnist_cnn, load_checkpoint, save_checkpoint, Model};
use crate::training::{train, EpochStats, TrainConfig};

pub const SEED_ENV: &str = "ADVREG_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// IDX files in `dir` (default: `ADVREG_MNIST_DIR` or `data/mnist`).
    Mnist {
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default = "default_train_subset")]
        train_subset: usize,
        #[serde(default = "default_test_subset")]
        test_subset: usize,
    },
    Synthetic {
        kind: SynthKind,
        train_n: usize,
        test_n: usize,
        dim: usize,
    },
}

fn default_train_subset() -> usize {
    10_000
}

fn default_test_subset() -> usize {
    1_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelSpec {
    MnistCnn,
    Mlp { sizes: Vec<usize> },
}

impl ModelSpec {
    pub fn build(&self, seed: u64) -> Result<Model> {
        match self {
            ModelSpec::MnistCnn => Ok(build_mnist_cnn(seed)),
            ModelSpec::Mlp { sizes } => build_mlp(sizes, seed),
        }
    }
}

/// An evaluation attack: table notation or an explicit configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalAttack {
    Spec(String),
    Custom { name: String, config: AttackConfig },
}

impl EvalAttack {
    pub fn resolve(&self) -> Result<(String, AttackConfig)> {
        match self {
            EvalAttack::Spec(s) => {
                let spec: AttackSpec = s.parse()?;
                Ok((spec.to_string(), spec.to_config()))
            }
            EvalAttack::Custom { name, config } => {
                config.validate()?;
                Ok((name.clone(), *config))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsToggle {
    pub enabled: bool,
    #[serde(flatten)]
    pub config: DiagnoseConfig,
}

impl Default for DiagnosticsToggle {
    fn default() -> Self {
        Self {
            enabled: false,
            config: DiagnoseConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    /// Falls back to `ADVREG_SEED`, then 0.
    #[serde(default)]
    pub seed: Option<u64>,
    pub dataset: DataSource,
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    /// Skip training and evaluate this checkpoint.
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attacks: Vec<EvalAttack>,
    #[serde(default = "one")]
    pub model_repeats: usize,
    #[serde(default = "one")]
    pub attack_repeats: usize,
    /// Test examples used for attacks; 0 means all.
    #[serde(default)]
    pub eval_samples: usize,
    #[serde(default)]
    pub diagnostics: DiagnosticsToggle,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_model() -> ModelSpec {
    ModelSpec::MnistCnn
}

fn one() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Parses `text`, applies `key=value` overrides (dotted paths; values
    /// parsed as JSON, else taken as strings), then deserializes.
    pub fn from_json_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text)?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn resolved_seed(&self) -> Result<u64> {
        match self.seed {
            Some(s) => Ok(s),
            None => match std::env::var(SEED_ENV) {
                Ok(s) => s
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
                Err(_) => Ok(0),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_repeats == 0 || self.attack_repeats == 0 {
            return Err(Error::invalid("repeat counts must be at least 1"));
        }
        if let Some(p) = &self.pretrained {
            if !p.exists() {
                return Err(Error::CheckpointNotFound(p.clone()));
            }
        }
        for a in &self.attacks {
            a.resolve()?;
        }
        self.train.validate()
    }
}

/// Sets `path=value` inside a JSON document, creating objects as needed.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::invalid(format!("bad override key {path:?}")));
    }
    for key in &keys[..keys.len() - 1] {
        if !cur.is_object() {
            return Err(Error::invalid(format!("override {path:?}: {key} is not an object")));
        }
        cur = cur
            .as_object_mut()
            .expect("checked")
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::invalid(format!("override {path:?} does not address an object field"))),
    }
}

/// A report field that is either computed or explicitly skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Field<T> {
    Computed { value: T },
    Skipped { reason: String },
}

impl<T> Field<T> {
    fn skipped(reason: impl Into<String>) -> Self {
        Field::Skipped { reason: reason.into() }
    }

    pub fn value(&self) -> Option<&T> {
        match self {
            Field::Computed { value } => Some(value),
            Field::Skipped { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub mean: f64,
    /// One value per (model, repeat), model-major.
    pub runs: Vec<f64>,
}

impl Measurement {
    fn from_runs(runs: Vec<f64>) -> Self {
        Self {
            mean: runs.iter().sum::<f64>() / runs.len() as f64,
            runs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub name: String,
    pub config: AttackConfig,
    pub accuracy: Field<Measurement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub samples: usize,
    pub mean_margin: f64,
    pub mean_spectral_norm: f64,
    pub mean_normalized_margin: Option<f64>,
    pub mean_q_f: Option<f64>,
    pub mean_min_distortion: Option<f64>,
    pub censored: usize,
    pub margin_distortion_correlation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub version: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment_id: String,
    pub environment: Environment,
    pub method: String,
    pub checkpoints: Vec<String>,
    pub training: Field<Vec<Vec<EpochStats>>>,
    pub clean_accuracy: Field<Measurement>,
    pub attacks: Vec<AttackReport>,
    pub diagnostics: Field<DiagnosticsSummary>,
    /// Set when a stage failed; later fields are skipped.
    pub partial: bool,
    pub error: Option<String>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

pub fn load_data(source: &DataSource, seed: u64, root: &Path) -> Result<(Dataset, Dataset)> {
    match source {
        DataSource::Mnist {
            dir,
            train_subset,
            test_subset,
        } => {
            let dir = dir.clone().unwrap_or_else(|| mnist_dir(root));
            let train = load_mnist_dir(&dir, true)?;
            let test = load_mnist_dir(&dir, false)?;
            let pick = |d: Dataset, n: usize| if n == 0 { d } else { d.head(n) };
            Ok((pick(train, *train_subset), pick(test, *test_subset)))
        }
        DataSource::Synthetic {
            kind,
            train_n,
            test_n,
            dim,
        } => {
            let all = synth_dataset(*kind, train_n + test_n, *dim, seed)?;
            let train: Vec<usize> = (0..*train_n).collect();
            let test: Vec<usize> = (*train_n..train_n + test_n).collect();
            let mut tr = all.select(&train);
            let mut te = all.select(&test);
            tr.split = "train".into();
            te.split = "test".into();
            Ok((tr, te))
        }
    }
}

/// Output paths are relative to `cfg.output_dir`; relative MNIST paths use
/// `root`.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<Report> {
    let seed = cfg.resolved_seed()?;
    let mut report = Report {
        experiment_id: cfg.id.clone(),
        environment: Environment {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
        },
        method: match &cfg.pretrained {
            Some(_) => "pretrained".into(),
            None => cfg.train.method.name().into(),
        },
        checkpoints: Vec::new(),
        training: Field::skipped("not reached"),
        clean_accuracy: Field::skipped("not reached"),
        attacks: Vec::new(),
        diagnostics: Field::skipped("not reached"),
        partial: false,
        error: None,
    };
    let out = cfg.output_dir.clone();
    let result = run_stages(cfg, root, seed, &out, &mut report);
    if let Err(e) = &result {
        report.partial = true;
        report.error = Some(e.to_string());
    }
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    result.map(|_| report)
}

fn run_stages(cfg: &ExperimentConfig, root: &Path, seed: u64, out: &Path, report: &mut Report) -> Result<()> {
    stage("config", cfg.validate())?;
    stage("output", fs::create_dir_all(out).map_err(Error::from))?;
    let (train_ds, test_ds) = stage("data", load_data(&cfg.dataset, seed, root))?;
    let eval_ds = if cfg.eval_samples == 0 {
        test_ds.clone()
    } else {
        test_ds.head(cfg.eval_samples)
    };

    let mut models = Vec::with_capacity(cfg.model_repeats);
    match &cfg.pretrained {
        Some(path) => {
            models.push(stage("load", load_checkpoint(path))?);
            report.checkpoints.push(path.display().to_string());
            report.training = Field::skipped("pretrained checkpoint supplied");
        }
        None => {
            let mut epochs = Vec::new();
            let mut rows = csv::Writer::from_path(out.join("training.csv"))?;
            rows.write_record(["model", "epoch", "lr", "loss", "train_accuracy"])?;
            for r in 0..cfg.model_repeats {
                let model_seed = seed.wrapping_add(r as u64);
                let tcfg = TrainConfig {
                    seed: model_seed,
                    ..cfg.train.clone()
                };
                let init = stage("model", cfg.model.build(model_seed))?;
                let (model, tr) = stage("train", train(init, &train_ds, &tcfg))?;
                let path = out.join(format!("model-{r}.bin"));
                stage("checkpoint", save_checkpoint(&model, &path))?;
                for e in &tr.epochs {
                    rows.write_record([
                        r.to_string(),
                        e.epoch.to_string(),
                        e.lr.to_string(),
                        e.loss.to_string(),
                        e.train_accuracy.to_string(),
                    ])?;
                }
                report.checkpoints.push(format!("model-{r}.bin"));
                epochs.push(tr.epochs);
                models.push(model);
            }
            rows.flush()?;
            report.training = Field::Computed { value: epochs };
        }
    }

    let clean: Vec<f64> = models
        .iter()
        .map(|m| clean_accuracy(m, &test_ds))
        .collect::<Result<_>>()
        .map_err(|e| Error::Stage {
            stage: "clean".into(),
            source: Box::new(e),
        })?;
    report.clean_accuracy = Field::Computed {
        value: Measurement::from_runs(clean),
    };

    let mut attack_rows = csv::Writer::from_path(out.join("attacks.csv"))?;
    attack_rows.write_record(["attack", "model", "repeat", "accuracy"])?;
    for a in &cfg.attacks {
        let (name, acfg) = stage("attack", a.resolve())?;
        report.attacks.push(AttackReport {
            name: name.clone(),
            config: acfg,
            accuracy: Field::skipped("not reached"),
        });
        let mut runs = Vec::new();
        for (mi, m) in models.iter().enumerate() {
            let rs = stage(
                &format!("attack {name}"),
                robust_accuracy_runs(m, &eval_ds, &acfg, seed, cfg.attack_repeats),
            )?;
            for (ri, acc) in rs.iter().enumerate() {
                attack_rows.write_record([name.clone(), mi.to_string(), ri.to_string(), acc.to_string()])?;
            }
            runs.extend(rs);
        }
        report.attacks.last_mut().expect("pushed").accuracy = Field::Computed {
            value: Measurement::from_runs(runs),
        };
    }
    attack_rows.flush()?;

    report.diagnostics = if cfg.diagnostics.enabled {
        let records = stage("diagnostics", diagnose(&models[0], &eval_ds, &cfg.diagnostics.config, seed))?;
        stage(
            "diagnostics",
            write_records_csv(&records, fs::File::create(out.join("diagnostics.csv"))?),
        )?;
        Field::Computed {
            value: DiagnosticsSummary {
                samples: records.len(),
                mean_margin: mean(records.iter().map(|r| r.margin)).unwrap_or(f64::NAN),
                mean_spectral_norm: mean(records.iter().map(|r| r.spectral_norm)).unwrap_or(f64::NAN),
                mean_normalized_margin: mean(records.iter().filter_map(|r| r.normalized_margin)),
                mean_q_f: mean(records.iter().filter_map(|r| r.q_f)),
                mean_min_distortion: mean(records.iter().filter_map(|r| r.min_distortion)),
                censored: records.iter().filter(|r| r.censored).count(),
                margin_distortion_correlation: margin_distortion_correlation(&records).ok(),
            },
        }
    } else {
        Field::skipped("diagnostics disabled")
    };
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
}

pub const SWEEP_LAMBDAS: [f64; 6] = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0];

/// Trains one model per λ with `base` and evaluates it on `test` under
/// `attack`.
pub fn sweep_lambda(
    spec: &ModelSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    base: &TrainConfig,
    lambdas: &[f64],
    attack: &AttackConfig,
) -> Result<Vec<SweepPoint>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = TrainConfig {
                lambda,
                ..base.clone()
            };
            let (m, _) = train(spec.build(cfg.seed)?, train_ds, &cfg)?;
            Ok(SweepPoint {
                lambda,
                clean_accuracy: clean_accuracy(&m, test_ds)?,
                robust_accuracy: robust_accuracy_runs(&m, test_ds, attack, cfg.seed, 1)?[0],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_set_nested_values() {
        let mut v = json!({"train": {"lambda": 2.0}, "id": "x"});
        apply_override(&mut v, "train.lambda=0.5").unwrap();
        apply_override(&mut v, "train.method=pat-entm").unwrap();
        apply_override(&mut v, "dataset.train_subset=100").unwrap();
        assert_eq!(v["train"]["lambda"], json!(0.5));
        assert_eq!(v["train"]["method"], json!("pat-entm"));
        assert_eq!(v["dataset"]["train_subset"], json!(100));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "id.x=1").is_err());
    }

    #[test]
    fn config_defaults_and_attacks() {
        let cfg = ExperimentConfig::from_json(
            r#"{"id": "t", "seed": 3, "dataset": {"source": "mnist"},
                "attacks": ["PGD10-48", {"name": "l2", "config": {"norm": "l2", "eps": 0.5, "step_size": 0.05, "steps": 20}}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.model, ModelSpec::MnistCnn);
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.attacks[0].resolve().unwrap().0, "PGD10-48");
        assert_eq!(cfg.attacks[1].resolve().unwrap().1.restarts, 5);
        assert_eq!(cfg.resolved_seed().unwrap(), 3);
        assert!(matches!(
            cfg.dataset,
            DataSource::Mnist {
                train_subset: 10_000,
                test_subset: 1_000,
                ..
            }
        ));
    }

    #[test]
    fn bad_attack_rejected_before_running() {
        let mut cfg = ExperimentConfig::from_json(r#"{"id": "t", "dataset": {"source": "mnist"}}"#).unwrap();
        cfg.attacks.push(EvalAttack::Spec("PGDX".into()));
        assert!(matches!(cfg.validate(), Err(Error::AttackSpec(_))));
    }
}
