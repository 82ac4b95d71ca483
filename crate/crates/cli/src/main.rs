use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advreg::attacks::{robust_accuracy_runs, transfer_attack, AttackSpec};
use advreg::data::{load_mnist_dir, mnist_dir, Dataset};
use advreg::diagnostics::{
    accuracy_eps_curve, accuracy_steps_curve, diagnose, surface_grid, write_curve_csv, write_records_csv,
    DiagnoseConfig, JacobianMode, SurfaceQuantity,
};
use advreg::experiment::{load_data, run_experiment, sweep_lambda, ExperimentConfig, SWEEP_LAMBDAS};
use advreg::models::{load_checkpoint, Model};
use advreg::training::Method;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "advreg", version, about = "Adversarial robustness laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct EvalData {
    /// Directory holding the MNIST IDX files [default: $ADVREG_MNIST_DIR or ./data/mnist]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of test examples to evaluate (0 = all)
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Seed for attack randomness [default: $ADVREG_SEED or 0]
    #[arg(long)]
    seed: Option<u64>,
}

impl EvalData {
    fn load(&self) -> Result<Dataset> {
        let dir = self.data.clone().unwrap_or_else(|| mnist_dir("."));
        let ds = load_mnist_dir(&dir, false).with_context(|| format!("loading MNIST test set from {}", dir.display()))?;
        Ok(if self.samples == 0 { ds } else { ds.head(self.samples) })
    }

    fn seed(&self) -> Result<u64> {
        Ok(match self.seed {
            Some(s) => s,
            None => seed_from_env()?,
        })
    }
}

fn seed_from_env() -> Result<u64> {
    match std::env::var(advreg::experiment::SEED_ENV) {
        Ok(s) => s.trim().parse().with_context(|| format!("ADVREG_SEED={s:?} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config: train, save checkpoints, evaluate, write reports
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config field, e.g. --set train.lambda=0.5
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Robust accuracy of a checkpoint under an attack such as PGD40-8
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        spec: String,
        /// Independent attack repetitions (mean is reported)
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Override the number of random restarts
        #[arg(long)]
        restarts: Option<usize>,
        #[command(flatten)]
        eval: EvalData,
    },
    /// Accuracy of a target on adversarial examples crafted against a proxy
    Transfer {
        #[arg(long)]
        proxy: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        spec: String,
        #[command(flatten)]
        eval: EvalData,
    },
    /// Per-example margins, Jacobian norms, Q_f and minimal distortions as CSV
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Attack producing X_adv for Q_f
        #[arg(long, default_value = "PGD10-48")]
        q_f_attack: String,
        #[arg(long)]
        skip_min_distortion: bool,
        #[command(flatten)]
        eval: EvalData,
    },
    /// Loss or margin surface around one test example as CSV
    Surface {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long, value_enum, default_value = "loss")]
        quantity: QuantityArg,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
        /// Half-width of the coefficient range
        #[arg(long, default_value_t = 0.04)]
        range: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalData,
    },
    /// Accuracy-ε or accuracy-steps curve as CSV
    Curve {
        #[arg(long)]
        model: PathBuf,
        #[arg(value_enum)]
        kind: CurveKind,
        /// Comma-separated grid: ε in units of 1/255 (eps-curve) or step counts (steps-curve)
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        /// ε in units of 1/255 for steps-curve
        #[arg(long, default_value_t = 8.0)]
        eps: f64,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalData,
    },
    /// Train one model per λ and report clean and robust accuracy as CSV
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, default_value = "PGD10-48")]
        spec: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    PowerIteration,
}

#[derive(Clone, Copy, ValueEnum)]
enum QuantityArg {
    Loss,
    Margin,
}

#[derive(Clone, Copy, ValueEnum)]
enum CurveKind {
    EpsCurve,
    StepsCurve,
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(load_checkpoint(path)?)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn check_input(model: &Model, ds: &Dataset) -> Result<()> {
    if model.input_shape() != ds.sample_shape() {
        bail!(
            "model expects inputs {:?} but the dataset has {:?}",
            model.input_shape(),
            ds.sample_shape()
        );
    }
    Ok(())
}

fn read_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    Ok(ExperimentConfig::from_json_with_overrides(&text, overrides)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides } => {
            let cfg = read_config(&config, &overrides)?;
            let report = run_experiment(&cfg, Path::new("."))?;
            if let Some(c) = report.clean_accuracy.value() {
                println!("clean accuracy {:.4}", c.mean);
            }
            for a in &report.attacks {
                if let Some(m) = a.accuracy.value() {
                    println!("{} accuracy {:.4}", a.name, m.mean);
                }
            }
            println!("report written to {}", cfg.output_dir.join("report.json").display());
        }
        Command::Attack {
            model,
            spec,
            repeats,
            restarts,
            eval,
        } => {
            let spec: AttackSpec = spec.parse()?;
            let m = load_model(&model)?;
            let ds = eval.load()?;
            check_input(&m, &ds)?;
            let mut cfg = spec.to_config();
            if let Some(r) = restarts {
                cfg.restarts = r;
            }
            let runs = robust_accuracy_runs(&m, &ds, &cfg, eval.seed()?, repeats)?;
            let mean = runs.iter().sum::<f64>() / runs.len() as f64;
            println!(
                "{spec} eps={:.6} step={:.6} steps={} restarts={} accuracy {mean:.4}",
                cfg.eps, cfg.step_size, cfg.steps, cfg.restarts
            );
        }
        Command::Transfer {
            proxy,
            target,
            spec,
            eval,
        } => {
            let spec: AttackSpec = spec.parse()?;
            let p = load_model(&proxy)?;
            let t = load_model(&target)?;
            let ds = eval.load()?;
            check_input(&t, &ds)?;
            let cfg = spec.to_config();
            let seed = eval.seed()?;
            let black = transfer_attack(&p, &t, &ds, &cfg, seed)?;
            let white = robust_accuracy_runs(&t, &ds, &cfg, seed, 1)?[0];
            println!("{spec} transfer accuracy {black:.4} white-box accuracy {white:.4}");
            if advreg::attacks::gradient_obfuscation_suspected(white, black) {
                println!("warning: white-box accuracy exceeds black-box accuracy; gradients may be obfuscated");
            }
        }
        Command::Diagnose {
            model,
            out,
            mode,
            q_f_attack,
            skip_min_distortion,
            eval,
        } => {
            let m = load_model(&model)?;
            let ds = eval.load()?;
            check_input(&m, &ds)?;
            let cfg = DiagnoseConfig {
                samples: ds.len(),
                mode: mode.map(|m| match m {
                    ModeArg::Exact => JacobianMode::Exact,
                    ModeArg::PowerIteration => JacobianMode::PowerIteration,
                }),
                q_f_attack: Some(q_f_attack.parse::<AttackSpec>()?.to_config()),
                min_distortion: !skip_min_distortion,
            };
            let records = diagnose(&m, &ds, &cfg, eval.seed()?)?;
            write_records_csv(&records, output(&out)?)?;
        }
        Command::Surface {
            model,
            index,
            quantity,
            resolution,
            range,
            out,
            eval,
        } => {
            let m = load_model(&model)?;
            let ds = eval.load()?;
            check_input(&m, &ds)?;
            if index >= ds.len() {
                bail!("example index {index} out of range for {} examples", ds.len());
            }
            let q = match quantity {
                QuantityArg::Loss => SurfaceQuantity::Loss,
                QuantityArg::Margin => SurfaceQuantity::Margin,
            };
            let grid = surface_grid(&m, ds.sample(index), ds.labels()[index], (-range, range), resolution, q, eval.seed()?)?;
            grid.write_csv(output(&out)?)?;
        }
        Command::Curve {
            model,
            kind,
            grid,
            eps,
            restarts,
            out,
            eval,
        } => {
            let m = load_model(&model)?;
            let ds = eval.load()?;
            check_input(&m, &ds)?;
            let seed = eval.seed()?;
            let points = match kind {
                CurveKind::EpsCurve => {
                    let grid = if grid.is_empty() {
                        vec![0.0, 8.0, 16.0, 32.0, 48.0, 64.0, 96.0, 128.0]
                    } else {
                        grid
                    };
                    let eps_grid: Vec<f64> = grid.iter().map(|k| k / 255.0).collect();
                    accuracy_eps_curve(&m, &ds, &eps_grid, restarts, seed)?
                }
                CurveKind::StepsCurve => {
                    let grid: Vec<usize> = if grid.is_empty() {
                        vec![8, 16, 32, 64, 128, 256]
                    } else {
                        grid.iter().map(|&k| k as usize).collect()
                    };
                    accuracy_steps_curve(&m, &ds, eps / 255.0, &grid, restarts, seed)?.points
                }
            };
            write_curve_csv(&points, output(&out)?)?;
        }
        Command::Sweep {
            config,
            overrides,
            lambdas,
            spec,
            out,
        } => {
            let cfg = read_config(&config, &overrides)?;
            let seed = cfg.resolved_seed()?;
            let (train_ds, test_ds) = load_data(&cfg.dataset, seed, Path::new("."))?;
            let test_ds = if cfg.eval_samples == 0 {
                test_ds
            } else {
                test_ds.head(cfg.eval_samples)
            };
            let mut base = cfg.train.clone();
            base.seed = seed;
            if !matches!(base.method, Method::Entm | Method::PatEntm | Method::TradesEntm) {
                bail!("λ sweep needs an entropy-regularized method, got {}", base.method);
            }
            let lambdas = lambdas.unwrap_or_else(|| SWEEP_LAMBDAS.to_vec());
            let attack = spec.parse::<AttackSpec>()?.to_config();
            let points = sweep_lambda(&cfg.model, &train_ds, &test_ds, &base, &lambdas, &attack)?;
            let mut w = csv::Writer::from_writer(output(&out)?);
            for p in &points {
                w.serialize(p)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn is_missing_checkpoint(e: &anyhow::Error) -> bool {
    fn check(e: &advreg::Error) -> bool {
        match e {
            advreg::Error::CheckpointNotFound(_) => true,
            advreg::Error::Stage { source, .. } => check(source),
            _ => false,
        }
    }
    e.chain().any(|c| c.downcast_ref::<advreg::Error>().is_some_and(check))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_missing_checkpoint(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
