//! SGD with momentum and the training methods: Normal, EntM, LS, PAT,
//! PAT-EntM, PAT-LS, TRADES and TRADES-EntM.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_batch, stream_seed, AttackConfig, AttackObjective};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{record_loss, record_trades, LossKind};
use crate::models::{argmax, Model, Param};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "entm")]
    Entm,
    #[serde(rename = "ls")]
    Ls,
    #[serde(rename = "pat")]
    Pat,
    #[serde(rename = "pat-entm")]
    PatEntm,
    #[serde(rename = "pat-ls")]
    PatLs,
    #[serde(rename = "trades")]
    Trades,
    #[serde(rename = "trades-entm")]
    TradesEntm,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Normal,
        Method::Entm,
        Method::Ls,
        Method::Pat,
        Method::PatEntm,
        Method::PatLs,
        Method::Trades,
        Method::TradesEntm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Normal => "normal",
            Method::Entm => "entm",
            Method::Ls => "ls",
            Method::Pat => "pat",
            Method::PatEntm => "pat-entm",
            Method::PatLs => "pat-ls",
            Method::Trades => "trades",
            Method::TradesEntm => "trades-entm",
        }
    }

    pub fn is_adversarial(self) -> bool {
        !matches!(self, Method::Normal | Method::Entm | Method::Ls)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace('_', "-");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == t)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Piecewise-constant learning rate: `initial · decay^(#decay_epochs ≤ epoch)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub decay_epochs: Vec<usize>,
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.initial * self.decay.powi(n as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.01,
            decay: 0.1,
            decay_epochs: vec![20],
        }
    }
}

pub fn lr_schedule(epoch: usize, schedule: &LrSchedule) -> f64 {
    schedule.rate(epoch)
}

/// Which loss the inner maximization of the PAT family ascends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerObjective {
    TrainingLoss,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub lambda: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub inner: AttackConfig,
    pub inner_objective: InnerObjective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Normal,
            lambda: 2.0,
            gamma: 0.74,
            alpha: 0.5,
            beta: 3.0,
            inner: default_inner(),
            inner_objective: InnerObjective::TrainingLoss,
            epochs: 5,
            batch_size: 128,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// MNIST inner adversary: ε = 48/255, step 6/255, 10 steps, one random start.
pub fn default_inner() -> AttackConfig {
    AttackConfig::linf(48.0 / 255.0, 6.0 / 255.0, 10).with_restarts(1)
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("α must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("γ must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.lambda >= 0.0) || !(self.beta >= 0.0) {
            return bad(format!("λ and β must be non-negative, got {} and {}", self.lambda, self.beta));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr.initial > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr.initial));
        }
        if self.method.is_adversarial() {
            self.inner.validate()?;
        }
        Ok(())
    }

    /// Loss applied to the clean (and, for PAT, adversarial) inputs.
    pub fn loss_kind(&self) -> LossKind {
        match self.method {
            Method::Normal | Method::Pat | Method::Trades => LossKind::CrossEntropy,
            Method::Entm | Method::PatEntm | Method::TradesEntm => LossKind::Entm { lambda: self.lambda },
            Method::Ls | Method::PatLs => LossKind::Smoothed { gamma: self.gamma },
        }
    }

    /// Attack configuration used to generate training-time adversarial inputs.
    pub fn inner_attack(&self) -> AttackConfig {
        let objective = match self.method {
            Method::Trades | Method::TradesEntm => AttackObjective::KlToClean,
            _ => match self.inner_objective {
                InnerObjective::TrainingLoss => self.loss_kind().into(),
                InnerObjective::CrossEntropy => AttackObjective::CrossEntropy,
            },
        };
        self.inner.with_objective(objective)
    }
}

/// One SGD step with momentum and L2 weight decay:
/// `v ← μ·v + g + wd·θ`, `θ ← θ - lr·v`. `velocity` starts empty.
pub fn sgd_step(
    params: &mut [Param],
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut Vec<Tensor>,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("sgd", format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape(
                "sgd",
                format!("gradient {:?} for parameter {} {:?}", g.shape(), p.name, p.value.shape()),
            ));
        }
    }
    if velocity.is_empty() {
        *velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let theta = p.value.data_mut();
        for ((t, &gi), vi) in theta.iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *t;
            *t -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    /// Accuracy of the running model on the clean training batches.
    pub train_accuracy: f64,
    pub robust_probe: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub epochs: Vec<EpochStats>,
    pub checkpoint: Option<String>,
}

struct BatchOutcome {
    grads: Vec<Tensor>,
    loss: f64,
    components: Vec<(&'static str, f64)>,
    correct: usize,
}

fn mean(t: &Tensor) -> f64 {
    t.sum() / t.numel() as f64
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels.iter().enumerate().filter(|&(k, &y)| argmax(logits.row(k)) == y).count()
}

fn collect_grads(tape: &Tape, total: crate::tensor::NodeId, params: &[crate::tensor::NodeId]) -> Result<Vec<Tensor>> {
    let mut g = tape.backward(total)?;
    Ok(params
        .iter()
        .map(|&p| g.take(p).unwrap_or_else(|| Tensor::zeros(tape.value(p).shape())))
        .collect())
}

fn clean_batch(model: &Model, x: Tensor, labels: &[usize], kind: LossKind) -> Result<BatchOutcome> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let xi = tape.constant(x);
    let z = model.forward(&mut tape, xi, &params)?;
    let nodes = record_loss(&mut tape, z, labels, kind)?;
    let total = tape.mean(nodes.total)?;
    let mut components = Vec::new();
    for (name, id) in [("ce", nodes.ce), ("entropy", nodes.entropy), ("smoothed_ce", nodes.smoothed_ce)] {
        if let Some(id) = id {
            components.push((name, mean(tape.value(id))));
        }
    }
    Ok(BatchOutcome {
        loss: tape.value(total).item().expect("scalar"),
        correct: count_correct(tape.value(z), labels),
        grads: collect_grads(&tape, total, &params)?,
        components,
    })
}

/// `α·mean L(X) + (1-α)·mean L(X_adv)`, evaluated as one stacked batch.
fn pat_batch(model: &Model, x: &Tensor, x_adv: &Tensor, labels: &[usize], kind: LossKind, alpha: f64) -> Result<BatchOutcome> {
    let b = labels.len();
    let mut data = x.data().to_vec();
    data.extend_from_slice(x_adv.data());
    let stacked = Tensor::new(model.batch_shape(2 * b), data)?;
    let mut both = labels.to_vec();
    both.extend_from_slice(labels);
    let mut w = vec![alpha / b as f64; b];
    w.extend(std::iter::repeat_n((1.0 - alpha) / b as f64, b));

    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let xi = tape.constant(stacked);
    let z = model.forward(&mut tape, xi, &params)?;
    let nodes = record_loss(&mut tape, z, &both, kind)?;
    let wi = tape.constant(Tensor::vector(w));
    let weighted = tape.mul(nodes.total, wi)?;
    let total = tape.sum(weighted)?;
    let per = tape.value(nodes.total).data();
    let clean = per[..b].iter().sum::<f64>() / b as f64;
    let adv = per[b..].iter().sum::<f64>() / b as f64;
    let zc = Tensor::new(vec![b, model.num_classes()], tape.value(z).data()[..b * model.num_classes()].to_vec())?;
    Ok(BatchOutcome {
        loss: tape.value(total).item().expect("scalar"),
        correct: count_correct(&zc, labels),
        grads: collect_grads(&tape, total, &params)?,
        components: vec![("clean", clean), ("adversarial", adv)],
    })
}

fn trades_batch(model: &Model, x: Tensor, x_adv: Tensor, labels: &[usize], clean: LossKind, beta: f64) -> Result<BatchOutcome> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let xi = tape.constant(x);
    let xa = tape.constant(x_adv);
    let (per, clean_node, kl) = record_trades(&mut tape, model, &params, xi, xa, labels, beta, clean)?;
    let total = tape.mean(per)?;
    let clean_logits = model.logits(tape.value(xi))?;
    Ok(BatchOutcome {
        loss: tape.value(total).item().expect("scalar"),
        correct: count_correct(&clean_logits, labels),
        components: vec![("clean", mean(tape.value(clean_node))), ("kl", mean(tape.value(kl)))],
        grads: collect_grads(&tape, total, &params)?,
    })
}

/// Trains `model` on `dataset`; deterministic in (`model`, `dataset`, `cfg`).
pub fn train(mut model: Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if dataset.sample_shape() != model.input_shape() {
        return Err(Error::shape(
            "train",
            format!("dataset samples {:?} vs model input {:?}", dataset.sample_shape(), model.input_shape()),
        ));
    }
    let kind = cfg.loss_kind();
    let inner = cfg.inner_attack();
    let mut velocity = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.rate(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut comp_sum: BTreeMap<String, f64> = BTreeMap::new();
        let mut correct = 0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = dataset.batch(idx);
            let out = if cfg.method.is_adversarial() {
                let attack_seed = stream_seed(cfg.seed ^ 0xA77A_C4ED, epoch as u64, bi as u64);
                let adv = pgd_batch(&model, &x, &labels, &inner, attack_seed, 0)?;
                let mut data = Vec::with_capacity(x.numel());
                for r in &adv {
                    data.extend_from_slice(&r.x_adv);
                }
                let x_adv = Tensor::new(x.shape().to_vec(), data)?;
                match cfg.method {
                    Method::Trades | Method::TradesEntm => trades_batch(&model, x, x_adv, &labels, kind, cfg.beta)?,
                    _ => pat_batch(&model, &x, &x_adv, &labels, kind, cfg.alpha)?,
                }
            } else {
                clean_batch(&model, x, &labels, kind)?
            };
            let n = idx.len() as f64;
            loss_sum += out.loss * n;
            for (name, v) in out.components {
                *comp_sum.entry(name.to_string()).or_default() += v * n;
            }
            correct += out.correct;
            sgd_step(model.params_mut(), &out.grads, lr, cfg.momentum, cfg.weight_decay, &mut velocity)?;
        }
        let n = dataset.len() as f64;
        let stats = EpochStats {
            epoch,
            lr,
            loss: loss_sum / n,
            components: comp_sum.into_iter().map(|(k, v)| (k, v / n)).collect(),
            train_accuracy: correct as f64 / n,
            robust_probe: None,
        };
        log::info!(
            "{} epoch {}: loss {:.4}, train accuracy {:.4}",
            cfg.method,
            epoch,
            stats.loss,
            stats.train_accuracy
        );
        epochs.push(stats);
    }
    model.metadata.method = cfg.method.name().to_string();
    model.metadata.seed = cfg.seed;
    let uses = |m: &[Method]| m.contains(&cfg.method);
    model.metadata.lambda = uses(&[Method::Entm, Method::PatEntm, Method::TradesEntm]).then_some(cfg.lambda);
    model.metadata.gamma = uses(&[Method::Ls, Method::PatLs]).then_some(cfg.gamma);
    model.metadata.alpha = uses(&[Method::Pat, Method::PatEntm, Method::PatLs]).then_some(cfg.alpha);
    model.metadata.beta = uses(&[Method::Trades, Method::TradesEntm]).then_some(cfg.beta);
    Ok((
        model,
        TrainReport {
            method: cfg.method,
            epochs,
            checkpoint: None,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthKind};
    use crate::models::build_mlp;

    fn scalar_param(v: f64) -> Vec<Param> {
        vec![Param {
            name: "theta".into(),
            value: Tensor::vector(vec![v]),
        }]
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let mut p = scalar_param(0.7);
        let mut v = Vec::new();
        sgd_step(&mut p, &[Tensor::vector(vec![0.0])], 0.1, 0.9, 0.0, &mut v).unwrap();
        assert_eq!(p[0].value.data(), &[0.7]);
    }

    #[test]
    fn sgd_on_square() {
        let mut p = scalar_param(1.0);
        let mut v = Vec::new();
        sgd_step(&mut p, &[Tensor::vector(vec![2.0])], 0.1, 0.9, 0.0, &mut v).unwrap();
        assert!((p[0].value.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = scalar_param(0.0);
        let mut v = Vec::new();
        let g = [Tensor::vector(vec![1.0])];
        sgd_step(&mut p, &g, 1.0, 0.9, 0.0, &mut v).unwrap();
        let first = -p[0].value.data()[0];
        sgd_step(&mut p, &g, 1.0, 0.9, 0.0, &mut v).unwrap();
        let second = -p[0].value.data()[0] - first;
        assert!((second - 1.9).abs() < 1e-15 && second > first);
        assert!(sgd_step(&mut p, &[Tensor::vector(vec![1.0, 2.0])], 1.0, 0.9, 0.0, &mut v).is_err());
    }

    #[test]
    fn schedules() {
        let mnist = LrSchedule::default();
        assert_eq!(lr_schedule(0, &mnist), 0.01);
        assert_eq!(lr_schedule(19, &mnist), 0.01);
        assert!((lr_schedule(20, &mnist) - 0.001).abs() < 1e-18);
        let at = LrSchedule {
            initial: 0.1,
            decay: 0.1,
            decay_epochs: vec![60, 84, 100],
        };
        assert!((lr_schedule(100, &at) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Method>(&json).unwrap(), m);
        }
        assert_eq!("PAT_EntM".parse::<Method>().unwrap(), Method::PatEntm);
        assert!(matches!("adp".parse::<Method>(), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.alpha = 1.5;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            beta: -1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), TrainConfig::default());
        let partial: TrainConfig = serde_json::from_str(r#"{"method": "pat-entm", "epochs": 2}"#).unwrap();
        assert_eq!(partial.method, Method::PatEntm);
        assert_eq!(partial.lambda, 2.0);
    }

    fn toy() -> Dataset {
        synth_dataset(SynthKind::GaussianPair { separation: 6.0 }, 64, 4, 1).unwrap()
    }

    fn quick(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            epochs: 3,
            batch_size: 16,
            lr: LrSchedule {
                initial: 0.1,
                decay: 0.1,
                decay_epochs: vec![],
            },
            inner: AttackConfig::linf(0.05, 0.02, 3).with_restarts(1),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn every_method_trains_and_records_epochs() {
        for m in Method::ALL {
            let (model, report) = train(build_mlp(&[4, 8, 2], 3).unwrap(), &toy(), &quick(m)).unwrap();
            assert_eq!(report.epochs.len(), 3, "{m}");
            assert_eq!(model.metadata.method, m.name());
            assert!(report.epochs.iter().all(|e| e.loss.is_finite()));
        }
    }

    #[test]
    fn pat_with_zero_budget_matches_normal() {
        let mut pat = quick(Method::Pat);
        pat.inner.eps = 0.0;
        let (a, _) = train(build_mlp(&[4, 8, 2], 3).unwrap(), &toy(), &pat).unwrap();
        let (b, _) = train(build_mlp(&[4, 8, 2], 3).unwrap(), &toy(), &quick(Method::Normal)).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            for (u, v) in p.value.data().iter().zip(q.value.data()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let cfg = quick(Method::PatEntm);
        let (a, ra) = train(build_mlp(&[4, 8, 2], 3).unwrap(), &toy(), &cfg).unwrap();
        let (b, rb) = train(build_mlp(&[4, 8, 2], 3).unwrap(), &toy(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }
}
