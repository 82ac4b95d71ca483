//! Norm-bounded evasion attacks: FGSM, PGD (L∞/L2) with CE, CW-margin and
//! smoothed-label objectives, random search, minimal-distortion search and
//! transfer evaluation.
//!
//! Every iterate is projected onto the ε-ball around the clean input and then
//! clipped to [0, 1]^d; feasibility is asserted after each step.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{record_loss, LossKind};
use crate::models::{argmax, Model};
use crate::tensor::{forward_primitive, Primitive, Tape, Tensor};

/// Slack allowed on the norm bound for floating-point rounding.
pub const FEASIBILITY_TOL: f64 = 1e-12;
pub const DEFAULT_RESTARTS: usize = 5;
pub const DEFAULT_INIT_NOISE_STD: f64 = 0.005;
/// Examples per forward/backward batch when attacking a dataset.
pub const ATTACK_BATCH: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn measure(self, delta: impl Iterator<Item = f64>) -> f64 {
        match self {
            Norm::Linf => delta.fold(0.0, |m, v| m.max(v.abs())),
            Norm::L2 => delta.map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        self.measure(a.iter().zip(b).map(|(x, y)| x - y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackObjective {
    CrossEntropy,
    /// Logit margin `max_{i≠y} Z_i - Z_y`.
    Cw,
    SmoothedCe { gamma: f64 },
    /// `CE - λ·H`, the EntM training loss.
    Entm { lambda: f64 },
    /// `KL(f_σ(X') ‖ f_σ(X))` against the clean prediction.
    KlToClean,
}

impl AttackObjective {
    fn loss_kind(self) -> Option<LossKind> {
        match self {
            AttackObjective::CrossEntropy => Some(LossKind::CrossEntropy),
            AttackObjective::Cw => Some(LossKind::CwMargin),
            AttackObjective::SmoothedCe { gamma } => Some(LossKind::Smoothed { gamma }),
            AttackObjective::Entm { lambda } => Some(LossKind::Entm { lambda }),
            AttackObjective::KlToClean => None,
        }
    }
}

impl From<LossKind> for AttackObjective {
    fn from(k: LossKind) -> Self {
        match k {
            LossKind::CrossEntropy => AttackObjective::CrossEntropy,
            LossKind::CwMargin => AttackObjective::Cw,
            LossKind::Smoothed { gamma } => AttackObjective::SmoothedCe { gamma },
            LossKind::Entm { lambda } => AttackObjective::Entm { lambda },
        }
    }
}

/// Untargeted attack parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub eps: f64,
    pub step_size: f64,
    pub steps: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_noise")]
    pub init_noise_std: f64,
    #[serde(default = "default_objective")]
    pub objective: AttackObjective,
}

fn default_restarts() -> usize {
    DEFAULT_RESTARTS
}

fn default_noise() -> f64 {
    DEFAULT_INIT_NOISE_STD
}

fn default_objective() -> AttackObjective {
    AttackObjective::CrossEntropy
}

impl AttackConfig {
    pub fn linf(eps: f64, step_size: f64, steps: usize) -> Self {
        Self {
            norm: Norm::Linf,
            eps,
            step_size,
            steps,
            restarts: DEFAULT_RESTARTS,
            init_noise_std: DEFAULT_INIT_NOISE_STD,
            objective: AttackObjective::CrossEntropy,
        }
    }

    pub fn l2(eps: f64, step_size: f64, steps: usize) -> Self {
        Self {
            norm: Norm::L2,
            ..Self::linf(eps, step_size, steps)
        }
    }

    /// Single sign step of size ε from the clean point.
    pub fn fgsm(eps: f64) -> Self {
        Self {
            restarts: 1,
            init_noise_std: 0.0,
            ..Self::linf(eps, eps, 1)
        }
    }

    pub fn with_objective(mut self, objective: AttackObjective) -> Self {
        self.objective = objective;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_init_noise(mut self, std: f64) -> Self {
        self.init_noise_std = std;
        self
    }

    /// ε = 0 is accepted and yields clean evaluation.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return bad(format!("ε must be finite and non-negative, got {}", self.eps));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be positive, got {}", self.step_size));
        }
        if self.steps == 0 || self.restarts == 0 {
            return bad("steps and restarts must be at least 1".into());
        }
        if !(self.init_noise_std >= 0.0) {
            return bad(format!("init noise std must be non-negative, got {}", self.init_noise_std));
        }
        if let AttackObjective::SmoothedCe { gamma } = self.objective {
            if !(0.0..=1.0).contains(&gamma) {
                return bad(format!("γ must lie in [0, 1], got {gamma}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    /// Prediction at `x_adv` differs from the label.
    pub success: bool,
    pub prediction: usize,
    pub restarts: usize,
    /// Attack objective at `x_adv`.
    pub objective: f64,
    /// `max_{i≠y} Z_i - Z_y` at `x_adv`.
    pub cw_margin: f64,
    /// `‖x_adv - x‖` in the attack norm.
    pub distortion: f64,
}

impl AttackResult {
    fn beats(&self, other: &AttackResult) -> bool {
        (self.success && !other.success) || (self.success == other.success && self.objective > other.objective)
    }
}

/// Derives an independent stream seed for one (example, restart) pair.
pub fn stream_seed(seed: u64, example: u64, restart: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(seed) ^ example) ^ restart.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// CW margin `max_{i≠y} Z_i - Z_y` and its gradient with respect to the logits.
pub fn cw_objective(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
    let (runner, best) = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .fold((usize::MAX, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let mut seed = vec![0.0; logits.len()];
    if runner != usize::MAX {
        seed[runner] = 1.0;
    }
    seed[y] = -1.0;
    (best - logits[y], seed)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `cur` onto the ε-ball around `x0`, then clips to [0, 1].
pub fn project(norm: Norm, x0: &[f64], cur: &mut [f64], eps: f64) {
    match norm {
        Norm::Linf => {
            for (c, &o) in cur.iter_mut().zip(x0) {
                *c = c.clamp(o - eps, o + eps).clamp(0.0, 1.0);
            }
        }
        Norm::L2 => {
            let n = Norm::L2.distance(cur, x0);
            if n > eps {
                let s = if n > 0.0 { eps / n } else { 0.0 };
                for (c, &o) in cur.iter_mut().zip(x0) {
                    *c = o + (*c - o) * s;
                }
            }
            for c in cur.iter_mut() {
                *c = c.clamp(0.0, 1.0);
            }
        }
    }
}

pub fn is_feasible(norm: Norm, x0: &[f64], x: &[f64], eps: f64) -> bool {
    x.iter().all(|v| (0.0..=1.0).contains(v)) && norm.distance(x, x0) <= eps + FEASIBILITY_TOL
}

fn ascend(norm: Norm, cur: &mut [f64], g: &[f64], step: f64) {
    match norm {
        Norm::Linf => {
            for (c, &gi) in cur.iter_mut().zip(g) {
                *c += step * sign(gi);
            }
        }
        Norm::L2 => {
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for (c, &gi) in cur.iter_mut().zip(g) {
                    *c += step * gi / n;
                }
            }
        }
    }
}

struct Evaluation {
    logits: Tensor,
    values: Vec<f64>,
    grad: Option<Tensor>,
}

fn evaluate(
    model: &Model,
    x: Tensor,
    labels: &[usize],
    objective: AttackObjective,
    clean_logp: Option<Tensor>,
    want_grad: bool,
) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let xi = tape.leaf(x, want_grad);
    let z = model.forward(&mut tape, xi, &params)?;
    let per = match objective.loss_kind() {
        Some(kind) => record_loss(&mut tape, z, labels, kind)?.total,
        None => {
            let lp = tape.log_softmax(z)?;
            let q = tape.constant(clean_logp.expect("clean prediction supplied for KL objective"));
            tape.kl_div(lp, q)?
        }
    };
    let values = tape.value(per).data().to_vec();
    let logits = tape.value(z).clone();
    let grad = if want_grad {
        let s = tape.sum(per)?;
        Some(tape.backward(s)?.take(xi).expect("input requires grad"))
    } else {
        None
    };
    Ok(Evaluation { logits, values, grad })
}

fn gather(x: &Tensor, rows: &[usize], shape_tail: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * x.row_len());
    for &i in rows {
        data.extend_from_slice(x.row(i));
    }
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(shape_tail);
    Tensor::new(shape, data).expect("gathered rows match shape")
}

/// PGD over a batch with per-example budgets and step sizes. Restarts stop
/// early for examples that are already misclassified; among failed restarts
/// the highest objective wins.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pgd_core(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    eps: &[f64],
    step: &[f64],
    cfg: &AttackConfig,
    seed: u64,
    ids: &[u64],
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    model.check_batch(x)?;
    let n = labels.len();
    if x.shape()[0] != n || eps.len() != n || step.len() != n || ids.len() != n {
        return Err(Error::shape("attack", format!("batch of {} with {n} labels", x.shape()[0])));
    }
    let tail = model.input_shape().to_vec();
    let d = model.input_len();
    let classes = model.num_classes();
    let clean_logp = match cfg.objective {
        AttackObjective::KlToClean => Some(forward_primitive(&Primitive::LogSoftmax, &[&model.logits(x)?])?),
        _ => None,
    };
    let noise = if cfg.init_noise_std > 0.0 {
        Some(Normal::new(0.0, cfg.init_noise_std).map_err(|e| Error::invalid(e.to_string()))?)
    } else {
        None
    };
    let mut best: Vec<Option<AttackResult>> = vec![None; n];
    for r in 0..cfg.restarts {
        let active: Vec<usize> = (0..n)
            .filter(|&i| !best[i].as_ref().is_some_and(|b| b.success))
            .collect();
        if active.is_empty() {
            break;
        }
        let x0 = gather(x, &active, &tail);
        let sub_labels: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
        let sub_clean = clean_logp.as_ref().map(|c| gather(c, &active, &[classes]));
        let mut cur = x0.clone();
        for (k, &i) in active.iter().enumerate() {
            let row = &mut cur.data_mut()[k * d..(k + 1) * d];
            if let Some(dist) = &noise {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, ids[i], r as u64));
                for v in row.iter_mut() {
                    *v += dist.sample(&mut rng);
                }
            }
            project(cfg.norm, x0.row(k), row, eps[i]);
        }
        for _ in 0..cfg.steps {
            let ev = evaluate(model, cur.clone(), &sub_labels, cfg.objective, sub_clean.clone(), true)?;
            let g = ev.grad.expect("gradient requested");
            for (k, &i) in active.iter().enumerate() {
                let row = &mut cur.data_mut()[k * d..(k + 1) * d];
                ascend(cfg.norm, row, g.row(k), step[i]);
                project(cfg.norm, x0.row(k), row, eps[i]);
                assert!(
                    is_feasible(cfg.norm, x0.row(k), row, eps[i]),
                    "attack iterate left the feasible set"
                );
            }
        }
        let ev = evaluate(model, cur.clone(), &sub_labels, cfg.objective, sub_clean.clone(), false)?;
        for (k, &i) in active.iter().enumerate() {
            let z = ev.logits.row(k);
            let prediction = argmax(z);
            let cand = AttackResult {
                x_adv: cur.row(k).to_vec(),
                success: prediction != labels[i],
                prediction,
                restarts: r + 1,
                objective: ev.values[k],
                cw_margin: cw_objective(z, labels[i]).0,
                distortion: cfg.norm.distance(cur.row(k), x0.row(k)),
            };
            match &mut best[i] {
                Some(b) if !cand.beats(b) => b.restarts = r + 1,
                slot => *slot = Some(cand),
            }
        }
    }
    Ok(best.into_iter().map(|b| b.expect("at least one restart")).collect())
}

/// PGD on a batch; example `i` draws its random stream from `first_id + i`.
pub fn pgd_batch(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
    first_id: u64,
) -> Result<Vec<AttackResult>> {
    let n = labels.len();
    let ids: Vec<u64> = (0..n as u64).map(|i| first_id + i).collect();
    pgd_core(model, x, labels, &vec![cfg.eps; n], &vec![cfg.step_size; n], cfg, seed, &ids)
}

fn single(model: &Model, x: &[f64]) -> Result<Tensor> {
    Tensor::new(model.batch_shape(1), x.to_vec())
}

pub fn pgd(model: &Model, x: &[f64], y: usize, cfg: &AttackConfig, seed: u64) -> Result<AttackResult> {
    Ok(pgd_batch(model, &single(model, x)?, &[y], cfg, seed, 0)?.remove(0))
}

/// `clip(X + ε·sign(∇_X CE))`.
pub fn fgsm(model: &Model, x: &[f64], y: usize, eps: f64) -> Result<AttackResult> {
    pgd(model, x, y, &AttackConfig::fgsm(eps), 0)
}

/// Attacks every example of `dataset`, batched and merged in index order.
pub fn attack_dataset(model: &Model, dataset: &Dataset, cfg: &AttackConfig, seed: u64) -> Result<Vec<AttackResult>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Vec<Result<Vec<AttackResult>>> = idx
        .par_chunks(ATTACK_BATCH)
        .map(|c| {
            let (x, y) = dataset.batch(c);
            pgd_batch(model, &x, &y, cfg, seed, c[0] as u64)
        })
        .collect();
    let mut out = Vec::with_capacity(dataset.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Fraction of examples still correctly classified after the attack.
pub fn robust_accuracy(model: &Model, dataset: &Dataset, cfg: &AttackConfig, seed: u64) -> Result<f64> {
    let results = attack_dataset(model, dataset, cfg, seed)?;
    Ok(results.iter().filter(|r| !r.success).count() as f64 / results.len() as f64)
}

/// Robust accuracy for `repeats` independently seeded runs.
pub fn robust_accuracy_runs(
    model: &Model,
    dataset: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
    repeats: usize,
) -> Result<Vec<f64>> {
    (0..repeats.max(1) as u64)
        .map(|r| robust_accuracy(model, dataset, cfg, if r == 0 { seed } else { stream_seed(seed, u64::MAX, r) }))
        .collect()
}

pub fn clean_accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0;
    for c in idx.chunks(ATTACK_BATCH * 5) {
        let (x, y) = dataset.batch(c);
        let z = model.logits(&x)?;
        correct += (0..c.len()).filter(|&k| argmax(z.row(k)) == y[k]).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveResult {
    pub gamma: f64,
    pub result: AttackResult,
}

pub fn default_gamma_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// PGD with smoothed-label CE for every γ in the grid; per example the
/// successful run with the highest CW margin wins (earliest γ on ties).
pub fn adaptive_smoothed_attack_batch(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    gammas: &[f64],
    seed: u64,
    first_id: u64,
) -> Result<Vec<AdaptiveResult>> {
    if gammas.is_empty() {
        return Err(Error::invalid("empty γ grid"));
    }
    let mut best: Vec<Option<AdaptiveResult>> = vec![None; labels.len()];
    for &gamma in gammas {
        let c = cfg.with_objective(AttackObjective::SmoothedCe { gamma });
        for (slot, result) in best.iter_mut().zip(pgd_batch(model, x, labels, &c, seed, first_id)?) {
            let better = match slot {
                None => true,
                Some(b) => {
                    (result.success && !b.result.success)
                        || (result.success == b.result.success && result.cw_margin > b.result.cw_margin)
                }
            };
            if better {
                *slot = Some(AdaptiveResult { gamma, result });
            }
        }
    }
    Ok(best.into_iter().map(|b| b.expect("nonempty grid")).collect())
}

pub fn adaptive_smoothed_attack(
    model: &Model,
    x: &[f64],
    y: usize,
    cfg: &AttackConfig,
    gammas: &[f64],
    seed: u64,
) -> Result<AdaptiveResult> {
    Ok(adaptive_smoothed_attack_batch(model, &single(model, x)?, &[y], cfg, gammas, seed, 0)?.remove(0))
}

const RANDOM_SEARCH_BATCH: usize = 250;

/// Uniform samples from the L∞ ε-ball ∩ [0, 1]^d; stops at the first
/// misclassified sample. On failure the sample with the highest CW margin is
/// returned and `restarts` equals `trials`.
pub fn random_search_attack(
    model: &Model,
    x: &[f64],
    y: usize,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<AttackResult> {
    if trials == 0 {
        return Err(Error::invalid("random search needs at least one trial"));
    }
    let d = model.input_len();
    if x.len() != d {
        return Err(Error::shape("random search", format!("{} values, model expects {d}", x.len())));
    }
    let lo: Vec<f64> = x.iter().map(|v| (v - eps).max(0.0)).collect();
    let hi: Vec<f64> = x.iter().map(|v| (v + eps).min(1.0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0, 0));
    let mut best: Option<AttackResult> = None;
    let mut done = 0;
    while done < trials {
        let m = RANDOM_SEARCH_BATCH.min(trials - done);
        let mut data = Vec::with_capacity(m * d);
        for _ in 0..m {
            data.extend(lo.iter().zip(&hi).map(|(&a, &b)| if b > a { rng.random_range(a..=b) } else { a }));
        }
        let z = model.logits_of(&data, m)?;
        for k in 0..m {
            let sample = &data[k * d..(k + 1) * d];
            assert!(is_feasible(Norm::Linf, x, sample, eps), "random sample left the feasible set");
            let prediction = argmax(z.row(k));
            let margin = cw_objective(z.row(k), y).0;
            let cand = AttackResult {
                x_adv: sample.to_vec(),
                success: prediction != y,
                prediction,
                restarts: done + k + 1,
                objective: margin,
                cw_margin: margin,
                distortion: Norm::Linf.distance(sample, x),
            };
            if cand.success {
                return Ok(cand);
            }
            if best.as_ref().is_none_or(|b| cand.beats(b)) {
                best = Some(cand);
            }
        }
        done += m;
    }
    let mut b = best.expect("at least one trial");
    b.restarts = trials;
    Ok(b)
}

/// Parameters of the minimal-distortion L2 search.
pub const MIN_DIST_EPS0: f64 = 1e-2;
pub const MIN_DIST_STEPS: usize = 100;
pub const MIN_DIST_RESTARTS: usize = 2;
pub const MIN_DIST_REL_WIDTH: f64 = 1e-2;

struct Search {
    lo: f64,
    hi: Option<f64>,
    probe: f64,
    found: Option<AttackResult>,
    last: Option<AttackResult>,
    done: bool,
}

/// Smallest L2 budget at which CW-objective L2-PGD misclassifies each
/// example: doubling from `MIN_DIST_EPS0` up to √d, then bisection to
/// relative width `MIN_DIST_REL_WIDTH`. `success == false` marks a censored
/// example; clean misclassifications have distortion 0.
pub fn min_distortion_l2_batch(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
    first_id: u64,
) -> Result<Vec<AttackResult>> {
    model.check_batch(x)?;
    let n = labels.len();
    let d = model.input_len();
    let ceiling = (d as f64).sqrt();
    let z = model.logits(x)?;
    let mut states: Vec<Search> = (0..n)
        .map(|i| {
            let prediction = argmax(z.row(i));
            let clean = (prediction != labels[i]).then(|| AttackResult {
                x_adv: x.row(i).to_vec(),
                success: true,
                prediction,
                restarts: 0,
                objective: cw_objective(z.row(i), labels[i]).0,
                cw_margin: cw_objective(z.row(i), labels[i]).0,
                distortion: 0.0,
            });
            Search {
                lo: 0.0,
                hi: clean.as_ref().map(|_| 0.0),
                probe: MIN_DIST_EPS0.min(ceiling),
                done: clean.is_some(),
                found: clean,
                last: None,
            }
        })
        .collect();
    let base = AttackConfig::l2(1.0, 0.1, MIN_DIST_STEPS)
        .with_restarts(MIN_DIST_RESTARTS)
        .with_objective(AttackObjective::Cw);
    let tail = model.input_shape().to_vec();
    let mut round = 0u64;
    loop {
        let active: Vec<usize> = (0..n).filter(|&i| !states[i].done).collect();
        if active.is_empty() {
            break;
        }
        let xs = gather(x, &active, &tail);
        let ys: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
        let eps: Vec<f64> = active.iter().map(|&i| states[i].probe).collect();
        let step: Vec<f64> = eps.iter().map(|e| e / 10.0).collect();
        let ids: Vec<u64> = active.iter().map(|&i| first_id + i as u64).collect();
        let results = pgd_core(model, &xs, &ys, &eps, &step, &base, stream_seed(seed, u64::MAX - 1, round), &ids)?;
        for (&i, res) in active.iter().zip(results) {
            let s = &mut states[i];
            if res.success {
                s.hi = Some(s.probe);
                s.found = Some(res);
            } else {
                s.lo = s.probe;
                s.last = Some(res);
            }
            match s.hi {
                None if s.probe >= ceiling => s.done = true,
                None => s.probe = (s.probe * 2.0).min(ceiling),
                Some(hi) if (hi - s.lo) / hi < MIN_DIST_REL_WIDTH => s.done = true,
                Some(hi) => s.probe = 0.5 * (s.lo + hi),
            }
        }
        round += 1;
    }
    Ok(states
        .into_iter()
        .map(|s| s.found.or(s.last).expect("search probed at least once"))
        .collect())
}

pub fn min_distortion_l2(model: &Model, x: &[f64], y: usize, seed: u64) -> Result<AttackResult> {
    Ok(min_distortion_l2_batch(model, &single(model, x)?, &[y], seed, 0)?.remove(0))
}

/// Accuracy of `target` on adversarial examples crafted against `proxy`.
pub fn transfer_attack(
    proxy: &Model,
    target: &Model,
    dataset: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    if proxy.input_shape() != target.input_shape() || proxy.num_classes() != target.num_classes() {
        return Err(Error::shape(
            "transfer",
            format!(
                "proxy {:?}→{} vs target {:?}→{}",
                proxy.input_shape(),
                proxy.num_classes(),
                target.input_shape(),
                target.num_classes()
            ),
        ));
    }
    let results = attack_dataset(proxy, dataset, cfg, seed)?;
    let d = dataset.sample_len();
    let mut correct = 0;
    for (c, chunk) in results.chunks(ATTACK_BATCH * 5).enumerate() {
        let mut data = Vec::with_capacity(chunk.len() * d);
        for r in chunk {
            data.extend_from_slice(&r.x_adv);
        }
        let preds = target.predict_labels(&data, chunk.len())?;
        let base = c * ATTACK_BATCH * 5;
        correct += preds
            .iter()
            .enumerate()
            .filter(|&(k, &p)| p == dataset.labels()[base + k])
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// White-box accuracy above black-box accuracy indicates obfuscated gradients.
pub fn gradient_obfuscation_suspected(white_box_accuracy: f64, black_box_accuracy: f64) -> bool {
    white_box_accuracy > black_box_accuracy
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    Cw,
}

/// Attack names in table notation: `FGSM<k>`, `PGD<steps>-<k>`, `CW<steps>-<k>`,
/// with ε = k/255 and (iterative attacks) step size k/2550.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub steps: usize,
    pub k: u32,
}

impl AttackSpec {
    pub fn eps(&self) -> f64 {
        self.k as f64 / 255.0
    }

    pub fn to_config(&self) -> AttackConfig {
        match self.family {
            AttackFamily::Fgsm => AttackConfig::fgsm(self.eps()),
            AttackFamily::Pgd => AttackConfig::linf(self.eps(), self.k as f64 / 2550.0, self.steps),
            AttackFamily::Cw => {
                AttackConfig::linf(self.eps(), self.k as f64 / 2550.0, self.steps).with_objective(AttackObjective::Cw)
            }
        }
    }
}

impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::AttackSpec(s.to_string());
        let t = s.trim().to_ascii_uppercase();
        let num = |v: &str| -> Result<u32> {
            if v.is_empty() || !v.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err());
            }
            v.parse().map_err(|_| err())
        };
        if let Some(rest) = t.strip_prefix("FGSM") {
            return Ok(Self {
                family: AttackFamily::Fgsm,
                steps: 1,
                k: num(rest)?,
            });
        }
        let (family, rest) = if let Some(r) = t.strip_prefix("PGD") {
            (AttackFamily::Pgd, r)
        } else if let Some(r) = t.strip_prefix("CW") {
            (AttackFamily::Cw, r)
        } else {
            return Err(err());
        };
        let (steps, k) = rest.split_once('-').ok_or_else(err)?;
        let steps = num(steps)? as usize;
        if steps == 0 {
            return Err(err());
        }
        Ok(Self {
            family,
            steps,
            k: num(k)?,
        })
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            AttackFamily::Fgsm => write!(f, "FGSM{}", self.k),
            AttackFamily::Pgd => write!(f, "PGD{}-{}", self.steps, self.k),
            AttackFamily::Cw => write!(f, "CW{}-{}", self.steps, self.k),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_mlp;

    fn linear(w: [f64; 3]) -> Model {
        let mut m = build_mlp(&[3, 2], 0).unwrap();
        m.set_param(
            "0.weight",
            Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, w[0], w[1], w[2]]).unwrap(),
        )
        .unwrap();
        m.set_param("0.bias", Tensor::vector(vec![0.0, 0.0])).unwrap();
        m
    }

    #[test]
    fn spec_parsing() {
        let s: AttackSpec = "PGD10-8".parse().unwrap();
        let c = s.to_config();
        assert_eq!((c.eps, c.step_size, c.steps), (8.0 / 255.0, 8.0 / 2550.0, 10));
        assert_eq!(c.restarts, 5);
        let f: AttackSpec = "FGSM4".parse().unwrap();
        assert_eq!(f.to_config().steps, 1);
        assert_eq!(f.eps(), 4.0 / 255.0);
        let cw: AttackSpec = "cw40-16".parse().unwrap();
        assert_eq!(cw.to_config().objective, AttackObjective::Cw);
        assert_eq!(cw.to_string(), "CW40-16");
        for bad in ["", "PGD", "PGD10", "PGD-8", "PGD0-8", "FGSM", "FGSM-4", "XYZ10-8", "PGD10-8.5"] {
            assert!(bad.parse::<AttackSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn cw_objective_examples() {
        assert_eq!(cw_objective(&[3.0, 1.0, 0.0], 0).0, -2.0);
        assert_eq!(cw_objective(&[1.0, 1.0, 0.0], 0).0, 0.0);
        let (v, g) = cw_objective(&[0.0, 2.0, 1.0], 0);
        assert_eq!(v, 2.0);
        assert_eq!(g, vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn fgsm_on_linear_model() {
        // Class-1 logit w·x, class-0 logit 0; label 1 so CE ascends along -w.
        let m = linear([1.0, -2.0, 0.5]);
        let x = [0.5, 0.5, 0.5];
        let r = fgsm(&m, &x, 1, 0.1).unwrap();
        for (a, b) in r.x_adv.iter().zip([0.4f64, 0.6, 0.4]) {
            assert!((a - b).abs() < 1e-15);
        }
        let drop: f64 = (0.5 - 1.0 + 0.25) - (0.4 - 1.2 + 0.2);
        assert!((drop - 0.1 * 3.5).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let m = build_mlp(&[3, 2], 0).unwrap().scaled(0.0);
        let r = fgsm(&m, &[0.2, 0.3, 0.4], 0, 0.1).unwrap();
        assert_eq!(r.x_adv, vec![0.2, 0.3, 0.4]);
    }

    #[test]
    fn single_step_pgd_equals_fgsm() {
        let m = build_mlp(&[4, 5, 3], 9).unwrap();
        let x = [0.1, 0.9, 0.5, 0.0];
        let cfg = AttackConfig::linf(0.05, 0.07, 1).with_restarts(1).with_init_noise(0.0);
        assert_eq!(pgd(&m, &x, 2, &cfg, 1).unwrap().x_adv, fgsm(&m, &x, 2, 0.05).unwrap().x_adv);
    }

    #[test]
    fn l2_projection_rescales_radially() {
        let x0 = [0.5, 0.5];
        let mut cur = [0.5 + 0.3, 0.5 + 0.4];
        project(Norm::L2, &x0, &mut cur, 0.1);
        assert!((cur[0] - 0.56).abs() < 1e-12 && (cur[1] - 0.58).abs() < 1e-12);
        let mut inside = [0.52, 0.5];
        project(Norm::L2, &x0, &mut inside, 0.1);
        assert_eq!(inside, [0.52, 0.5]);
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = build_mlp(&[3, 4, 2], 1).unwrap();
        let x = [0.3, 0.6, 0.9];
        for norm in [Norm::Linf, Norm::L2] {
            let cfg = AttackConfig {
                norm,
                ..AttackConfig::linf(0.0, 0.01, 5)
            };
            assert_eq!(pgd(&m, &x, 0, &cfg, 3).unwrap().x_adv, x.to_vec());
        }
    }

    #[test]
    fn random_search_on_constant_model_fails_after_all_trials() {
        let m = build_mlp(&[3, 2], 0).unwrap().scaled(0.0);
        let r = random_search_attack(&m, &[0.0, 0.5, 1.0], 0, 0.2, 37, 5).unwrap();
        assert!(!r.success);
        assert_eq!(r.restarts, 37);
        assert!(is_feasible(Norm::Linf, &[0.0, 0.5, 1.0], &r.x_adv, 0.2));
    }

    #[test]
    fn min_distortion_zero_for_misclassified() {
        let m = linear([1.0, 1.0, 1.0]);
        let r = min_distortion_l2(&m, &[0.5, 0.5, 0.5], 0, 0).unwrap();
        assert!(r.success);
        assert_eq!(r.distortion, 0.0);
    }

    #[test]
    fn stream_seeds_differ() {
        let a = stream_seed(1, 0, 0);
        assert_ne!(a, stream_seed(1, 1, 0));
        assert_ne!(a, stream_seed(1, 0, 1));
        assert_ne!(a, stream_seed(2, 0, 0));
        assert_eq!(a, stream_seed(1, 0, 0));
    }
}
