//! Margin and Jacobian diagnostics, loss/margin surfaces, robustness curves
//! and correlation statistics.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{cw_objective, min_distortion_l2_batch, pgd_batch, robust_accuracy, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{input_gradient, LossKind};
use crate::models::{LayerSpec, Model};
use crate::tensor::{Tape, Tensor};

/// `f(X)_y - max_{i≠y} f(X)_i`.
pub fn decision_margin(model: &Model, x: &[f64], y: usize) -> Result<f64> {
    let z = model.logits_of(x, 1)?;
    Ok(-cw_objective(z.data(), y).0)
}

/// Jacobians `∂f(X)/∂X` (C × d) for every row of a batch, one backward pass
/// per class.
pub fn jacobians(model: &Model, x: &Tensor) -> Result<Vec<DMatrix<f64>>> {
    model.check_batch(x)?;
    let n = x.shape()[0];
    let c = model.num_classes();
    let d = model.input_len();
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let xi = tape.leaf(x.clone(), true);
    let z = model.forward(&mut tape, xi, &params)?;
    let mut out = vec![DMatrix::zeros(c, d); n];
    for class in 0..c {
        let mut seed = Tensor::zeros(&[n, c]);
        for k in 0..n {
            seed.data_mut()[k * c + class] = 1.0;
        }
        let g = tape.vjp(z, &seed)?;
        let gx = g.get(xi).expect("input requires grad");
        for (k, j) in out.iter_mut().enumerate() {
            for (col, &v) in gx.row(k).iter().enumerate() {
                j[(class, col)] = v;
            }
        }
    }
    Ok(out)
}

pub fn jacobian(model: &Model, x: &[f64]) -> Result<DMatrix<f64>> {
    Ok(jacobians(model, &Tensor::new(model.batch_shape(1), x.to_vec())?)?.remove(0))
}

fn largest_singular_value(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().cloned().fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    Exact,
    PowerIteration,
}

impl JacobianMode {
    /// Exact below 16 classes and 4096 inputs, power iteration above.
    pub fn default_for(model: &Model) -> Self {
        if model.num_classes() <= 16 && model.input_len() <= 4096 {
            JacobianMode::Exact
        } else {
            JacobianMode::PowerIteration
        }
    }
}

pub const POWER_MIN_ITERS: usize = 50;
pub const POWER_MAX_ITERS: usize = 2000;
pub const POWER_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralNorm {
    pub value: f64,
    pub iterations: usize,
    /// False when power iteration hit its iteration cap.
    pub converged: bool,
}

/// Largest singular value of the input Jacobian at `x`.
pub fn jacobian_spectral_norm(model: &Model, x: &[f64], mode: JacobianMode) -> Result<SpectralNorm> {
    match mode {
        JacobianMode::Exact => Ok(SpectralNorm {
            value: largest_singular_value(&jacobian(model, x)?),
            iterations: 0,
            converged: true,
        }),
        JacobianMode::PowerIteration => power_iteration(model, x),
    }
}

/// Matrix-free power iteration on JᵀJ using forward- and reverse-mode
/// products; the estimate is `‖J v‖` for a unit vector `v`, so it never
/// exceeds the true value.
fn power_iteration(model: &Model, x: &[f64]) -> Result<SpectralNorm> {
    let shape = model.batch_shape(1);
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let xi = tape.leaf(Tensor::new(shape.clone(), x.to_vec())?, true);
    let z = model.forward(&mut tape, xi, &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut v: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut sigma = 0.0;
    let mut best = 0.0f64;
    for it in 1..=POWER_MAX_ITERS {
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if nv == 0.0 {
            return Ok(SpectralNorm {
                value: best,
                iterations: it,
                converged: true,
            });
        }
        v.iter_mut().for_each(|a| *a /= nv);
        let jv = tape.jvp(&[(xi, &Tensor::new(shape.clone(), v.clone())?)], z)?;
        let next = jv.norm_l2();
        best = best.max(next);
        let change = (next - sigma).abs() / next.max(f64::MIN_POSITIVE);
        sigma = next;
        if next == 0.0 || (it >= POWER_MIN_ITERS && change < POWER_TOL) {
            return Ok(SpectralNorm {
                value: best,
                iterations: it,
                converged: true,
            });
        }
        let g = tape.vjp(z, &jv)?;
        v = g.get(xi).expect("input requires grad").data().to_vec();
    }
    log::warn!("power iteration did not converge in {POWER_MAX_ITERS} iterations");
    Ok(SpectralNorm {
        value: best,
        iterations: POWER_MAX_ITERS,
        converged: false,
    })
}

/// `M_{f,X} / ‖∇_X f(X)‖₂`.
pub fn normalized_margin(model: &Model, x: &[f64], y: usize) -> Result<f64> {
    let s = jacobian_spectral_norm(model, x, JacobianMode::default_for(model))?.value;
    normalized(decision_margin(model, x, y)?, s)
}

fn normalized(margin: f64, spectral: f64) -> Result<f64> {
    if spectral <= 1e-12 {
        return Err(Error::Undefined(format!(
            "normalized margin: Jacobian spectral norm {spectral:e} vanishes"
        )));
    }
    Ok(margin / spectral)
}

/// Relative deviation of `f` from its linearization at `x`, evaluated at
/// `x_prime`, with the exact Jacobian.
pub fn q_f(model: &Model, x: &[f64], x_prime: &[f64]) -> Result<f64> {
    q_f_with(model, &jacobian(model, x)?, x, x_prime)
}

fn q_f_with(model: &Model, j: &DMatrix<f64>, x: &[f64], x_prime: &[f64]) -> Result<f64> {
    if x.len() != x_prime.len() {
        return Err(Error::shape("q_f", format!("{} vs {} values", x.len(), x_prime.len())));
    }
    let delta = nalgebra::DVector::from_iterator(x.len(), x_prime.iter().zip(x).map(|(a, b)| a - b));
    let lin = j * delta;
    let den = lin.norm();
    if den <= 1e-12 {
        return Err(Error::Undefined(format!("Q_f: linear term norm {den:e} vanishes")));
    }
    let fx = model.logits_of(x, 1)?;
    let fxp = model.logits_of(x_prime, 1)?;
    let num = fxp
        .data()
        .iter()
        .zip(fx.data())
        .zip(lin.iter())
        .map(|((a, b), l)| (a - b - l).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceQuantity {
    Loss,
    Margin,
}

/// Values of CE loss and decision margin on `X + ε₁d₁ + ε₂d₂`; row `i`
/// corresponds to `coords[i]` for ε₁ and column `j` to `coords[j]` for ε₂.
/// Grid points are not clipped to the unit box.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceGrid {
    pub center: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub coords: Vec<f64>,
    pub loss: Vec<Vec<f64>>,
    pub margin: Vec<Vec<f64>>,
    pub quantity: SurfaceQuantity,
}

pub const DEFAULT_SURFACE_RANGE: (f64, f64) = (-0.04, 0.04);

#[derive(Serialize)]
struct GridRow {
    eps1: f64,
    eps2: f64,
    value: f64,
}

impl SurfaceGrid {
    pub fn values(&self) -> &[Vec<f64>] {
        match self.quantity {
            SurfaceQuantity::Loss => &self.loss,
            SurfaceQuantity::Margin => &self.margin,
        }
    }

    /// CSV with columns `eps1, eps2, value`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for (i, row) in self.values().iter().enumerate() {
            for (j, &value) in row.iter().enumerate() {
                w.serialize(GridRow {
                    eps1: self.coords[i],
                    eps2: self.coords[j],
                    value,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Loss/margin surface around `x` spanned by d₁ = sign(∇_X CE) and a seeded
/// Rademacher direction d₂.
pub fn surface_grid(
    model: &Model,
    x: &[f64],
    y: usize,
    range: (f64, f64),
    resolution: usize,
    quantity: SurfaceQuantity,
    seed: u64,
) -> Result<SurfaceGrid> {
    if resolution < 2 {
        return Err(Error::invalid(format!("surface resolution must be at least 2, got {resolution}")));
    }
    let d = model.input_len();
    let xt = Tensor::new(model.batch_shape(1), x.to_vec())?;
    let g = input_gradient(model, &xt, &[y], LossKind::CrossEntropy)?;
    let d1: Vec<f64> = g.data().iter().map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d2: Vec<f64> = (0..d).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let coords = linspace(range.0, range.1, resolution);
    let mut loss = Vec::with_capacity(resolution);
    let mut margin = Vec::with_capacity(resolution);
    for &e1 in &coords {
        let mut data = Vec::with_capacity(resolution * d);
        for &e2 in &coords {
            data.extend((0..d).map(|k| x[k] + e1 * d1[k] + e2 * d2[k]));
        }
        let z = model.logits_of(&data, resolution)?;
        let mut lrow = Vec::with_capacity(resolution);
        let mut mrow = Vec::with_capacity(resolution);
        for j in 0..resolution {
            let zr = z.row(j);
            let top = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_norm = top + zr.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
            lrow.push(log_norm - zr[y]);
            mrow.push(-cw_objective(zr, y).0);
        }
        loss.push(lrow);
        margin.push(mrow);
    }
    Ok(SurfaceGrid {
        center: x.to_vec(),
        d1,
        d2,
        coords,
        loss,
        margin,
        quantity,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// ε for accuracy-ε curves, step count for accuracy-steps curves.
    pub x: f64,
    pub accuracy: f64,
    pub steps: usize,
    pub step_size: f64,
}

/// Accuracy-ε protocol: ε = k/255 with k iterations of step 2/255.
pub fn eps_curve_config(eps: f64, restarts: usize) -> AttackConfig {
    let k = (eps * 255.0).round().max(1.0) as usize;
    AttackConfig::linf(eps, 2.0 / 255.0, k).with_restarts(restarts)
}

/// Accuracy-steps protocol step size `max(1/510, 2ε/k)`.
pub fn steps_curve_step_size(eps: f64, k: usize) -> f64 {
    (1.0 / 510.0f64).max(2.0 * eps / k as f64)
}

pub fn accuracy_eps_curve(
    model: &Model,
    dataset: &Dataset,
    eps_grid: &[f64],
    restarts: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    if eps_grid.is_empty() {
        return Err(Error::invalid("empty ε grid"));
    }
    eps_grid
        .iter()
        .map(|&eps| {
            let cfg = eps_curve_config(eps, restarts);
            Ok(CurvePoint {
                x: eps,
                accuracy: robust_accuracy(model, dataset, &cfg, seed)?,
                steps: cfg.steps,
                step_size: cfg.step_size,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepsCurve {
    pub eps: f64,
    pub points: Vec<CurvePoint>,
    /// `converged[i]`: points `i` and `i + 1` differ by less than 0.3%.
    pub converged: Vec<bool>,
}

pub const CONVERGENCE_TOL: f64 = 0.003;

pub fn accuracy_steps_curve(
    model: &Model,
    dataset: &Dataset,
    eps: f64,
    k_grid: &[usize],
    restarts: usize,
    seed: u64,
) -> Result<StepsCurve> {
    if k_grid.is_empty() || k_grid.contains(&0) {
        return Err(Error::invalid("step grid must be nonempty with positive entries"));
    }
    let points = k_grid
        .iter()
        .map(|&k| {
            let step = steps_curve_step_size(eps, k);
            let cfg = AttackConfig::linf(eps, step, k).with_restarts(restarts);
            Ok(CurvePoint {
                x: k as f64,
                accuracy: robust_accuracy(model, dataset, &cfg, seed)?,
                steps: k,
                step_size: step,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let converged = points
        .windows(2)
        .map(|w| (w[0].accuracy - w[1].accuracy).abs() < CONVERGENCE_TOL)
        .collect();
    Ok(StepsCurve { eps, points, converged })
}

/// CSV with columns `x, accuracy, steps, step_size`.
pub fn write_curve_csv(points: &[CurvePoint], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Undefined(format!(
            "Pearson correlation needs two equal-length samples of size ≥ 2, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("Pearson correlation: zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub id: usize,
    pub label: usize,
    pub margin: f64,
    pub spectral_norm: f64,
    /// Missing when the spectral norm vanishes.
    pub normalized_margin: Option<f64>,
    pub q_f: Option<f64>,
    pub min_distortion: Option<f64>,
    /// Minimal-distortion search found no adversarial example below √d.
    pub censored: bool,
}

/// Pearson r between normalized margin and minimal L2 distortion over the
/// uncensored records.
pub fn margin_distortion_correlation(records: &[DiagnosticsRecord]) -> Result<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = records
        .iter()
        .filter(|r| !r.censored)
        .filter_map(|r| Some((r.normalized_margin?, r.min_distortion?)))
        .unzip();
    pearson(&xs, &ys)
}

/// Splits at the empirical percentile of `key`: the lowest `percentile`% go
/// to `low`, the rest to `high`. Returns `(high, low)`.
pub fn quantile_split<T: Clone>(items: &[T], key: impl Fn(&T) -> f64, percentile: f64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::invalid(format!("percentile must lie in [0, 100], got {percentile}")));
    }
    let mut sorted: Vec<&T> = items.iter().collect();
    sorted.sort_by(|a, b| key(a).total_cmp(&key(b)));
    let cut = (items.len() as f64 * percentile / 100.0).round() as usize;
    let low = sorted[..cut].iter().map(|&t| t.clone()).collect();
    let high = sorted[cut..].iter().map(|&t| t.clone()).collect();
    Ok((high, low))
}

/// Global Lipschitz constant (L2 → L2) of a single dense layer: the spectral
/// norm of its weight matrix.
pub fn linear_lipschitz(model: &Model) -> Result<f64> {
    match model.layers() {
        [LayerSpec::Dense { inputs, outputs }] => {
            let w = model.param("0.weight").expect("dense layer has weights");
            Ok(largest_singular_value(&DMatrix::from_row_slice(*outputs, *inputs, w.data())))
        }
        _ => Err(Error::invalid(
            "the Lipschitz certificate requires a single dense layer; use the Jacobian proxy for deeper models",
        )),
    }
}

/// True iff `M_{f,X} ≥ √2·δ·l_f`, in which case no L2 perturbation of norm at
/// most `delta_norm` changes the prediction.
pub fn lipschitz_certificate(model: &Model, x: &[f64], y: usize, delta_norm: f64) -> Result<bool> {
    if !(delta_norm >= 0.0) {
        return Err(Error::invalid(format!("δ norm must be non-negative, got {delta_norm}")));
    }
    let l = linear_lipschitz(model)?;
    let m = decision_margin(model, x, y)?;
    Ok(m >= std::f64::consts::SQRT_2 * delta_norm * l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnoseConfig {
    pub samples: usize,
    pub mode: Option<JacobianMode>,
    /// Attack producing X_adv for Q_f; `None` skips Q_f.
    pub q_f_attack: Option<AttackConfig>,
    pub min_distortion: bool,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            mode: None,
            q_f_attack: Some(AttackConfig::linf(48.0 / 255.0, 4.8 / 255.0, 10)),
            min_distortion: true,
        }
    }
}

const DIAG_BATCH: usize = 50;

/// Per-example diagnostics for the first `cfg.samples` examples.
pub fn diagnose(model: &Model, dataset: &Dataset, cfg: &DiagnoseConfig, seed: u64) -> Result<Vec<DiagnosticsRecord>> {
    let ds = dataset.head(cfg.samples);
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mode = cfg.mode.unwrap_or_else(|| JacobianMode::default_for(model));
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(DIAG_BATCH) {
        let (x, labels) = ds.batch(chunk);
        let z = model.logits(&x)?;
        let jac = match mode {
            JacobianMode::Exact => Some(jacobians(model, &x)?),
            JacobianMode::PowerIteration => None,
        };
        let adv = match &cfg.q_f_attack {
            Some(a) => Some(pgd_batch(model, &x, &labels, a, seed, chunk[0] as u64)?),
            None => None,
        };
        let dist = if cfg.min_distortion {
            Some(min_distortion_l2_batch(model, &x, &labels, seed, chunk[0] as u64)?)
        } else {
            None
        };
        for (k, &id) in chunk.iter().enumerate() {
            let xs = x.row(k);
            let spectral = match &jac {
                Some(j) => largest_singular_value(&j[k]),
                None => power_iteration(model, xs)?.value,
            };
            let margin = -cw_objective(z.row(k), labels[k]).0;
            let q = match &adv {
                Some(a) => {
                    let j = match &jac {
                        Some(j) => j[k].clone(),
                        None => jacobian(model, xs)?,
                    };
                    q_f_with(model, &j, xs, &a[k].x_adv).ok()
                }
                None => None,
            };
            let (min_distortion, censored) = match &dist {
                Some(d) => (d[k].success.then_some(d[k].distortion), !d[k].success),
                None => (None, false),
            };
            out.push(DiagnosticsRecord {
                id,
                label: labels[k],
                margin,
                spectral_norm: spectral,
                normalized_margin: normalized(margin, spectral).ok(),
                q_f: q,
                min_distortion,
                censored,
            });
        }
    }
    Ok(out)
}

/// One CSV row per record; undefined values are empty cells.
pub fn write_records_csv(records: &[DiagnosticsRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}
