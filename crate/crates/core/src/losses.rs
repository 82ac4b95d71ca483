//! Cross entropy, Shannon entropy, KL divergence and the regularized training
//! losses built from them.
//!
//! All logarithms are natural. Probabilities inside `log` are floored at
//! [`PROB_FLOOR`]; the tape-based losses work on log-softmax outputs and never
//! take the log of a probability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{NodeId, Tape, Tensor};

pub const PROB_FLOOR: f64 = 1e-300;

fn check_dims(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::shape("loss", format!("{} vs {} classes", p.len(), q.len())));
    }
    Ok(())
}

/// `CE(p, y) = -Σ y_i log p_i`.
pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(p, y)?;
    Ok(-p
        .iter()
        .zip(y)
        .filter(|(_, &yi)| yi != 0.0)
        .map(|(&pi, &yi)| yi * pi.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// `H(p) = -Σ p_i log p_i`, with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `KL(p‖q) = Σ p_i log(p_i / q_i)`.
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    check_dims(p, q)?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum())
}

pub fn uniform(classes: usize) -> Vec<f64> {
    vec![1.0 / classes as f64; classes]
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Label-smoothed target `y - γ(y - u_C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedLabel {
    probs: Vec<f64>,
    gamma: f64,
}

impl SmoothedLabel {
    pub fn new(label: usize, classes: usize, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        if label >= classes {
            return Err(Error::invalid(format!("label {label} out of range for {classes} classes")));
        }
        let off = gamma / classes as f64;
        let mut probs = vec![off; classes];
        probs[label] = 1.0 - gamma + off;
        Ok(Self { probs, gamma })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("smoothing γ must lie in [0, 1], got {gamma}")));
    }
    Ok(())
}

/// Loss selector shared by training, attacks and input gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// `CE - λ·H`.
    Entm { lambda: f64 },
    /// CE against smoothed labels.
    Smoothed { gamma: f64 },
    /// Logit margin `max_{i≠y} z_i - z_y`.
    CwMargin,
}

/// Scalar loss with named components, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<&'static str, f64>,
}

impl LossValue {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }
}

/// Targets tensor `[N, C]` for one-hot (`gamma = 0`) or smoothed labels.
pub fn target_tensor(labels: &[usize], classes: usize, gamma: f64) -> Result<Tensor> {
    check_gamma(gamma)?;
    let mut data = Vec::with_capacity(labels.len() * classes);
    for &y in labels {
        data.extend_from_slice(SmoothedLabel::new(y, classes, gamma)?.probs());
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Per-example loss nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    /// `[N]` per-example objective.
    pub total: NodeId,
    pub ce: Option<NodeId>,
    pub entropy: Option<NodeId>,
    pub smoothed_ce: Option<NodeId>,
}

/// Records the per-example loss `kind` on top of `logits`.
pub fn record_loss(tape: &mut Tape, logits: NodeId, labels: &[usize], kind: LossKind) -> Result<LossNodes> {
    let classes = match tape.value(logits).shape() {
        [n, c] if *n == labels.len() => *c,
        s => {
            return Err(Error::shape(
                "loss",
                format!("logits {s:?} for {} labels", labels.len()),
            ))
        }
    };
    if let LossKind::CwMargin = kind {
        let m = tape.margin(logits, labels)?;
        return Ok(LossNodes {
            total: m,
            ce: None,
            entropy: None,
            smoothed_ce: None,
        });
    }
    let logp = tape.log_softmax(logits)?;
    let gamma = match kind {
        LossKind::Smoothed { gamma } => gamma,
        _ => 0.0,
    };
    let targets = tape.constant(target_tensor(labels, classes, gamma)?);
    let ce = tape.cross_entropy(logp, targets)?;
    Ok(match kind {
        LossKind::CrossEntropy => LossNodes {
            total: ce,
            ce: Some(ce),
            entropy: None,
            smoothed_ce: None,
        },
        LossKind::Smoothed { .. } => LossNodes {
            total: ce,
            ce: None,
            entropy: None,
            smoothed_ce: Some(ce),
        },
        LossKind::Entm { lambda } => {
            if lambda < 0.0 {
                return Err(Error::invalid(format!("λ must be non-negative, got {lambda}")));
            }
            let h = tape.entropy(logp)?;
            let neg = tape.scale(h, -lambda)?;
            let total = tape.add(ce, neg)?;
            LossNodes {
                total,
                ce: Some(ce),
                entropy: Some(h),
                smoothed_ce: None,
            }
        }
        LossKind::CwMargin => unreachable!(),
    })
}

fn batch_mean(t: &Tensor) -> f64 {
    t.sum() / t.numel() as f64
}

fn evaluate(model: &Model, x: &Tensor, labels: &[usize], kind: LossKind) -> Result<LossValue> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let xi = tape.constant(x.clone());
    let z = model.forward(&mut tape, xi, &params)?;
    let nodes = record_loss(&mut tape, z, labels, kind)?;
    let mut components = BTreeMap::new();
    for (name, id) in [("ce", nodes.ce), ("entropy", nodes.entropy), ("smoothed_ce", nodes.smoothed_ce)] {
        if let Some(id) = id {
            components.insert(name, batch_mean(tape.value(id)));
        }
    }
    Ok(LossValue {
        total: batch_mean(tape.value(nodes.total)),
        components,
    })
}

/// `CE(f_σ(X), y)` averaged over the batch.
pub fn ce_loss(model: &Model, x: &Tensor, labels: &[usize]) -> Result<LossValue> {
    evaluate(model, x, labels, LossKind::CrossEntropy)
}

/// Entropy-maximization loss `CE(f_σ(X), y) - λ·H(f_σ(X))`.
pub fn entm_loss(model: &Model, x: &Tensor, labels: &[usize], lambda: f64) -> Result<LossValue> {
    evaluate(model, x, labels, LossKind::Entm { lambda })
}

/// Label-smoothing loss `CE(f_σ(X), y - γ(y - u_C))`.
pub fn ls_loss(model: &Model, x: &Tensor, labels: &[usize], gamma: f64) -> Result<LossValue> {
    evaluate(model, x, labels, LossKind::Smoothed { gamma })
}

/// TRADES loss `CE(f_σ(X), y) + β·KL(f_σ(X_adv) ‖ f_σ(X))`.
pub fn trades_loss(model: &Model, x: &Tensor, x_adv: &Tensor, labels: &[usize], beta: f64) -> Result<LossValue> {
    if beta < 0.0 {
        return Err(Error::invalid(format!("β must be non-negative, got {beta}")));
    }
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let xi = tape.constant(x.clone());
    let xa = tape.constant(x_adv.clone());
    let (total, ce, kl) = record_trades(&mut tape, model, &params, xi, xa, labels, beta, LossKind::CrossEntropy)?;
    let mut components = BTreeMap::new();
    components.insert("ce", batch_mean(tape.value(ce)));
    components.insert("kl", batch_mean(tape.value(kl)));
    Ok(LossValue {
        total: batch_mean(tape.value(total)),
        components,
    })
}

/// Records `clean_loss(X) + β·KL(f_σ(X_adv) ‖ f_σ(X))` per example; returns
/// `(total, clean term, kl)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn record_trades(
    tape: &mut Tape,
    model: &Model,
    params: &[NodeId],
    x: NodeId,
    x_adv: NodeId,
    labels: &[usize],
    beta: f64,
    clean: LossKind,
) -> Result<(NodeId, NodeId, NodeId)> {
    let z = model.forward(tape, x, params)?;
    let za = model.forward(tape, x_adv, params)?;
    let clean_nodes = record_loss(tape, z, labels, clean)?;
    let lp = tape.log_softmax(z)?;
    let lpa = tape.log_softmax(za)?;
    let kl = tape.kl_div(lpa, lp)?;
    let scaled = tape.scale(kl, beta)?;
    let total = tape.add(clean_nodes.total, scaled)?;
    Ok((total, clean_nodes.total, kl))
}

/// Gradient of the summed per-example loss with respect to the inputs; row
/// `i` is the gradient of example `i`'s loss.
pub fn input_gradient(model: &Model, x: &Tensor, labels: &[usize], kind: LossKind) -> Result<Tensor> {
    model.check_batch(x)?;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false);
    let xi = tape.leaf(x.clone(), true);
    let z = model.forward(&mut tape, xi, &params)?;
    let nodes = record_loss(&mut tape, z, labels, kind)?;
    let s = tape.sum(nodes.total)?;
    let mut g = tape.backward(s)?;
    Ok(g.take(xi).expect("input leaf requires grad"))
}

/// Smoothing strength whose optimal prediction has the same mean non-maximal
/// probability as `probabilities` (e.g. the outputs of an EntM model on a
/// reference set). The optimum of the smoothed loss puts `γ/C` on every
/// non-target class.
pub fn match_label_smoothing(probabilities: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut classes = 0;
    for p in probabilities {
        classes = p.len();
        let top = crate::models::argmax(p);
        for (i, v) in p.iter().enumerate() {
            if i != top {
                total += v;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((classes as f64 * total / count as f64).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_mlp;

    const LN10: f64 = std::f64::consts::LN_10;

    #[test]
    fn ce_basic_values() {
        let y = one_hot(4, 10);
        assert_eq!(cross_entropy(&y, &y).unwrap(), 0.0);
        assert!((cross_entropy(&uniform(10), &y).unwrap() - LN10).abs() < 1e-12);
        assert!(cross_entropy(&[0.5, 0.5], &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn entropy_and_kl_basics() {
        assert!((entropy(&uniform(10)) - LN10).abs() < 1e-12);
        assert_eq!(entropy(&one_hot(2, 10)), 0.0);
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn smoothed_label_at_074() {
        let s = SmoothedLabel::new(3, 10, 0.74).unwrap();
        assert!((s.probs()[3] - 0.334).abs() < 1e-12);
        for (i, v) in s.probs().iter().enumerate() {
            if i != 3 {
                assert!((v - 0.074).abs() < 1e-12);
            }
        }
        assert!((s.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(SmoothedLabel::new(0, 10, 1.5).is_err());
    }

    #[test]
    fn degenerate_strengths_reduce_to_ce() {
        let m = build_mlp(&[3, 4, 5], 2).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.7]).unwrap();
        let labels = [1, 4];
        let ce = ce_loss(&m, &x, &labels).unwrap().total;
        assert_eq!(entm_loss(&m, &x, &labels, 0.0).unwrap().total, ce);
        assert_eq!(ls_loss(&m, &x, &labels, 0.0).unwrap().total, ce);
        assert_eq!(trades_loss(&m, &x, &x, &labels, 3.0).unwrap().total, ce);
        assert_eq!(trades_loss(&m, &x, &x.map(|v| v * 0.5), &labels, 0.0).unwrap().total, ce);
    }

    #[test]
    fn entm_on_uniform_model() {
        let m = build_mlp(&[3, 10], 0).unwrap().scaled(0.0);
        let x = Tensor::new(vec![1, 3], vec![0.2, 0.4, 0.6]).unwrap();
        let v = entm_loss(&m, &x, &[7], 2.0).unwrap();
        assert!((v.total - (LN10 - 2.0 * LN10)).abs() < 1e-12);
        let total = v.component("ce").unwrap() - 2.0 * v.component("entropy").unwrap();
        assert!((v.total - total).abs() < 1e-12);
    }

    #[test]
    fn trades_kl_term_is_nonnegative() {
        let m = build_mlp(&[3, 6, 4], 5).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let xa = Tensor::new(vec![1, 3], vec![0.4, 0.0, 0.9]).unwrap();
        let v = trades_loss(&m, &x, &xa, &[2], 3.0).unwrap();
        assert!(v.component("kl").unwrap() >= 0.0);
        let expect = v.component("ce").unwrap() + 3.0 * v.component("kl").unwrap();
        assert!((v.total - expect).abs() < 1e-12);
    }

    #[test]
    fn margin_gradient_on_linear_model() {
        let mut m = build_mlp(&[3, 2], 0).unwrap();
        m.set_param("0.weight", Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, -1.0, 1.0, 2.0]).unwrap())
            .unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.3, 0.3, 0.3]).unwrap();
        let g = input_gradient(&m, &x, &[0], LossKind::CwMargin).unwrap();
        assert_eq!(g.data(), &[-2.0, 3.0, 1.5]);
        let zero = input_gradient(&m.scaled(0.0), &x, &[0], LossKind::CrossEntropy).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matched_gamma_reproduces_off_mass() {
        // EntM-like outputs: 0.334 on top class, 0.074 elsewhere.
        let p: Vec<f64> = SmoothedLabel::new(0, 10, 0.74).unwrap().probs().to_vec();
        let g = match_label_smoothing(&[p.clone(), p]).unwrap();
        assert!((g - 0.74).abs() < 1e-12);
    }
}
