//! Losses for single-positive training plus the fully supervised reference.
//!
//! Per-sample losses sum over classes; [`LossKind::batch_loss`] averages over
//! the batch. Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`
//! before any logarithm, and the reported gradient is the exact derivative of
//! the clamped expression (zero where the clamp is active).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::sigmoid;

pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;
pub const DEFAULT_FOCAL_ALPHA: f64 = 0.25;

/// Exactly one observed positive class out of `num_classes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SinglePositive {
    class: usize,
    num_classes: usize,
}

impl SinglePositive {
    pub fn new(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "positive class {class} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { class, num_classes })
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_positive(&self, k: usize) -> bool {
        k == self.class
    }
}

/// Complete binary label vector with at least one positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullLabels(Vec<bool>);

impl FullLabels {
    pub fn new(labels: Vec<bool>) -> Result<Self> {
        if !labels.iter().any(|&b| b) {
            return Err(Error::InvalidArgument("label vector has no positive entry".into()));
        }
        Ok(Self(labels))
    }

    /// Build from a list of positive class indices.
    pub fn from_indices(indices: &[usize], num_classes: usize) -> Result<Self> {
        let mut v = vec![false; num_classes];
        for &i in indices {
            if i >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label {i} out of range for {num_classes} classes"
                )));
            }
            v[i] = true;
        }
        Self::new(v)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

impl From<SinglePositive> for FullLabels {
    fn from(z: SinglePositive) -> Self {
        let mut v = vec![false; z.num_classes];
        v[z.class] = true;
        Self(v)
    }
}

/// Scalar loss with its gradient (w.r.t. logits for [`ce_loss`], w.r.t.
/// probabilities for the sigmoid losses).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Softmax cross-entropy against the single positive.
pub fn ce_loss(logits: &[f64], positive: usize) -> Result<LossOutput> {
    if positive >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "positive class {positive} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = max + total.ln() - logits[positive];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[positive] -= 1.0;
    Ok(LossOutput { loss, grad })
}

fn clamp_prob(p: f64) -> (f64, f64) {
    let lo = PROB_CLAMP;
    let hi = 1.0 - PROB_CLAMP;
    if p < lo {
        (lo, 0.0)
    } else if p > hi {
        (hi, 0.0)
    } else {
        (p, 1.0)
    }
}

fn check_len(probs: &[f64], n: usize) -> Result<()> {
    if probs.len() != n {
        return Err(Error::Shape(format!(
            "{} probabilities for {n} classes",
            probs.len()
        )));
    }
    Ok(())
}

fn binary_cross_entropy(probs: &[f64], targets: impl Fn(usize) -> bool) -> LossOutput {
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (k, &p) in probs.iter().enumerate() {
        let (p, dclamp) = clamp_prob(p);
        if targets(k) {
            loss -= p.ln();
            grad.push(-dclamp / p);
        } else {
            loss -= (1.0 - p).ln();
            grad.push(dclamp / (1.0 - p));
        }
    }
    LossOutput { loss, grad }
}

/// Binary cross-entropy with every unobserved class treated as negative.
pub fn bce_an_loss(probs: &[f64], z: SinglePositive) -> Result<LossOutput> {
    check_len(probs, z.num_classes)?;
    Ok(binary_cross_entropy(probs, |k| z.is_positive(k)))
}

/// Binary cross-entropy against the complete label vector.
pub fn full_bce_loss(probs: &[f64], y: &FullLabels) -> Result<LossOutput> {
    check_len(probs, y.0.len())?;
    Ok(binary_cross_entropy(probs, |k| y.0[k]))
}

/// Focal variant of [`bce_an_loss`].
pub fn focal_loss(probs: &[f64], z: SinglePositive, gamma: f64, alpha: f64) -> Result<LossOutput> {
    check_len(probs, z.num_classes)?;
    if !(gamma >= 0.0) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "focal parameters need gamma >= 0 and alpha in (0, 1), got gamma={gamma}, alpha={alpha}"
        )));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(probs.len());
    for (k, &p) in probs.iter().enumerate() {
        let (p, dclamp) = clamp_prob(p);
        if z.is_positive(k) {
            let q = 1.0 - p;
            let w = q.powf(gamma);
            loss -= alpha * w * p.ln();
            let dw = if gamma == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) };
            grad.push(-alpha * (dw * p.ln() + w / p) * dclamp);
        } else {
            let w = p.powf(gamma);
            let log_q = (1.0 - p).ln();
            loss -= (1.0 - alpha) * w * log_q;
            let dw = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
            grad.push(-(1.0 - alpha) * (dw * log_q - w / (1.0 - p)) * dclamp);
        }
    }
    Ok(LossOutput { loss, grad })
}

/// Training loss selection (`loss = ce | bce | focal`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Bce,
    Focal { gamma: f64, alpha: f64 },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Bce => "bce",
            LossKind::Focal { .. } => "focal",
        }
    }

    /// Batch-mean loss of `logits` (`B x L`) and its gradient w.r.t. the
    /// logits.
    pub fn batch_loss(&self, logits: &Array2<f64>, positives: &[usize]) -> Result<(f64, Array2<f64>)> {
        let (b, l) = logits.dim();
        if positives.len() != b {
            return Err(Error::Shape(format!("{} labels for a batch of {b}", positives.len())));
        }
        if b == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let scale = 1.0 / b as f64;
        let mut total = 0.0;
        let mut grad = Array2::zeros((b, l));
        for (i, row) in logits.rows().into_iter().enumerate() {
            let row = row.to_vec();
            let z = SinglePositive::new(positives[i], l)?;
            let out = match *self {
                LossKind::Ce => ce_loss(&row, z.class())?,
                LossKind::Bce | LossKind::Focal { .. } => {
                    let probs: Vec<f64> = row.iter().map(|&v| sigmoid(v)).collect();
                    let mut out = match *self {
                        LossKind::Focal { gamma, alpha } => focal_loss(&probs, z, gamma, alpha)?,
                        _ => bce_an_loss(&probs, z)?,
                    };
                    for (g, p) in out.grad.iter_mut().zip(&probs) {
                        *g *= p * (1.0 - p);
                    }
                    out
                }
            };
            total += out.loss;
            for (k, g) in out.grad.into_iter().enumerate() {
                grad[[i, k]] = g * scale;
            }
        }
        Ok((total * scale, grad))
    }
}
