//! FGSM and PGD perturbations of the frozen-backbone embeddings.
//!
//! The backbone is outside the trainable stack, so attacks move the encoder
//! input directly: `x' = x + ε·sign(∇_x L)`, and PGD repeats that step with a
//! projection back onto the ℓ∞ ball of radius `ball_radius` around the
//! original `x` after every step. Attacks never touch model parameters.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::VerbClassifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvMethod {
    None,
    Fgsm,
    Pgd,
}

impl FromStr for AdvMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AdvMethod::None),
            "fgsm" => Ok(AdvMethod::Fgsm),
            "pgd" => Ok(AdvMethod::Pgd),
            other => Err(Error::InvalidConfig(format!(
                "unknown adversarial method `{other}` (expected none, fgsm or pgd)"
            ))),
        }
    }
}

impl fmt::Display for AdvMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdvMethod::None => "none",
            AdvMethod::Fgsm => "fgsm",
            AdvMethod::Pgd => "pgd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    pub method: AdvMethod,
    /// Step size of every sign-gradient step (ℓ∞, embedding units).
    pub epsilon: f64,
    /// Radius of the PGD feasible set around the clean input.
    pub ball_radius: f64,
    /// PGD iterations.
    pub steps: usize,
    /// Start PGD from a uniform point in the ball instead of the clean input.
    pub random_start: bool,
}

impl Default for AdvConfig {
    fn default() -> Self {
        let ball_radius = 0.05;
        Self {
            method: AdvMethod::None,
            epsilon: ball_radius / 4.0,
            ball_radius,
            steps: 5,
            random_start: false,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == AdvMethod::None {
            return Ok(());
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("adv.epsilon must be positive, got {}", self.epsilon)));
        }
        if self.method == AdvMethod::Pgd {
            if self.steps == 0 {
                return Err(Error::InvalidConfig("adv.steps must be at least 1".into()));
            }
            if !(self.ball_radius >= self.epsilon) {
                return Err(Error::InvalidConfig(format!(
                    "adv.ball_radius ({}) must be at least adv.epsilon ({})",
                    self.ball_radius, self.epsilon
                )));
            }
        }
        Ok(())
    }
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

/// `x + ε·sign(grad)`, with `sign(0) = 0`.
pub fn fgsm_perturb(x: &Array2<f64>, grad: &Array2<f64>, epsilon: f64) -> Result<Array2<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if x.dim() != grad.dim() {
        return Err(Error::Shape(format!("input {:?} vs gradient {:?}", x.dim(), grad.dim())));
    }
    let mut out = x.clone();
    out.zip_mut_with(grad, |v, &g| *v += epsilon * sign(g));
    Ok(out)
}

/// Clamp `x_prime - origin` coordinate-wise to `[-radius, radius]`.
pub fn project_linf(x_prime: &Array2<f64>, origin: &Array2<f64>, radius: f64) -> Result<Array2<f64>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    if x_prime.dim() != origin.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x_prime.dim(), origin.dim())));
    }
    let mut out = x_prime.clone();
    out.zip_mut_with(origin, |v, &o| *v = o + (*v - o).clamp(-radius, radius));
    Ok(out)
}

/// Batch loss and its gradient w.r.t. the input embeddings.
pub fn input_gradient(
    model: &VerbClassifier,
    loss: LossKind,
    x: &Array2<f64>,
    positives: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let fwd = model.forward(x)?;
    let (value, dlogits) = loss.batch_loss(fwd.logits(), positives)?;
    let grads = model.backward(&fwd, &dlogits)?;
    Ok((value, grads.input))
}

/// Every PGD iterate, starting with the (possibly randomized) start point.
pub fn pgd_trajectory<R: Rng + ?Sized>(
    model: &VerbClassifier,
    loss: LossKind,
    x: &Array2<f64>,
    positives: &[usize],
    cfg: &AdvConfig,
    rng: Option<&mut R>,
) -> Result<Vec<Array2<f64>>> {
    if cfg.method != AdvMethod::Pgd {
        return Err(Error::InvalidArgument(format!("pgd_attack called with method {}", cfg.method)));
    }
    cfg.validate()?;
    let mut current = x.clone();
    if cfg.random_start {
        if let Some(rng) = rng {
            let r = cfg.ball_radius;
            current.mapv_inplace(|v| v + rng.random_range(-r..=r));
        }
    }
    let mut iterates = Vec::with_capacity(cfg.steps + 1);
    iterates.push(current.clone());
    for _ in 0..cfg.steps {
        let (_, grad) = input_gradient(model, loss, &current, positives)?;
        let stepped = fgsm_perturb(&current, &grad, cfg.epsilon)?;
        current = project_linf(&stepped, x, cfg.ball_radius)?;
        iterates.push(current.clone());
    }
    Ok(iterates)
}

/// Projected gradient ascent on the loss inside the ℓ∞ ball around `x`.
pub fn pgd_attack<R: Rng + ?Sized>(
    model: &VerbClassifier,
    loss: LossKind,
    x: &Array2<f64>,
    positives: &[usize],
    cfg: &AdvConfig,
    rng: Option<&mut R>,
) -> Result<Array2<f64>> {
    let mut iterates = pgd_trajectory(model, loss, x, positives, cfg, rng)?;
    Ok(iterates.pop().expect("at least the start point"))
}

/// Clean inputs paired row-for-row with their adversarial counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub clean: Array2<f64>,
    /// `None` when the method is [`AdvMethod::None`].
    pub adversarial: Option<Array2<f64>>,
}

impl AdversarialBatch {
    pub fn pairs(&self) -> usize {
        self.adversarial.as_ref().map_or(0, Array2::nrows)
    }
}

/// Build the adversarial half of a training batch.
pub fn adversarial_batch<R: Rng + ?Sized>(
    model: &VerbClassifier,
    loss: LossKind,
    x: &Array2<f64>,
    positives: &[usize],
    cfg: &AdvConfig,
    rng: Option<&mut R>,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let adversarial = match cfg.method {
        AdvMethod::None => None,
        AdvMethod::Fgsm => {
            let (_, grad) = input_gradient(model, loss, x, positives)?;
            Some(fgsm_perturb(x, &grad, cfg.epsilon)?)
        }
        AdvMethod::Pgd => Some(pgd_attack(model, loss, x, positives, cfg, rng)?),
    };
    Ok(AdversarialBatch {
        clean: x.clone(),
        adversarial,
    })
}
