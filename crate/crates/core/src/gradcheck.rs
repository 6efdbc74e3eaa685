//! Finite-difference check of [`VerbClassifier::backward`].
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of the analytic gradient code it audits.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corrgraph::{ClassSemantic, CorrelationGraph};
use crate::error::Result;
use crate::losses::{LossKind, DEFAULT_FOCAL_ALPHA, DEFAULT_FOCAL_GAMMA, PROB_CLAMP};
use crate::model::{random_matrix, ModelDims, VerbClassifier};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Pass threshold for the maximum relative error.
pub const MAX_REL_ERROR: f64 = 1e-4;

/// Draws whose smallest rectified pre-activation lies closer to zero than this
/// are redrawn, since a central difference across a ReLU kink is meaningless.
pub const KINK_MARGIN: f64 = 1e-3;

/// Draws with a sample embedding shorter than this are redrawn, since the
/// cosine head is ill-conditioned near the origin.
pub const NORM_MARGIN: f64 = 5e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Which model / loss / tensor produced the maximum.
    pub worst: String,
    pub models: usize,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < MAX_REL_ERROR
    }
}

/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Gradient magnitude below which the difference quotient's own roundoff
/// exceeds [`MAX_REL_ERROR`]. A log term at probability `p` carries an
/// absolute error near `eps / min(p, 1 - p)`, so the loss noise is that sum
/// averaged over the batch plus `eps * max(1, |loss|)`, divided by the step.
pub fn roundoff_floor(probs: &Array2<f64>, loss: f64) -> f64 {
    let conditioning: f64 = probs.iter().map(|&p| 1.0 / p.min(1.0 - p).max(PROB_CLAMP)).sum::<f64>()
        / probs.nrows().max(1) as f64
        + loss.abs().max(1.0);
    f64::EPSILON * conditioning / (FD_STEP * MAX_REL_ERROR)
}

/// Fourth-order central difference of `f` at offset 0 with step [`FD_STEP`].
fn central(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let h = FD_STEP;
    let near = f(h)? - f(-h)?;
    let far = f(2.0 * h)? - f(-2.0 * h)?;
    Ok((8.0 * near - far) / (12.0 * h))
}

fn loss_at(model: &VerbClassifier, x: &Array2<f64>, positives: &[usize], loss: LossKind) -> Result<f64> {
    let fwd = model.infer(x)?;
    Ok(loss.batch_loss(fwd.logits(), positives)?.0)
}

/// Largest relative error over every parameter entry and every input entry,
/// with a label naming where it occurred.
pub fn check_model(
    model: &VerbClassifier,
    x: &Array2<f64>,
    positives: &[usize],
    loss: LossKind,
) -> Result<(f64, String, usize)> {
    let fwd = model.forward(x)?;
    let (value, dlogits) = loss.batch_loss(fwd.logits(), positives)?;
    let grads = model.backward(&fwd, &dlogits)?;
    let floor = roundoff_floor(&fwd.probs(), value);

    let mut worst = (0.0, String::from("none"));
    let mut entries = 0;
    let analytic = grads.parameters();
    let mut probe = model.clone();
    for (t, tensor) in analytic.iter().enumerate() {
        for i in 0..tensor.len() {
            let orig = probe.parameters_mut()[t][i];
            let numeric = central(|dh| {
                probe.parameters_mut()[t][i] = orig + dh;
                loss_at(&probe, x, positives, loss)
            })?;
            probe.parameters_mut()[t][i] = orig;
            let err = relative_error(tensor[i], numeric, floor);
            entries += 1;
            if err > worst.0 || err.is_nan() {
                worst = (err, format!("tensor {t} entry {i}: analytic {} numeric {numeric}", tensor[i]));
            }
        }
    }

    let mut xp = x.clone();
    for ((b, k), &a) in grads.input.indexed_iter() {
        let orig = xp[[b, k]];
        let numeric = central(|dh| {
            xp[[b, k]] = orig + dh;
            loss_at(model, &xp, positives, loss)
        })?;
        xp[[b, k]] = orig;
        let err = relative_error(a, numeric, floor);
        entries += 1;
        if err > worst.0 || err.is_nan() {
            worst = (err, format!("input ({b},{k}): analytic {a} numeric {numeric}"));
        }
    }
    Ok((worst.0, worst.1, entries))
}

/// A random model small enough for exhaustive finite differences:
/// every width at most 8, at most 6 classes, `gcn_layers` GCN layers.
pub fn random_tiny_model(rng: &mut impl Rng, gcn_layers: usize) -> Result<VerbClassifier> {
    let classes = rng.random_range(2..=6);
    let dims = ModelDims {
        input: rng.random_range(2..=8),
        hidden: rng.random_range(2..=8),
        embed: rng.random_range(2..=8),
        layers: rng.random_range(1..=3),
        classes,
        gcn_layers,
    };
    let graph = if gcn_layers > 0 {
        let sem_dim = rng.random_range(2..=6);
        let semantics: Vec<ClassSemantic> = (0..classes)
            .map(|c| ClassSemantic {
                class_id: c,
                name: format!("class{c}"),
                definition: String::new(),
                embedding: (0..sem_dim).map(|_| rng.random_range(0.1..1.0)).collect(),
            })
            .collect();
        let k = rng.random_range(1..classes);
        let s = rng.random_range(0.2..0.8);
        Some(CorrelationGraph::from_semantics(&semantics, k, s)?)
    } else {
        None
    };
    let scale = rng.random_range(1.0..10.0);
    let mut model = VerbClassifier::init(dims, graph, scale, rng.random())?;
    // Nonzero biases keep dead-ReLU layers from producing zero embeddings.
    for b in &mut model.encoder.biases {
        b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    Ok(model)
}

/// Run [`check_model`] on `models` random tiny models, cycling through
/// `J = 0, 1, 2` and checking all three losses on each. A model and batch are
/// redrawn together until every ReLU input is at least [`KINK_MARGIN`] from 0
/// and every embedding is at least [`NORM_MARGIN`] long.
pub fn random_suite(seed: u64, models: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let losses = [
        LossKind::Ce,
        LossKind::Bce,
        LossKind::Focal {
            gamma: DEFAULT_FOCAL_GAMMA,
            alpha: DEFAULT_FOCAL_ALPHA,
        },
    ];
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: "none".into(),
        models,
        entries: 0,
    };
    for m in 0..models {
        let (model, x) = loop {
            let model = random_tiny_model(&mut rng, m % 3)?;
            let batch = rng.random_range(1..=4);
            let x = random_matrix(&mut rng, batch, model.dims().input, 1.0);
            let fwd = model.forward(&x)?;
            if fwd.relu_margin() >= KINK_MARGIN && fwd.min_embedding_norm() >= NORM_MARGIN {
                break (model, x);
            }
        };
        let positives: Vec<usize> = (0..x.nrows())
            .map(|_| rng.random_range(0..model.dims().classes))
            .collect();
        for loss in losses {
            let (err, where_, entries) = check_model(&model, &x, &positives, loss)?;
            report.entries += entries;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = format!("model {m} (J={}), loss {}: {where_}", m % 3, loss.name());
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let report = random_suite(7, 9).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.entries > 100);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        assert!(relative_error(1.0, 1.01, 1e-6) > MAX_REL_ERROR);
        assert!(relative_error(0.0, 0.0, 1e-6) == 0.0);
        assert!(relative_error(1e-9, 2e-9, 1e-3) < MAX_REL_ERROR);
    }

    #[test]
    fn floor_grows_with_saturated_probabilities() {
        let calm = roundoff_floor(&ndarray::array![[0.5, 0.5]], 1.0);
        let saturated = roundoff_floor(&ndarray::array![[1.0 - 1e-4, 0.5]], 1.0);
        assert!(saturated > 100.0 * calm);
        assert!(calm < 1e-5);
    }
}
