//! Adam with per-epoch exponential decay, and the training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{adversarial_batch, AdvMethod};
use crate::config::TrainConfig;
use crate::corrgraph::CorrelationGraph;
use crate::data::{split_and_batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Gradients, VerbClassifier};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[&[f64]]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// One update of every tensor with learning rate `lr`.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!("tensor {i} changed size")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `lr = base_lr * gamma^epoch`, advanced once per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpSchedule {
    base_lr: f64,
    gamma: f64,
    epoch: usize,
}

impl ExpSchedule {
    pub fn new(base_lr: f64, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("discount {gamma} must lie in (0, 1]")));
        }
        Ok(Self {
            base_lr,
            gamma,
            epoch: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.base_lr * self.gamma.powi(self.epoch as i32)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Move to the next epoch and return its learning rate.
    pub fn step(&mut self) -> f64 {
        self.epoch += 1;
        self.lr()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VerbClassifier,
    pub log: Vec<EpochLog>,
}

/// Train a fresh model on `dataset`.
///
/// Each epoch walks a `(seed, epoch)`-determined shuffle in mini-batches.
/// With adversarial training on, the batch loss (and gradient) is the mean of
/// the clean and adversarial losses. `on_epoch` sees every log record as soon
/// as the epoch finishes.
pub fn train(
    dataset: &Dataset,
    graph: Option<CorrelationGraph>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let dims = cfg.model_dims(dataset.dim(), dataset.num_classes());
    let graph = if dims.gcn_layers > 0 { graph } else { None };
    let mut model = VerbClassifier::init(dims, graph, cfg.cosine_scale, cfg.seed)?;
    let loss_kind = cfg.loss_kind();
    let mut adam = AdamState::new(&model.parameters());
    let mut schedule = ExpSchedule::new(cfg.lr, cfg.gamma_lr)?;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = schedule.lr();
        let mut attack_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_adc0_ffee_0000);
        attack_rng.set_stream(epoch as u64);
        let mut loss_sum = 0.0;
        for (b, indices) in split_and_batch(dataset.len(), cfg.batch, cfg.seed, epoch)?
            .into_iter()
            .enumerate()
        {
            let x = dataset.embeddings(&indices);
            let positives = dataset.positives(&indices);

            let fwd = model.forward(&x)?;
            let (mut loss, dlogits) = loss_kind.batch_loss(fwd.logits(), &positives)?;
            let mut grads: Gradients = model.backward(&fwd, &dlogits)?;

            if cfg.adv.method != AdvMethod::None {
                let batch = adversarial_batch(&model, loss_kind, &x, &positives, &cfg.adv, Some(&mut attack_rng))?;
                let x_adv = batch.adversarial.expect("adversarial half present");
                let fwd_adv = model.forward(&x_adv)?;
                let (loss_adv, dlogits_adv) = loss_kind.batch_loss(fwd_adv.logits(), &positives)?;
                let grads_adv = model.backward(&fwd_adv, &dlogits_adv)?;
                loss = 0.5 * (loss + loss_adv);
                grads.average_with(&grads_adv);
            }

            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    norms: model.parameter_norms(),
                });
            }
            loss_sum += loss * indices.len() as f64;
            let grad_tensors = grads.parameters();
            adam.step(model.parameters_mut(), grad_tensors, lr)?;
        }
        let record = EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / dataset.len() as f64,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record)?;
        log.push(record);
        schedule.step();
    }
    Ok(TrainOutcome { model, log })
}

/// Training with its file side effects: the effective config goes to the
/// first line of the JSON Lines log before any computation, one record per
/// epoch follows, and the final checkpoint is written atomically.
pub fn train_to_files(
    dataset: &Dataset,
    graph: Option<CorrelationGraph>,
    cfg: &TrainConfig,
    checkpoint: &Path,
    log_path: &Path,
) -> Result<TrainOutcome> {
    let file = File::create(log_path).map_err(|e| Error::io(log_path, e))?;
    let mut writer = BufWriter::new(file);
    let header = serde_json::json!({ "config": cfg, "fingerprint": cfg.fingerprint() });
    writeln!(writer, "{header}").map_err(|e| Error::io(log_path, e))?;
    writer.flush().map_err(|e| Error::io(log_path, e))?;

    let outcome = train(dataset, graph, cfg, |record| {
        let line = serde_json::to_string(record).expect("log record serializes");
        writeln!(writer, "{line}").map_err(|e| Error::io(log_path, e))?;
        writer.flush().map_err(|e| Error::io(log_path, e))
    })?;
    save_checkpoint(&outcome.model, cfg.graph.as_deref(), checkpoint)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let g = vec![0.0, 0.0];
        let mut adam = AdamState::new(&[&p]);
        adam.step(vec![&mut p], vec![&g], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(adam.timestep(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut p = vec![1.0, 1.0, 1.0];
        let g = vec![0.5, -3.0, 1e-3];
        let mut adam = AdamState::new(&[&p]);
        adam.step(vec![&mut p], vec![&g], 2e-4).unwrap();
        // m̂ = g and v̂ = g², so the step is lr * g / (|g| + eps).
        for (pi, gi) in p.iter().zip(&g) {
            let expect = 1.0 - 2e-4 * gi / (gi.abs() + 1e-8);
            assert!((pi - expect).abs() < 1e-15);
            assert!(((1.0 - pi) - 2e-4 * gi.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![1.0, 1.0];
        let g = vec![0.5];
        let mut adam = AdamState::new(&[&p]);
        assert!(matches!(adam.step(vec![&mut p], vec![&g], 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn schedule_values() {
        let mut s = ExpSchedule::new(2e-4, 0.9).unwrap();
        assert_eq!(s.lr(), 2e-4);
        assert!((s.step() - 1.8e-4).abs() < 1e-18);
        let mut prev = s.lr();
        for _ in 0..9 {
            let next = s.step();
            assert!(next <= prev);
            prev = next;
        }
        assert_eq!(s.epoch(), 10);
        assert!((s.lr() - 6.9736e-5).abs() < 1e-9);
    }
}
