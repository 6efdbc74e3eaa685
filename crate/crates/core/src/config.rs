//! Flat `key=value` configuration with `#` comments.
//!
//! Precedence is defaults, then the file, then command-line overrides. A key
//! repeated in the file keeps its last value and produces a warning.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{AdvConfig, AdvMethod};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::losses::{LossKind, DEFAULT_FOCAL_ALPHA, DEFAULT_FOCAL_GAMMA};
use crate::model::ModelDims;

/// Learning rate of the reference setup.
pub const DEFAULT_LR: f64 = 2e-4;
/// Per-epoch learning-rate discount.
pub const DEFAULT_GAMMA_LR: f64 = 0.9;
pub const DEFAULT_HIDDEN: usize = 1024;
pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_COSINE_SCALE: f64 = 10.0;
pub const DEFAULT_GCN_LAYERS: usize = 2;
pub const DEFAULT_KNN_K: usize = 3;
pub const DEFAULT_SMOOTH_S: f64 = 0.5;
pub const DEFAULT_EPOCHS: usize = 30;
pub const DEFAULT_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossChoice {
    Ce,
    Bce,
    Focal,
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub gamma_lr: f64,
    pub hidden: usize,
    /// Encoder output width; `None` means "same as hidden".
    pub embed: Option<usize>,
    pub layers: usize,
    pub cosine_scale: f64,
    pub gcn_layers: usize,
    pub knn_k: usize,
    pub smooth_s: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub loss: LossChoice,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub adv: AdvConfig,
    pub graph: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            gamma_lr: DEFAULT_GAMMA_LR,
            hidden: DEFAULT_HIDDEN,
            embed: None,
            layers: DEFAULT_LAYERS,
            cosine_scale: DEFAULT_COSINE_SCALE,
            gcn_layers: DEFAULT_GCN_LAYERS,
            knn_k: DEFAULT_KNN_K,
            smooth_s: DEFAULT_SMOOTH_S,
            epochs: DEFAULT_EPOCHS,
            batch: DEFAULT_BATCH,
            seed: 0,
            loss: LossChoice::Bce,
            focal_gamma: DEFAULT_FOCAL_GAMMA,
            focal_alpha: DEFAULT_FOCAL_ALPHA,
            adv: AdvConfig::default(),
            graph: None,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "lr",
    "gamma_lr",
    "hidden",
    "embed",
    "layers",
    "cosine_scale",
    "gcn_layers",
    "knn_k",
    "smooth_s",
    "epochs",
    "batch",
    "seed",
    "loss",
    "focal.gamma",
    "focal.alpha",
    "adv.method",
    "adv.epsilon",
    "adv.ball_radius",
    "adv.steps",
    "adv.random_start",
    "graph",
];

pub const SYNTH_KEYS: &[&str] = &[
    "seed",
    "synth.classes",
    "synth.groups",
    "synth.train_per_class",
    "synth.test_per_class",
    "synth.separation",
    "synth.overlap_radius",
    "synth.noise",
    "synth.semantic_noise",
    "synth.dim",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn unknown_key(key: &str, valid: &[&str]) -> Error {
    Error::InvalidConfig(format!("unknown key `{key}`; valid keys: {}", valid.join(", ")))
}

impl TrainConfig {
    /// Set one key. Unknown keys are rejected with the list of valid ones.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse_num(key, value)?,
            "gamma_lr" => self.gamma_lr = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "embed" => self.embed = Some(parse_num(key, value)?),
            "layers" => self.layers = parse_num(key, value)?,
            "cosine_scale" => self.cosine_scale = parse_num(key, value)?,
            "gcn_layers" => self.gcn_layers = parse_num(key, value)?,
            "knn_k" => self.knn_k = parse_num(key, value)?,
            "smooth_s" => self.smooth_s = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "loss" => {
                self.loss = match value {
                    "ce" => LossChoice::Ce,
                    "bce" => LossChoice::Bce,
                    "focal" => LossChoice::Focal,
                    other => {
                        return Err(Error::InvalidConfig(format!(
                            "unknown loss `{other}` (expected ce, bce or focal)"
                        )))
                    }
                }
            }
            "focal.gamma" => self.focal_gamma = parse_num(key, value)?,
            "focal.alpha" => self.focal_alpha = parse_num(key, value)?,
            "adv.method" => self.adv.method = value.parse::<AdvMethod>()?,
            "adv.epsilon" => self.adv.epsilon = parse_num(key, value)?,
            "adv.ball_radius" => self.adv.ball_radius = parse_num(key, value)?,
            "adv.steps" => self.adv.steps = parse_num(key, value)?,
            "adv.random_start" => self.adv.random_start = parse_bool(key, value)?,
            "graph" => self.graph = Some(value.to_string()),
            other => return Err(unknown_key(other, TRAIN_KEYS)),
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.loss {
            LossChoice::Ce => LossKind::Ce,
            LossChoice::Bce => LossKind::Bce,
            LossChoice::Focal => LossKind::Focal {
                gamma: self.focal_gamma,
                alpha: self.focal_alpha,
            },
        }
    }

    pub fn model_dims(&self, input: usize, classes: usize) -> ModelDims {
        ModelDims {
            input,
            hidden: self.hidden,
            embed: self.embed.unwrap_or(self.hidden),
            layers: self.layers,
            classes,
            gcn_layers: self.gcn_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.gamma_lr > 0.0 && self.gamma_lr <= 1.0) {
            return Err(Error::InvalidConfig(format!("gamma_lr must lie in (0, 1], got {}", self.gamma_lr)));
        }
        if !(self.cosine_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cosine_scale must be positive, got {}",
                self.cosine_scale
            )));
        }
        if self.loss == LossChoice::Focal && !(self.focal_gamma >= 0.0 && self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::InvalidConfig("focal.gamma must be >= 0 and focal.alpha in (0, 1)".into()));
        }
        self.adv.validate()
    }

    /// Canonical `key=value` listing of every setting, in [`TRAIN_KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let loss = match self.loss {
            LossChoice::Ce => "ce",
            LossChoice::Bce => "bce",
            LossChoice::Focal => "focal",
        };
        vec![
            ("lr", self.lr.to_string()),
            ("gamma_lr", self.gamma_lr.to_string()),
            ("hidden", self.hidden.to_string()),
            ("embed", self.embed.unwrap_or(self.hidden).to_string()),
            ("layers", self.layers.to_string()),
            ("cosine_scale", self.cosine_scale.to_string()),
            ("gcn_layers", self.gcn_layers.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("smooth_s", self.smooth_s.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("loss", loss.to_string()),
            ("focal.gamma", self.focal_gamma.to_string()),
            ("focal.alpha", self.focal_alpha.to_string()),
            ("adv.method", self.adv.method.to_string()),
            ("adv.epsilon", self.adv.epsilon.to_string()),
            ("adv.ball_radius", self.adv.ball_radius.to_string()),
            ("adv.steps", self.adv.steps.to_string()),
            ("adv.random_start", self.adv.random_start.to_string()),
            ("graph", self.graph.clone().unwrap_or_default()),
        ]
    }

    /// Short hash of the canonical settings, for tagging reports.
    pub fn fingerprint(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(text, "{k}={v}");
        }
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Key-value pairs of a config file in file order, with 1-based line numbers.
pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<(usize, String, String)>> {
    let path = path.as_ref();
    let text = fsutil::read_to_string(path)?;
    parse_pairs(&text, path)
}

fn parse_pairs(text: &str, path: &Path) -> Result<Vec<(usize, String, String)>> {
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, idx + 1, format!("expected key=value, got `{line}`")))?;
        pairs.push((idx + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Warn about keys set more than once; the last occurrence wins.
fn duplicate_warnings(path: &Path, pairs: &[(usize, String, String)]) -> Vec<String> {
    let mut warnings = Vec::new();
    for (i, (line, key, _)) in pairs.iter().enumerate() {
        if pairs[i + 1..].iter().any(|(_, k, _)| k == key) {
            let msg = format!(
                "{}:{line}: key `{key}` is set again later; the last value wins",
                path.display()
            );
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    warnings
}

/// Resolve a training config: defaults, then `path`, then `overrides`.
/// Returns the config and any warnings raised while reading the file.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<(TrainConfig, Vec<String>)> {
    let mut cfg = TrainConfig::default();
    let mut warnings = Vec::new();
    if let Some(path) = path {
        let pairs = read_pairs(path)?;
        warnings = duplicate_warnings(path, &pairs);
        for (line, key, value) in &pairs {
            cfg.set(key, value).map_err(|e| Error::validation(path, *line, e.to_string()))?;
        }
    }
    for (key, value) in overrides {
        cfg.set(key, value)?;
    }
    Ok((cfg, warnings))
}

fn parse_groups(value: &str) -> Result<Vec<Vec<usize>>> {
    value
        .split(';')
        .map(|g| {
            g.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|c| parse_num::<usize>("synth.groups", c))
                .collect()
        })
        .collect()
}

/// Render groups in the `0,1,2;3,4` form read by `synth.groups`.
pub fn format_groups(groups: &[Vec<usize>]) -> String {
    groups
        .iter()
        .map(|g| g.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

fn set_synth(cfg: &mut SynthConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "seed" => cfg.seed = parse_num(key, value)?,
        "synth.classes" => cfg.classes = parse_num(key, value)?,
        "synth.groups" => cfg.groups = parse_groups(value)?,
        "synth.train_per_class" => cfg.train_per_class = parse_num(key, value)?,
        "synth.test_per_class" => cfg.test_per_class = parse_num(key, value)?,
        "synth.separation" => cfg.separation = parse_num(key, value)?,
        "synth.overlap_radius" => cfg.overlap_radius = parse_num(key, value)?,
        "synth.noise" => cfg.noise = parse_num(key, value)?,
        "synth.semantic_noise" => cfg.semantic_noise = parse_num(key, value)?,
        "synth.dim" => cfg.dim = parse_num(key, value)?,
        other => return Err(unknown_key(other, SYNTH_KEYS)),
    }
    Ok(())
}

/// Resolve a synthetic-data config with the same precedence rules.
pub fn parse_synth_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<(SynthConfig, Vec<String>)> {
    let mut cfg = SynthConfig::default();
    let mut warnings = Vec::new();
    if let Some(path) = path {
        let pairs = read_pairs(path)?;
        warnings = duplicate_warnings(path, &pairs);
        for (line, key, value) in &pairs {
            set_synth(&mut cfg, key, value).map_err(|e| Error::validation(path, *line, e.to_string()))?;
        }
    }
    for (key, value) in overrides {
        set_synth(&mut cfg, key, value)?;
    }
    Ok((cfg, warnings))
}
