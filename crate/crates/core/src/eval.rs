//! Ranking metrics and co-annotation analysis.
//!
//! Ties are always broken toward the lower index: lower class index in
//! top-k accuracy, lower sample index in average precision.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::VerbClassifier;

pub const MAP_FLAVOR: &str = "macro";

/// Fraction of rows whose single positive ranks among the `k` best scores.
pub fn topk_accuracy(scores: &Array2<f64>, positives: &[usize], k: usize) -> Result<f64> {
    let (n, l) = scores.dim();
    if k == 0 || k > l {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in [1, {l}]")));
    }
    if positives.len() != n {
        return Err(Error::Shape(format!("{} positives for {n} score rows", positives.len())));
    }
    if n == 0 {
        return Err(Error::InvalidInput("no samples to evaluate".into()));
    }
    let mut hits = 0usize;
    for (row, &pos) in scores.rows().into_iter().zip(positives) {
        if pos >= l {
            return Err(Error::InvalidArgument(format!("positive {pos} out of range")));
        }
        let target = row[pos];
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > target || (s == target && j < pos))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Mean precision at the rank of each relevant sample; `None` when nothing
/// is relevant.
pub fn average_precision(scores: &[f64], relevance: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), relevance.len(), "scores and relevance differ in length");
    let relevant = relevance.iter().filter(|&&r| r).count();
    if relevant == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevance[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / relevant as f64)
}

/// Average precision of every class column; `None` for classes with no
/// positive sample.
pub fn per_class_ap(scores: &Array2<f64>, labels: &[Vec<usize>]) -> Result<Vec<Option<f64>>> {
    let (n, l) = scores.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} label sets for {n} score rows", labels.len())));
    }
    Ok((0..l)
        .map(|c| {
            let column: Vec<f64> = scores.column(c).to_vec();
            let relevance: Vec<bool> = labels.iter().map(|s| s.contains(&c)).collect();
            average_precision(&column, &relevance)
        })
        .collect())
}

/// Unweighted mean of per-class AP over classes with at least one positive.
pub fn macro_map(scores: &Array2<f64>, labels: &[Vec<usize>]) -> Result<f64> {
    mean_defined(&per_class_ap(scores, labels)?)
}

fn mean_defined(aps: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::InvalidInput("no class has a positive instance".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub top1: f64,
    /// Top-5 accuracy (top-L when there are fewer than five classes).
    pub top5: f64,
    pub map: Option<f64>,
    pub per_class_ap: Vec<Option<f64>>,
    pub n_eval: usize,
    pub config_fingerprint: String,
    pub map_flavor: String,
    /// Why `map` is absent, when it is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_note: Option<String>,
}

/// Score `dataset` with `model` and compute every metric it supports.
pub fn evaluate(model: &VerbClassifier, dataset: &Dataset, config_fingerprint: &str) -> Result<MetricsReport> {
    let scores = model.predict_probs(&dataset.all_embeddings())?;
    report_from_scores(&scores, dataset, config_fingerprint)
}

pub fn report_from_scores(scores: &Array2<f64>, dataset: &Dataset, config_fingerprint: &str) -> Result<MetricsReport> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let positives = dataset.positives(&all);
    let l = scores.ncols();
    let top1 = topk_accuracy(scores, &positives, 1)?;
    let top5 = topk_accuracy(scores, &positives, l.min(5))?;
    let (map, per_class, note) = match dataset.label_sets() {
        Some(sets) if !sets.is_empty() => {
            let aps = per_class_ap(scores, &sets)?;
            (Some(mean_defined(&aps)?), aps, None)
        }
        _ => (
            None,
            Vec::new(),
            Some("evaluation set has no full label sets; MAP needs them".to_string()),
        ),
    };
    Ok(MetricsReport {
        top1,
        top5,
        map,
        per_class_ap: per_class,
        n_eval: dataset.len(),
        config_fingerprint: config_fingerprint.to_string(),
        map_flavor: MAP_FLAVOR.to_string(),
        map_note: note,
    })
}

pub fn write_report(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report).map_err(|e| Error::InvalidInput(e.to_string()))?;
    bytes.push(b'\n');
    fsutil::write_atomic(path.as_ref(), &bytes)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let text = fsutil::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

/// Empirical co-annotation rates `count(a and b) / count(a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    /// Row `a` is `None` when class `a` is never annotated.
    pub rows: Vec<Option<Vec<f64>>>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub class: usize,
    pub other: usize,
    pub correlation: f64,
}

impl CorrelationTable {
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        self.rows[a].as_ref().map(|r| r[b])
    }

    /// Off-diagonal pairs whose correlation exceeds the threshold.
    pub fn above_threshold(&self) -> Vec<CorrelationEntry> {
        let mut out = Vec::new();
        for (a, row) in self.rows.iter().enumerate() {
            let Some(row) = row else { continue };
            for (b, &c) in row.iter().enumerate() {
                if a != b && c > self.threshold {
                    out.push(CorrelationEntry {
                        class: a,
                        other: b,
                        correlation: c,
                    });
                }
            }
        }
        out
    }
}

pub fn label_correlation(labels: &[Vec<usize>], num_classes: usize, threshold: f64) -> Result<CorrelationTable> {
    let mut counts = vec![0usize; num_classes];
    let mut joint = vec![vec![0usize; num_classes]; num_classes];
    for set in labels {
        for &a in set {
            if a >= num_classes {
                return Err(Error::InvalidArgument(format!("label {a} out of range")));
            }
            counts[a] += 1;
            for &b in set {
                joint[a][b] += 1;
            }
        }
    }
    let rows = (0..num_classes)
        .map(|a| {
            (counts[a] > 0).then(|| {
                (0..num_classes)
                    .map(|b| joint[a][b] as f64 / counts[a] as f64)
                    .collect()
            })
        })
        .collect();
    Ok(CorrelationTable { rows, threshold })
}
