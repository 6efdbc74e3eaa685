//! Embedding datasets: JSON Lines I/O, deterministic batching, statistics,
//! and a synthetic generator with overlapping classes.
//!
//! File layout:
//!
//! ```text
//! {"meta": {"l": 10, "d": 32}}
//! {"id": "s0", "embedding": [...], "positive": 3, "labels": [3, 4]}
//! ...
//! ```
//!
//! Embeddings are ℓ2-normalized whenever a [`Dataset`] is built, so the
//! adversarial ℓ∞ budget means the same thing on every dataset.

use std::collections::HashSet;
use std::path::Path;

use log::warn;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corrgraph::ClassSemantic;
use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub id: String,
    pub embedding: Vec<f64>,
    /// The single observed label.
    pub positive: usize,
    /// Complete label set, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub l: usize,
    pub d: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    meta: Meta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<EmbeddingRecord>,
    num_classes: usize,
    dim: usize,
    split: Split,
}

impl Dataset {
    /// Validate and ℓ2-normalize. Test splits must carry full label sets.
    pub fn new(records: Vec<EmbeddingRecord>, num_classes: usize, dim: usize, split: Split) -> Result<Self> {
        let mut records = records;
        for (i, r) in records.iter_mut().enumerate() {
            validate_record(r, num_classes, dim, split == Split::Test)
                .map_err(|m| Error::InvalidInput(format!("record {i} ({}): {m}", r.id)))?;
        }
        Ok(Self {
            records,
            num_classes,
            dim,
            split,
        })
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn has_labels(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.labels.is_some())
    }

    /// Embeddings of `indices` stacked into a `len x dim` matrix.
    pub fn embeddings(&self, indices: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((indices.len(), self.dim));
        for (row, &i) in indices.iter().enumerate() {
            for (k, &v) in self.records[i].embedding.iter().enumerate() {
                out[[row, k]] = v;
            }
        }
        out
    }

    pub fn all_embeddings(&self) -> Array2<f64> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.embeddings(&all)
    }

    pub fn positives(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.records[i].positive).collect()
    }

    /// Full label sets, if every record has one.
    pub fn label_sets(&self) -> Option<Vec<Vec<usize>>> {
        self.records.iter().map(|r| r.labels.clone()).collect()
    }
}

fn validate_record(r: &mut EmbeddingRecord, l: usize, d: usize, need_labels: bool) -> std::result::Result<(), String> {
    if r.embedding.len() != d {
        return Err(format!("embedding has {} entries, expected {d}", r.embedding.len()));
    }
    if r.embedding.iter().any(|v| !v.is_finite()) {
        return Err("embedding has a non-finite entry".into());
    }
    if r.positive >= l {
        return Err(format!("positive label {} out of range for {l} classes", r.positive));
    }
    match &mut r.labels {
        Some(labels) => {
            if let Some(bad) = labels.iter().find(|&&c| c >= l) {
                return Err(format!("label {bad} out of range for {l} classes"));
            }
            labels.sort_unstable();
            labels.dedup();
            if !labels.contains(&r.positive) {
                return Err(format!("positive label {} is not in the label set", r.positive));
            }
        }
        None if need_labels => return Err("missing full label set".into()),
        None => {}
    }
    let norm = r.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err("embedding has zero norm".into());
    }
    for v in &mut r.embedding {
        *v /= norm;
    }
    Ok(())
}

/// Read a JSON Lines dataset. `expect_labels` marks it as a test split whose
/// records must all carry full label sets.
pub fn load_jsonl(path: impl AsRef<Path>, expect_labels: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fsutil::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::validation(path, 1, "missing {\"meta\": ...} header line"))?;
    let header: Header = serde_json::from_str(first)
        .map_err(|e| Error::parse(path, 1, format!("bad header line: {e}")))?;
    let Meta { l, d } = header.meta;
    if l == 0 || d == 0 {
        return Err(Error::validation(path, 1, "header needs positive l and d"));
    }

    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let mut record: EmbeddingRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        validate_record(&mut record, l, d, expect_labels).map_err(|m| Error::validation(path, lineno, m))?;
        if !ids.insert(record.id.clone()) {
            warn!("{}:{lineno}: duplicate id `{}` (kept)", path.display(), record.id);
        }
        records.push(record);
    }
    Ok(Dataset {
        records,
        num_classes: l,
        dim: d,
        split: if expect_labels { Split::Test } else { Split::Train },
    })
}

/// Write a dataset in the format read by [`load_jsonl`].
pub fn write_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = serde_json::to_string(&serde_json::json!({
        "meta": {"l": dataset.num_classes, "d": dataset.dim}
    }))
    .expect("header serializes");
    out.push('\n');
    for r in &dataset.records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fsutil::write_atomic(path.as_ref(), out.as_bytes())
}

/// Shuffled mini-batches of record indices. The permutation depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn split_and_batch(len: usize, batch: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch).map(<[usize]>::to_vec).collect())
}

/// Label statistics mirroring the dataset-characteristics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_images: usize,
    pub total_unique_labels: usize,
    pub total_label_occurrences: usize,
    pub average_labels_per_image: f64,
    pub median_labels_per_image: f64,
    pub min_labels_per_image: usize,
    pub max_labels_per_image: usize,
    /// Occurrences of each class, indexed by class id.
    pub per_class_frequency: Vec<usize>,
}

pub fn dataset_stats(dataset: &Dataset) -> Result<DatasetStats> {
    let sets = dataset
        .label_sets()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::State("dataset statistics need full label sets on every record".into()))?;
    let mut counts: Vec<usize> = sets.iter().map(Vec::len).collect();
    let mut per_class = vec![0usize; dataset.num_classes];
    for set in &sets {
        for &c in set {
            per_class[c] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    counts.sort_unstable();
    let n = counts.len();
    let median = if n % 2 == 1 {
        counts[n / 2] as f64
    } else {
        (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0
    };
    Ok(DatasetStats {
        total_images: n,
        total_unique_labels: per_class.iter().filter(|&&c| c > 0).count(),
        total_label_occurrences: total,
        average_labels_per_image: total as f64 / n as f64,
        median_labels_per_image: median,
        min_labels_per_image: counts[0],
        max_labels_per_image: counts[n - 1],
        per_class_frequency: per_class,
    })
}

/// Parameters of the synthetic ambiguous-classes generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    /// Partition of `0..classes` into overlap groups.
    pub groups: Vec<Vec<usize>>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Distance between group anchors.
    pub separation: f64,
    /// Distance of each class center from its group anchor.
    pub overlap_radius: f64,
    /// Expected norm of the per-sample Gaussian noise.
    pub noise: f64,
    /// Expected norm of the noise added to class centers to form the class
    /// semantic embeddings.
    pub semantic_noise: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            groups: vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8, 9]],
            train_per_class: 50,
            test_per_class: 50,
            separation: 1.5,
            overlap_radius: 0.6,
            noise: 0.8,
            semantic_noise: 0.3,
            dim: 64,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 {
            return Err(Error::InvalidConfig("synthetic data needs at least 2 classes and dim >= 1".into()));
        }
        if self.groups.iter().any(Vec::is_empty) {
            return Err(Error::InvalidConfig("overlap groups must be nonempty".into()));
        }
        let mut seen = vec![false; self.classes];
        for &c in self.groups.iter().flatten() {
            if c >= self.classes || seen[c] {
                return Err(Error::InvalidConfig(format!(
                    "groups must partition 0..{}; class {c} is out of range or repeated",
                    self.classes
                )));
            }
            seen[c] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidConfig(format!("class {c} belongs to no group")));
        }
        for (name, v) in [
            ("separation", self.separation),
            ("overlap_radius", self.overlap_radius),
            ("noise", self.noise),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.semantic_noise >= 0.0) {
            return Err(Error::InvalidConfig("semantic_noise must be nonnegative".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidConfig("samples per class must be positive".into()));
        }
        Ok(())
    }

    /// Samples within this distance of a class center carry that class.
    pub fn membership_radius(&self) -> f64 {
        0.5 * (self.overlap_radius + self.separation)
    }
}

/// Output of [`gen_synthetic_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSuite {
    pub train: Dataset,
    pub test: Dataset,
    /// Class metadata whose embeddings follow the group structure, for
    /// building the correlation graph.
    pub classes: Vec<ClassSemantic>,
    /// Unnormalized class centers, one row per class.
    pub centers: Array2<f64>,
}

/// Train and test splits of the synthetic ambiguous-classes data.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    let suite = gen_synthetic_suite(cfg)?;
    Ok((suite.train, suite.test))
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Group anchors on mutually orthogonal directions when the dimension
/// allows, so every pair of anchors sits exactly `separation` apart.
fn group_anchors(rng: &mut impl Rng, groups: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let radius = separation / std::f64::consts::SQRT_2;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(groups);
    for _ in 0..groups {
        let mut v = unit_gaussian(rng, dim);
        if basis.len() < dim {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut v {
                *x /= n;
            }
        }
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * radius).collect())
        .collect()
}

/// Generate the synthetic suite: shared group anchors, class centers offset
/// from their anchor by `overlap_radius`, Gaussian samples around each
/// center. A sample's full label set is every class whose center lies within
/// [`SynthConfig::membership_radius`] (always including its own class);
/// training records keep one label drawn uniformly from that set.
pub fn gen_synthetic_suite(cfg: &SynthConfig) -> Result<SyntheticSuite> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let anchors = group_anchors(&mut rng, cfg.groups.len(), cfg.dim, cfg.separation);

    let mut group_of = vec![0usize; cfg.classes];
    for (g, members) in cfg.groups.iter().enumerate() {
        for &c in members {
            group_of[c] = g;
        }
    }
    let centers: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|c| {
            let offset = unit_gaussian(&mut rng, cfg.dim);
            anchors[group_of[c]]
                .iter()
                .zip(&offset)
                .map(|(a, o)| a + cfg.overlap_radius * o)
                .collect()
        })
        .collect();

    let sigma = cfg.noise / (cfg.dim as f64).sqrt();
    let membership = cfg.membership_radius();
    let sample = |rng: &mut ChaCha8Rng, class: usize| -> (Vec<f64>, Vec<usize>) {
        let x: Vec<f64> = centers[class]
            .iter()
            .map(|&m| {
                let n: f64 = StandardNormal.sample(rng);
                m + sigma * n
            })
            .collect();
        let labels: Vec<usize> = (0..cfg.classes)
            .filter(|&c| c == class || dist(&x, &centers[c]) <= membership)
            .collect();
        (x, labels)
    };

    let mut train = Vec::with_capacity(cfg.classes * cfg.train_per_class);
    let mut test = Vec::with_capacity(cfg.classes * cfg.test_per_class);
    for class in 0..cfg.classes {
        for i in 0..cfg.train_per_class {
            let (x, labels) = sample(&mut rng, class);
            let positive = labels[rng.random_range(0..labels.len())];
            train.push(EmbeddingRecord {
                id: format!("train-{class}-{i}"),
                embedding: x,
                positive,
                labels: Some(labels),
            });
        }
    }
    for class in 0..cfg.classes {
        for i in 0..cfg.test_per_class {
            let (x, labels) = sample(&mut rng, class);
            test.push(EmbeddingRecord {
                id: format!("test-{class}-{i}"),
                embedding: x,
                positive: class,
                labels: Some(labels),
            });
        }
    }

    let sem_sigma = cfg.semantic_noise / (cfg.dim as f64).sqrt();
    let classes = (0..cfg.classes)
        .map(|c| ClassSemantic {
            class_id: c,
            name: format!("class_{c:02}"),
            definition: format!("synthetic class {c} in overlap group {}", group_of[c]),
            embedding: centers[c]
                .iter()
                .map(|&m| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    m + sem_sigma * n
                })
                .collect(),
        })
        .collect();

    let mut center_matrix = Array2::zeros((cfg.classes, cfg.dim));
    for (c, row) in centers.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            center_matrix[[c, k]] = v;
        }
    }
    Ok(SyntheticSuite {
        train: Dataset::new(train, cfg.classes, cfg.dim, Split::Train)?,
        test: Dataset::new(test, cfg.classes, cfg.dim, Split::Test)?,
        classes,
        centers: center_matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    const HEADER: &str = r#"{"meta": {"l": 3, "d": 2}}"#;

    #[test]
    fn loads_valid_records_normalized() {
        let f = write_lines(&[
            HEADER,
            r#"{"id": "a", "embedding": [3.0, 4.0], "positive": 0, "labels": [0, 2]}"#,
            r#"{"id": "b", "embedding": [1.0, 0.0], "positive": 1, "labels": [1]}"#,
            r#"{"id": "c", "embedding": [0.0, -2.0], "positive": 2, "labels": [2]}"#,
        ]);
        let ds = load_jsonl(f.path(), true).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.records()[0].embedding, vec![0.6, 0.8]);
        for r in ds.records() {
            let n: f64 = r.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn positive_outside_labels_is_validation_error() {
        let f = write_lines(&[
            HEADER,
            r#"{"id": "a", "embedding": [3.0, 4.0], "positive": 1, "labels": [0, 2]}"#,
        ]);
        match load_jsonl(f.path(), true).unwrap_err() {
            Error::Validation { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn dimension_and_range_errors_cite_lines() {
        let f = write_lines(&[
            HEADER,
            r#"{"id": "a", "embedding": [3.0, 4.0], "positive": 0}"#,
            r#"{"id": "b", "embedding": [3.0], "positive": 0}"#,
        ]);
        assert!(matches!(load_jsonl(f.path(), false), Err(Error::Validation { line: 3, .. })));
        let f = write_lines(&[HEADER, r#"{"id": "a", "embedding": [3.0, 4.0], "positive": 7}"#]);
        assert!(matches!(load_jsonl(f.path(), false), Err(Error::Validation { line: 2, .. })));
    }

    #[test]
    fn missing_labels_rejected_only_when_expected() {
        let f = write_lines(&[HEADER, r#"{"id": "a", "embedding": [3.0, 4.0], "positive": 0}"#]);
        assert!(load_jsonl(f.path(), false).is_ok());
        assert!(matches!(load_jsonl(f.path(), true), Err(Error::Validation { line: 2, .. })));
    }

    #[test]
    fn duplicate_ids_are_kept() {
        let f = write_lines(&[
            HEADER,
            r#"{"id": "a", "embedding": [3.0, 4.0], "positive": 0}"#,
            r#"{"id": "a", "embedding": [1.0, 4.0], "positive": 1}"#,
        ]);
        assert_eq!(load_jsonl(f.path(), false).unwrap().len(), 2);
    }

    #[test]
    fn missing_header_and_garbage() {
        let f = write_lines(&[r#"{"id": "a", "embedding": [3.0, 4.0], "positive": 0}"#]);
        assert!(matches!(load_jsonl(f.path(), false), Err(Error::Parse { line: 1, .. })));
        let f = write_lines(&[HEADER, "{not json"]);
        assert!(matches!(load_jsonl(f.path(), false), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn batches_keep_short_tail() {
        let batches = split_and_batch(10, 4, 1, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_order_is_pure_in_seed_and_epoch() {
        assert_eq!(split_and_batch(20, 3, 9, 4).unwrap(), split_and_batch(20, 3, 9, 4).unwrap());
        assert_ne!(split_and_batch(20, 20, 9, 0).unwrap(), split_and_batch(20, 20, 9, 1).unwrap());
        assert!(split_and_batch(3, 0, 9, 0).is_err());
    }

    fn labeled(sets: &[&[usize]], l: usize) -> Dataset {
        let records = sets
            .iter()
            .enumerate()
            .map(|(i, s)| EmbeddingRecord {
                id: i.to_string(),
                embedding: vec![1.0],
                positive: s[0],
                labels: Some(s.to_vec()),
            })
            .collect();
        Dataset::new(records, l, 1, Split::Test).unwrap()
    }

    #[test]
    fn stats_by_hand() {
        let s = dataset_stats(&labeled(&[&[0], &[0, 1, 2]], 4)).unwrap();
        assert_eq!(s.total_images, 2);
        assert_eq!(s.total_label_occurrences, 4);
        assert_eq!(s.average_labels_per_image, 2.0);
        assert_eq!(s.median_labels_per_image, 2.0);
        assert_eq!(s.min_labels_per_image, 1);
        assert_eq!(s.max_labels_per_image, 3);
        assert_eq!(s.per_class_frequency, vec![2, 1, 1, 0]);
        assert_eq!(s.total_unique_labels, 3);
        let s = dataset_stats(&labeled(&[&[0], &[1], &[2]], 3)).unwrap();
        assert_eq!(s.average_labels_per_image, 1.0);
    }

    #[test]
    fn stats_need_labels() {
        let records = vec![EmbeddingRecord {
            id: "a".into(),
            embedding: vec![1.0],
            positive: 0,
            labels: None,
        }];
        let ds = Dataset::new(records, 2, 1, Split::Train).unwrap();
        assert!(matches!(dataset_stats(&ds), Err(Error::State(_))));
    }

    #[test]
    fn synthetic_sizes_and_membership() {
        let cfg = SynthConfig::default();
        let suite = gen_synthetic_suite(&cfg).unwrap();
        assert_eq!(suite.train.len(), 500);
        assert_eq!(suite.test.len(), 500);
        assert_eq!(suite.classes.len(), 10);
        for r in suite.train.records().iter().chain(suite.test.records()) {
            let labels = r.labels.as_ref().unwrap();
            assert!(!labels.is_empty());
            assert!(labels.contains(&r.positive));
        }
    }

    #[test]
    fn synthetic_tight_clusters_are_singletons() {
        let cfg = SynthConfig {
            overlap_radius: 1e-3,
            separation: 50.0,
            noise: 0.1,
            groups: (0..10).map(|c| vec![c]).collect(),
            ..SynthConfig::default()
        };
        let suite = gen_synthetic_suite(&cfg).unwrap();
        assert!(suite
            .test
            .records()
            .iter()
            .all(|r| r.labels.as_ref().unwrap().len() == 1));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(gen_synthetic_suite(&cfg).unwrap(), gen_synthetic_suite(&cfg).unwrap());
    }

    #[test]
    fn synthetic_rejects_bad_groups() {
        let mut cfg = SynthConfig::default();
        cfg.groups.push(vec![]);
        assert!(matches!(gen_synthetic(&cfg), Err(Error::InvalidConfig(_))));
        let cfg = SynthConfig {
            groups: vec![vec![0, 1, 2]],
            ..SynthConfig::default()
        };
        assert!(gen_synthetic(&cfg).is_err());
    }

    #[test]
    fn write_then_load() {
        let suite = gen_synthetic_suite(&SynthConfig {
            train_per_class: 3,
            test_per_class: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.jsonl");
        write_jsonl(&suite.test, &path).unwrap();
        let back = load_jsonl(&path, true).unwrap();
        assert_eq!(back.len(), suite.test.len());
        for (a, b) in back.records().iter().zip(suite.test.records()) {
            assert_eq!(a.labels, b.labels);
            for (x, y) in a.embedding.iter().zip(&b.embedding) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
