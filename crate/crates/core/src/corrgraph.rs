//! Class-correlation graph built from class-definition embeddings.
//!
//! Three stages turn semantic embeddings into the propagation matrix used by
//! the GCN head:
//!
//! 1. [`build_similarity_matrix`]: dense cosine similarity `a_ij`.
//! 2. [`knn_sparsify`]: keep the `K` most similar *other* classes per row.
//!    Negative similarities are clamped to zero first, and ties at the cut
//!    are won by the lower class index.
//! 3. [`smooth`]: rescale the kept neighbors of row `i` to sum to `s` and put
//!    `1 - s` on the diagonal, so every row of the result sums to one.
//!
//! Matrices are indexed by `class_id`, not by input order.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

/// Row-sum and diagonal tolerance used when validating a loaded graph.
pub const GRAPH_TOLERANCE: f64 = 1e-9;

/// One class of the label vocabulary with its semantic embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSemantic {
    pub class_id: usize,
    pub name: String,
    pub definition: String,
    pub embedding: Vec<f64>,
}

impl ClassSemantic {
    /// Sentence fed to a sentence encoder when no richer frame text exists.
    pub fn sentence(&self) -> String {
        format!("{}: {}", self.name, self.definition)
    }
}

/// Dense cosine similarity between class embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    entries: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn num_classes(&self) -> usize {
        self.entries.nrows()
    }

    /// Wrap a square matrix, checking symmetry, unit diagonal, and range.
    pub fn from_entries(entries: Array2<f64>) -> Result<Self> {
        let l = entries.nrows();
        if entries.ncols() != l {
            return Err(Error::Shape(format!(
                "similarity matrix must be square, got {}x{}",
                l,
                entries.ncols()
            )));
        }
        for i in 0..l {
            if (entries[[i, i]] - 1.0).abs() > GRAPH_TOLERANCE {
                return Err(Error::InvalidInput(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..l {
                let v = entries[[i, j]];
                if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                    return Err(Error::InvalidInput(format!("entry ({i},{j}) = {v} outside [-1, 1]")));
                }
                if v != entries[[j, i]] {
                    return Err(Error::InvalidInput(format!("entry ({i},{j}) is not symmetric")));
                }
            }
        }
        Ok(Self { entries })
    }
}

/// Output of [`knn_sparsify`]: at most `k` nonnegative off-diagonal weights
/// per row. Not necessarily symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSimilarity {
    entries: Array2<f64>,
    k: usize,
}

impl SparseSimilarity {
    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Row-stochastic, sparsified class graph driving GCN propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationGraph {
    entries: Array2<f64>,
    k: usize,
    s: f64,
}

impl CorrelationGraph {
    /// Full pipeline: similarity, sparsification, smoothing.
    pub fn from_semantics(semantics: &[ClassSemantic], k: usize, s: f64) -> Result<Self> {
        let a = build_similarity_matrix(semantics)?;
        let sparse = knn_sparsify(&a, k)?;
        smooth(&sparse, s)
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn num_classes(&self) -> usize {
        self.entries.nrows()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    /// Check every invariant a graph must satisfy. Returns the offending row
    /// index alongside the message so file loaders can cite a line.
    fn check(entries: &Array2<f64>, k: usize, s: f64) -> std::result::Result<(), (usize, String)> {
        let l = entries.nrows();
        if !(s > 0.0 && s < 1.0) {
            return Err((0, format!("smoothing weight s = {s} must lie in (0, 1)")));
        }
        for i in 0..l {
            let row = entries.row(i);
            if row.iter().any(|v| !v.is_finite()) {
                return Err((i, "non-finite entry".into()));
            }
            if row[i] != 1.0 - s {
                return Err((i, format!("diagonal {} differs from 1 - s = {}", row[i], 1.0 - s)));
            }
            let mut nonzeros = 0;
            for (j, &v) in row.iter().enumerate() {
                if j == i {
                    continue;
                }
                if v < 0.0 {
                    return Err((i, format!("negative off-diagonal entry at column {j}")));
                }
                if v != 0.0 {
                    nonzeros += 1;
                }
            }
            if nonzeros > k {
                return Err((i, format!("{nonzeros} off-diagonal nonzeros exceed k = {k}")));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > GRAPH_TOLERANCE {
                return Err((i, format!("row sums to {sum}, expected 1")));
            }
        }
        Ok(())
    }
}

/// Cosine similarity between every pair of class embeddings, indexed by
/// `class_id`.
pub fn build_similarity_matrix(semantics: &[ClassSemantic]) -> Result<SimilarityMatrix> {
    let ordered = order_by_class_id(semantics)?;
    let l = ordered.len();
    let dim = ordered[0].embedding.len();
    let mut norms = Vec::with_capacity(l);
    for c in &ordered {
        if c.embedding.len() != dim {
            return Err(Error::InvalidInput(format!(
                "class {} has embedding dimension {}, expected {dim}",
                c.class_id,
                c.embedding.len()
            )));
        }
        if c.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "class {} has a non-finite embedding entry",
                c.class_id
            )));
        }
        let norm = dot(&c.embedding, &c.embedding).sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidInput(format!(
                "class {} has a zero-norm embedding",
                c.class_id
            )));
        }
        norms.push(norm);
    }

    let mut entries = Array2::<f64>::eye(l);
    for i in 0..l {
        for j in (i + 1)..l {
            let cos = dot(&ordered[i].embedding, &ordered[j].embedding) / (norms[i] * norms[j]);
            let cos = cos.clamp(-1.0, 1.0);
            entries[[i, j]] = cos;
            entries[[j, i]] = cos;
        }
    }
    Ok(SimilarityMatrix { entries })
}

/// Keep, for every row, the `k` largest off-diagonal similarities.
///
/// Negative similarities are clamped to zero before ranking. The diagonal is
/// carried through untouched.
pub fn knn_sparsify(a: &SimilarityMatrix, k: usize) -> Result<SparseSimilarity> {
    let l = a.num_classes();
    if k == 0 || k >= l {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in [1, {}]",
            l.saturating_sub(1)
        )));
    }
    let mut entries = Array2::<f64>::zeros((l, l));
    let mut candidates: Vec<(usize, f64)> = Vec::with_capacity(l - 1);
    for i in 0..l {
        candidates.clear();
        candidates.extend((0..l).filter(|&j| j != i).map(|j| (j, a.entries[[i, j]].max(0.0))));
        // Descending value; equal values keep ascending index order.
        candidates.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        for &(j, v) in candidates.iter().take(k) {
            entries[[i, j]] = v;
        }
        entries[[i, i]] = a.entries[[i, i]];
    }
    Ok(SparseSimilarity { entries, k })
}

/// Normalize each row's kept neighbors to total `s` and set the diagonal to
/// `1 - s`.
pub fn smooth(sparse: &SparseSimilarity, s: f64) -> Result<CorrelationGraph> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidArgument(format!("s = {s} must lie in (0, 1)")));
    }
    let l = sparse.entries.nrows();
    let mut entries = Array2::<f64>::zeros((l, l));
    for i in 0..l {
        let total: f64 = (0..l).filter(|&j| j != i).map(|j| sparse.entries[[i, j]]).sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateRow { class: i });
        }
        for j in 0..l {
            if j != i {
                entries[[i, j]] = s * sparse.entries[[i, j]] / total;
            }
        }
        entries[[i, i]] = 1.0 - s;
    }
    Ok(CorrelationGraph {
        entries,
        k: sparse.k,
        s,
    })
}

/// Write the graph as JSON with one matrix row per line.
pub fn save_graph(graph: &CorrelationGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    // Line 1 holds the scalars; row i sits on line i + 2.
    let _ = writeln!(
        out,
        "{{\"l\": {}, \"k\": {}, \"s\": {}, \"rows\": [",
        graph.num_classes(),
        graph.k,
        serde_json::to_string(&graph.s).expect("finite float")
    );
    let l = graph.num_classes();
    for (i, row) in graph.entries.rows().into_iter().enumerate() {
        let row: Vec<f64> = row.to_vec();
        let sep = if i + 1 < l { "," } else { "" };
        let _ = writeln!(out, "{}{sep}", serde_json::to_string(&row).expect("finite floats"));
    }
    out.push_str("]}\n");
    fsutil::write_atomic(path, out.as_bytes())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    l: usize,
    k: usize,
    s: f64,
    rows: Vec<Vec<f64>>,
}

/// Read and validate a graph written by [`save_graph`].
pub fn load_graph(path: impl AsRef<Path>) -> Result<CorrelationGraph> {
    let path = path.as_ref();
    let text = fsutil::read_to_string(path)?;
    let file: GraphFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    if file.rows.len() != file.l {
        return Err(Error::validation(
            path,
            1,
            format!("expected {} rows, found {}", file.l, file.rows.len()),
        ));
    }
    let mut entries = Array2::<f64>::zeros((file.l, file.l));
    for (i, row) in file.rows.iter().enumerate() {
        if row.len() != file.l {
            return Err(Error::validation(
                path,
                i + 2,
                format!("row {i} has {} entries, expected {}", row.len(), file.l),
            ));
        }
        for (j, &v) in row.iter().enumerate() {
            entries[[i, j]] = v;
        }
    }
    CorrelationGraph::check(&entries, file.k, file.s)
        .map_err(|(row, msg)| Error::validation(path, row + 2, format!("row {row}: {msg}")))?;
    Ok(CorrelationGraph {
        entries,
        k: file.k,
        s: file.s,
    })
}

/// Read class metadata (JSON Lines, one [`ClassSemantic`] per line),
/// returned in `class_id` order.
pub fn load_class_semantics(path: impl AsRef<Path>) -> Result<Vec<ClassSemantic>> {
    let path = path.as_ref();
    let text = fsutil::read_to_string(path)?;
    let mut classes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let class: ClassSemantic =
            serde_json::from_str(line).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
        let norm = dot(&class.embedding, &class.embedding).sqrt();
        if class.embedding.iter().any(|v| !v.is_finite()) || norm == 0.0 {
            return Err(Error::validation(
                path,
                idx + 1,
                format!("class {} needs a finite, nonzero embedding", class.class_id),
            ));
        }
        classes.push(class);
    }
    let ordered = order_by_class_id(&classes).map_err(|e| Error::validation(path, 0, e.to_string()))?;
    Ok(ordered.into_iter().cloned().collect())
}

/// Write class metadata as JSON Lines in `class_id` order.
pub fn save_class_semantics(classes: &[ClassSemantic], path: impl AsRef<Path>) -> Result<()> {
    let ordered = order_by_class_id(classes)?;
    let mut out = String::new();
    for c in ordered {
        out.push_str(&serde_json::to_string(c).expect("serializable class"));
        out.push('\n');
    }
    fsutil::write_atomic(path.as_ref(), out.as_bytes())
}

fn order_by_class_id(semantics: &[ClassSemantic]) -> Result<Vec<&ClassSemantic>> {
    if semantics.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes, got {}",
            semantics.len()
        )));
    }
    let mut seen = HashSet::new();
    for c in semantics {
        if !seen.insert(c.class_id) {
            return Err(Error::InvalidInput(format!("duplicate class_id {}", c.class_id)));
        }
        if c.class_id >= semantics.len() {
            return Err(Error::InvalidInput(format!(
                "class_id {} is not contiguous in [0, {})",
                c.class_id,
                semantics.len()
            )));
        }
    }
    let mut ordered: Vec<&ClassSemantic> = semantics.iter().collect();
    ordered.sort_by_key(|c| c.class_id);
    Ok(ordered)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
