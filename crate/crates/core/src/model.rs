//! The graph-enhanced cosine classifier and its explicit backward pass.
//!
//! Forward pass for a batch `X` (`B x d_in`, one row per sample):
//!
//! ```text
//! E      = MLP(X)                         rectifier between layers, none after the last
//! C_1    = learnable class centers        L x d_e, one row per class
//! C_j+1  = relu(Â · C_j · W_j)            j = 1..J
//! Ĉ      = C_1 + C_J+1                    (Ĉ = C_1 when J = 0)
//! logit  = scale · cos(e_b, ĉ_j)
//! p(j|x) = sigmoid(logit)
//! ```
//!
//! Centers are stored with classes as rows so the `L x L` graph left-multiplies
//! them directly. The backward pass is written out by hand and checked against
//! central finite differences in the tests and in [`crate::gradcheck`].

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::corrgraph::CorrelationGraph;
use crate::error::{Error, Result};
use crate::fsutil;

/// Added to vector norms inside the cosine head.
pub const NORM_FLOOR: f64 = 1e-12;

/// Standard deviation of the noise added to the identity GCN initialization.
pub const GCN_INIT_NOISE: f64 = 1e-2;

/// Layer sizes of a [`VerbClassifier`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Width of the frozen-backbone embedding.
    pub input: usize,
    /// Width of the hidden encoder layers.
    pub hidden: usize,
    /// Width of the encoder output and of the class centers.
    pub embed: usize,
    /// Number of encoder layers (at least 1).
    pub layers: usize,
    /// Number of classes.
    pub classes: usize,
    /// Number of GCN layers; 0 disables refinement.
    pub gcn_layers: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input", self.input),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("layers", self.layers),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("dimension `{name}` must be positive")));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every encoder layer.
    pub fn encoder_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|k| {
                let fan_in = if k == 0 { self.input } else { self.hidden };
                let fan_out = if k + 1 == self.layers { self.embed } else { self.hidden };
                (fan_in, fan_out)
            })
            .collect()
    }
}

/// Trainable MLP applied on top of the frozen embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Learnable class centers, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters(pub Array2<f64>);

/// Square GCN weight matrices `W_1..W_J`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnStack {
    pub weights: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerbClassifier {
    dims: ModelDims,
    pub encoder: MlpEncoder,
    pub centers: ClassCenters,
    pub gcn: GcnStack,
    graph: Option<CorrelationGraph>,
    cosine_scale: f64,
}

/// Gradients for every trainable tensor, plus the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder_weights: Vec<Array2<f64>>,
    pub encoder_biases: Vec<Array1<f64>>,
    pub centers: Array2<f64>,
    pub gcn_weights: Vec<Array2<f64>>,
    pub input: Array2<f64>,
}

/// Result of a forward pass. Carries the intermediates needed by
/// [`VerbClassifier::backward`] unless produced by [`VerbClassifier::infer`].
#[derive(Debug, Clone)]
pub struct Forward {
    logits: Array2<f64>,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    x: Array2<f64>,
    /// Pre-activation of every encoder layer; the last one is `E`.
    pre: Vec<Array2<f64>>,
    /// Rectified hidden activations (one per non-final layer).
    hidden: Vec<Array2<f64>>,
    /// `Â · C_j` for every GCN layer.
    propagated: Vec<Array2<f64>>,
    /// `Â · C_j · W_j` for every GCN layer.
    gcn_pre: Vec<Array2<f64>>,
    refined: Array2<f64>,
    cos: Array2<f64>,
}

impl Forward {
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn probs(&self) -> Array2<f64> {
        self.logits.mapv(sigmoid)
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Smallest `|z|` over every rectified pre-activation, or infinity when
    /// nothing is rectified or the pass kept no cache.
    pub fn relu_margin(&self) -> f64 {
        let Some(cache) = &self.cache else {
            return f64::INFINITY;
        };
        let rectified = cache.pre.len().saturating_sub(1);
        cache.pre[..rectified]
            .iter()
            .chain(&cache.gcn_pre)
            .flat_map(|z| z.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// Smallest row norm of the sample embeddings, or infinity without a cache.
    pub fn min_embedding_norm(&self) -> f64 {
        let Some(cache) = &self.cache else {
            return f64::INFINITY;
        };
        cache.pre[cache.pre.len() - 1]
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

impl VerbClassifier {
    /// Deterministic initialization from `seed`.
    ///
    /// Encoder weights are uniform with He fan-in scaling and zero biases;
    /// centers are zero-mean Gaussian with variance `1/embed`; GCN weights
    /// start at the identity plus small noise.
    pub fn init(
        dims: ModelDims,
        graph: Option<CorrelationGraph>,
        cosine_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut weights = Vec::with_capacity(dims.layers);
        let mut biases = Vec::with_capacity(dims.layers);
        for (fan_in, fan_out) in dims.encoder_shapes() {
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(&mut rng)));
            biases.push(Array1::zeros(fan_out));
        }

        let center_dist = Normal::new(0.0, (1.0 / dims.embed as f64).sqrt()).expect("valid std");
        let centers = Array2::from_shape_fn((dims.classes, dims.embed), |_| center_dist.sample(&mut rng));

        let noise = Normal::new(0.0, GCN_INIT_NOISE).expect("valid std");
        let gcn = (0..dims.gcn_layers)
            .map(|_| {
                let mut w = Array2::from_shape_fn((dims.embed, dims.embed), |_| noise.sample(&mut rng));
                for i in 0..dims.embed {
                    w[[i, i]] += 1.0;
                }
                w
            })
            .collect();

        Self::from_parts(
            dims,
            MlpEncoder { weights, biases },
            ClassCenters(centers),
            GcnStack { weights: gcn },
            graph,
            cosine_scale,
        )
    }

    /// Assemble a model from explicit parameters, checking every shape.
    pub fn from_parts(
        dims: ModelDims,
        encoder: MlpEncoder,
        centers: ClassCenters,
        gcn: GcnStack,
        graph: Option<CorrelationGraph>,
        cosine_scale: f64,
    ) -> Result<Self> {
        dims.validate()?;
        if !(cosine_scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cosine_scale must be positive, got {cosine_scale}"
            )));
        }
        let shapes = dims.encoder_shapes();
        if encoder.weights.len() != shapes.len() || encoder.biases.len() != shapes.len() {
            return Err(Error::Shape(format!("expected {} encoder layers", shapes.len())));
        }
        for (k, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            if encoder.weights[k].dim() != (fan_in, fan_out) || encoder.biases[k].len() != fan_out {
                return Err(Error::Shape(format!(
                    "encoder layer {k} must be {fan_in}x{fan_out} with {fan_out} biases"
                )));
            }
        }
        if centers.0.dim() != (dims.classes, dims.embed) {
            return Err(Error::Shape(format!(
                "centers must be {}x{}, got {:?}",
                dims.classes,
                dims.embed,
                centers.0.dim()
            )));
        }
        if gcn.weights.len() != dims.gcn_layers
            || gcn.weights.iter().any(|w| w.dim() != (dims.embed, dims.embed))
        {
            return Err(Error::Shape(format!(
                "expected {} GCN weights of shape {}x{}",
                dims.gcn_layers, dims.embed, dims.embed
            )));
        }
        let mut model = Self {
            dims,
            encoder,
            centers,
            gcn,
            graph: None,
            cosine_scale,
        };
        model.set_graph(graph)?;
        Ok(model)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn cosine_scale(&self) -> f64 {
        self.cosine_scale
    }

    pub fn graph(&self) -> Option<&CorrelationGraph> {
        self.graph.as_ref()
    }

    /// Attach (or detach) the correlation graph. A graph is mandatory when
    /// the model has GCN layers.
    pub fn set_graph(&mut self, graph: Option<CorrelationGraph>) -> Result<()> {
        match &graph {
            Some(g) if g.num_classes() != self.dims.classes => {
                return Err(Error::Shape(format!(
                    "graph has {} classes, model has {}",
                    g.num_classes(),
                    self.dims.classes
                )))
            }
            None if self.dims.gcn_layers > 0 => {
                return Err(Error::InvalidArgument(format!(
                    "{} GCN layers need a correlation graph",
                    self.dims.gcn_layers
                )))
            }
            _ => {}
        }
        self.graph = graph;
        Ok(())
    }

    /// The MLP encoder alone.
    pub fn encoder_forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.encoder.weights.len() - 1;
        for (k, (w, b)) in self.encoder.weights.iter().zip(&self.encoder.biases).enumerate() {
            let z = h.dot(w) + b;
            h = if k < last { z.mapv(relu) } else { z };
        }
        Ok(h)
    }

    /// Class centers after GCN refinement and the residual connection.
    pub fn refined_centers(&self) -> Result<Array2<f64>> {
        match &self.graph {
            Some(g) if self.dims.gcn_layers > 0 => {
                gcn_refine(&self.centers.0, g.entries().view(), &self.gcn.weights)
            }
            _ => Ok(self.centers.0.clone()),
        }
    }

    /// Probabilities for a batch, without caching intermediates.
    pub fn predict_probs(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.infer(x)?.probs())
    }

    /// Forward pass without a backward cache.
    pub fn infer(&self, x: &Array2<f64>) -> Result<Forward> {
        let e = self.encoder_forward(x)?;
        let refined = self.refined_centers()?;
        let cos = cosine_matrix(&e, &refined)?;
        Ok(Forward {
            logits: cos * self.cosine_scale,
            cache: None,
        })
    }

    /// Forward pass that keeps everything [`Self::backward`] needs.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Forward> {
        self.check_input(x)?;
        let last = self.encoder.weights.len() - 1;
        let mut pre = Vec::with_capacity(last + 1);
        let mut hidden = Vec::with_capacity(last);
        for (k, (w, b)) in self.encoder.weights.iter().zip(&self.encoder.biases).enumerate() {
            let input = if k == 0 { x } else { &hidden[k - 1] };
            let z = input.dot(w) + b;
            if k < last {
                hidden.push(z.mapv(relu));
            }
            pre.push(z);
        }

        let mut propagated = Vec::with_capacity(self.dims.gcn_layers);
        let mut gcn_pre = Vec::with_capacity(self.dims.gcn_layers);
        let refined = match (&self.graph, self.dims.gcn_layers) {
            (Some(g), j) if j > 0 => {
                let a = g.entries();
                let mut c = self.centers.0.clone();
                for w in &self.gcn.weights {
                    let p = a.dot(&c);
                    let q = p.dot(w);
                    c = q.mapv(relu);
                    propagated.push(p);
                    gcn_pre.push(q);
                }
                &self.centers.0 + &c
            }
            _ => self.centers.0.clone(),
        };

        let e = pre.last().expect("at least one layer");
        let cos = cosine_matrix(e, &refined)?;
        Ok(Forward {
            logits: &cos * self.cosine_scale,
            cache: Some(Cache {
                x: x.clone(),
                pre,
                hidden,
                propagated,
                gcn_pre,
                refined,
                cos,
            }),
        })
    }

    /// Reverse-mode gradients given `dL/dlogits` for the batch in `fwd`.
    pub fn backward(&self, fwd: &Forward, dlogits: &Array2<f64>) -> Result<Gradients> {
        let cache = fwd
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward needs a cached forward pass".into()))?;
        if dlogits.dim() != fwd.logits.dim() {
            return Err(Error::Shape(format!(
                "loss gradient is {:?}, logits are {:?}",
                dlogits.dim(),
                fwd.logits.dim()
            )));
        }
        let e = cache.pre.last().expect("at least one layer");
        let dcos = dlogits * self.cosine_scale;
        let (de, dref) = cosine_backward(e, &cache.refined, &cache.cos, &dcos);

        // Class centers: residual path plus the GCN chain.
        let mut dcenters = dref.clone();
        let mut dgcn = vec![Array2::zeros((self.dims.embed, self.dims.embed)); self.dims.gcn_layers];
        if let (Some(g), true) = (&self.graph, self.dims.gcn_layers > 0) {
            let a_t = g.entries().t();
            let mut dc = dref;
            for j in (0..self.dims.gcn_layers).rev() {
                let mut dq = dc;
                dq.zip_mut_with(&cache.gcn_pre[j], |d, &q| {
                    if q <= 0.0 {
                        *d = 0.0;
                    }
                });
                dgcn[j] = cache.propagated[j].t().dot(&dq);
                let dp = dq.dot(&self.gcn.weights[j].t());
                dc = a_t.dot(&dp);
            }
            dcenters += &dc;
        }

        // Encoder.
        let layers = self.encoder.weights.len();
        let mut dw = vec![Array2::zeros((0, 0)); layers];
        let mut db = vec![Array1::zeros(0); layers];
        let mut dz = de;
        let mut dx = Array2::zeros((0, 0));
        for k in (0..layers).rev() {
            let input = if k == 0 { &cache.x } else { &cache.hidden[k - 1] };
            dw[k] = input.t().dot(&dz);
            db[k] = dz.sum_axis(Axis(0));
            let dinput = dz.dot(&self.encoder.weights[k].t());
            if k == 0 {
                dx = dinput;
            } else {
                let mut d = dinput;
                d.zip_mut_with(&cache.pre[k - 1], |d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
                dz = d;
            }
        }

        Ok(Gradients {
            encoder_weights: dw,
            encoder_biases: db,
            centers: dcenters,
            gcn_weights: dgcn,
            input: dx,
        })
    }

    /// Every trainable tensor as a flat slice, in a fixed order.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in self.encoder.weights.iter().zip(&self.encoder.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out.push(self.centers.0.as_slice().expect("standard layout"));
        for w in &self.gcn.weights {
            out.push(w.as_slice().expect("standard layout"));
        }
        out
    }

    /// Mutable counterpart of [`Self::parameters`], same order.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, b) in self.encoder.weights.iter_mut().zip(self.encoder.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.centers.0.as_slice_mut().expect("standard layout"));
        for w in &mut self.gcn.weights {
            out.push(w.as_slice_mut().expect("standard layout"));
        }
        out
    }

    /// Human-readable L2 norm of every parameter tensor.
    pub fn parameter_norms(&self) -> String {
        let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut parts = Vec::new();
        for (k, (w, b)) in self.encoder.weights.iter().zip(&self.encoder.biases).enumerate() {
            parts.push(format!("encoder.w{k}={:.4e}", norm(w.as_slice().expect("standard layout"))));
            parts.push(format!("encoder.b{k}={:.4e}", norm(b.as_slice().expect("standard layout"))));
        }
        parts.push(format!("centers={:.4e}", norm(self.centers.0.as_slice().expect("standard layout"))));
        for (j, w) in self.gcn.weights.iter().enumerate() {
            parts.push(format!("gcn.w{j}={:.4e}", norm(w.as_slice().expect("standard layout"))));
        }
        parts.join(" ")
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.dims.input {
            return Err(Error::Shape(format!(
                "input rows have {} columns, model expects {}",
                x.ncols(),
                self.dims.input
            )));
        }
        Ok(())
    }
}

impl Gradients {
    /// Parameter gradients in the order of [`VerbClassifier::parameters`].
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in self.encoder_weights.iter().zip(&self.encoder_biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out.push(self.centers.as_slice().expect("standard layout"));
        for w in &self.gcn_weights {
            out.push(w.as_slice().expect("standard layout"));
        }
        out
    }

    /// `self = (self + other) / 2`, tensor by tensor.
    pub fn average_with(&mut self, other: &Gradients) {
        fn avg2(a: &mut Array2<f64>, b: &Array2<f64>) {
            a.zip_mut_with(b, |x, &y| *x = 0.5 * (*x + y));
        }
        for (a, b) in self.encoder_weights.iter_mut().zip(&other.encoder_weights) {
            avg2(a, b);
        }
        for (a, b) in self.encoder_biases.iter_mut().zip(&other.encoder_biases) {
            a.zip_mut_with(b, |x, &y| *x = 0.5 * (*x + y));
        }
        avg2(&mut self.centers, &other.centers);
        for (a, b) in self.gcn_weights.iter_mut().zip(&other.gcn_weights) {
            avg2(a, b);
        }
        avg2(&mut self.input, &other.input);
    }

    pub fn is_finite(&self) -> bool {
        self.parameters().iter().all(|t| t.iter().all(|v| v.is_finite()))
            && self.input.iter().all(|v| v.is_finite())
    }
}

/// `J` rounds of `C <- relu(Â C W_j)` followed by the residual `C_1 + C_J+1`.
/// With no weights the centers are returned unchanged.
pub fn gcn_refine(
    centers: &Array2<f64>,
    adjacency: ArrayView2<'_, f64>,
    weights: &[Array2<f64>],
) -> Result<Array2<f64>> {
    let (l, d) = centers.dim();
    if adjacency.dim() != (l, l) {
        return Err(Error::Shape(format!(
            "adjacency is {:?}, expected {l}x{l}",
            adjacency.dim()
        )));
    }
    if weights.iter().any(|w| w.dim() != (d, d)) {
        return Err(Error::Shape(format!("GCN weights must be {d}x{d}")));
    }
    if weights.is_empty() {
        return Ok(centers.clone());
    }
    let mut c = centers.clone();
    for w in weights {
        c = adjacency.dot(&c).dot(w).mapv(relu);
    }
    Ok(centers + &c)
}

/// Temperature-scaled cosine-sigmoid head: `sigmoid(scale * cos(e_b, ĉ_j))`.
pub fn predict_probs(embeddings: &Array2<f64>, refined: &Array2<f64>, scale: f64) -> Result<Array2<f64>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    Ok(cosine_matrix(embeddings, refined)?.mapv(|c| sigmoid(c * scale)))
}

fn row_norms(m: &Array2<f64>, what: &str) -> Result<Array1<f64>> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::NumericDegeneracy(format!("{what} {i} has zero or non-finite norm")));
    }
    Ok(norms)
}

/// `cos[b, j] = <e_b, c_j> / ((|e_b| + floor)(|c_j| + floor))`.
fn cosine_matrix(e: &Array2<f64>, c: &Array2<f64>) -> Result<Array2<f64>> {
    if e.ncols() != c.ncols() {
        return Err(Error::Shape(format!(
            "embedding width {} differs from center width {}",
            e.ncols(),
            c.ncols()
        )));
    }
    let ne = row_norms(e, "embedding")? + NORM_FLOOR;
    let nc = row_norms(c, "class center")? + NORM_FLOOR;
    let mut cos = e.dot(&c.t());
    for ((b, j), v) in cos.indexed_iter_mut() {
        *v /= ne[b] * nc[j];
    }
    Ok(cos)
}

/// Gradients of the cosine matrix w.r.t. both operands.
fn cosine_backward(
    e: &Array2<f64>,
    c: &Array2<f64>,
    cos: &Array2<f64>,
    dcos: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let raw_e = e.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let raw_c = c.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let ne = &raw_e + NORM_FLOOR;
    let nc = &raw_c + NORM_FLOOR;

    // d cos_bj / d e_b = c_j / (ne_b nc_j) - cos_bj e_b / (ne_b |e_b|)
    let mut scaled = dcos.clone();
    for ((b, j), v) in scaled.indexed_iter_mut() {
        *v /= ne[b] * nc[j];
    }
    let mut de = scaled.dot(c);
    let mut dc = scaled.t().dot(e);
    let weighted = dcos * cos;
    let row_e = weighted.sum_axis(Axis(1));
    let row_c = weighted.sum_axis(Axis(0));
    for (b, mut row) in de.rows_mut().into_iter().enumerate() {
        let coef = row_e[b] / (ne[b] * raw_e[b]);
        row.zip_mut_with(&e.row(b), |d, &x| *d -= coef * x);
    }
    for (j, mut row) in dc.rows_mut().into_iter().enumerate() {
        let coef = row_c[j] / (nc[j] * raw_c[j]);
        row.zip_mut_with(&c.row(j), |d, &x| *d -= coef * x);
    }
    (de, dc)
}

#[derive(Serialize, Deserialize)]
struct EncoderLayerFile {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    dims: ModelDims,
    encoder: Vec<EncoderLayerFile>,
    centers: Vec<Vec<f64>>,
    gcn: Vec<Vec<Vec<f64>>>,
    cosine_scale: f64,
    graph_path: Option<String>,
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Shape(format!("{what} has ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n, m), flat).map_err(|e| Error::Shape(format!("{what}: {e}")))
}

/// Serialize all parameters as JSON. The graph itself is referenced by path.
pub fn save_checkpoint(model: &VerbClassifier, graph_path: Option<&str>, path: impl AsRef<Path>) -> Result<()> {
    let file = CheckpointFile {
        dims: model.dims,
        encoder: model
            .encoder
            .weights
            .iter()
            .zip(&model.encoder.biases)
            .map(|(w, b)| EncoderLayerFile {
                weight: to_rows(w),
                bias: b.to_vec(),
            })
            .collect(),
        centers: to_rows(&model.centers.0),
        gcn: model.gcn.weights.iter().map(to_rows).collect(),
        cosine_scale: model.cosine_scale,
        graph_path: graph_path.map(str::to_owned),
    };
    let mut bytes = serde_json::to_vec(&file).map_err(|e| Error::InvalidInput(e.to_string()))?;
    bytes.push(b'\n');
    fsutil::write_atomic(path.as_ref(), &bytes)
}

/// A checkpoint read back from disk. The graph must be attached by the
/// caller (see [`Checkpoint::into_model`]).
#[derive(Debug)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub graph_path: Option<String>,
    parts: (MlpEncoder, ClassCenters, GcnStack, f64),
}

impl Checkpoint {
    pub fn into_model(self, graph: Option<CorrelationGraph>) -> Result<VerbClassifier> {
        let (encoder, centers, gcn, scale) = self.parts;
        VerbClassifier::from_parts(self.dims, encoder, centers, gcn, graph, scale)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fsutil::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (k, layer) in file.encoder.iter().enumerate() {
        weights.push(from_rows(&layer.weight, &format!("encoder layer {k}"))?);
        biases.push(Array1::from(layer.bias.clone()));
    }
    let gcn = file
        .gcn
        .iter()
        .enumerate()
        .map(|(j, w)| from_rows(w, &format!("gcn layer {j}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        dims: file.dims,
        graph_path: file.graph_path,
        parts: (
            MlpEncoder { weights, biases },
            ClassCenters(from_rows(&file.centers, "centers")?),
            GcnStack { weights: gcn },
            file.cosine_scale,
        ),
    })
}

/// CSV with one row per class: `class_id`, refined center, original center.
pub fn export_centers(model: &VerbClassifier, path: impl AsRef<Path>) -> Result<()> {
    let refined = model.refined_centers()?;
    let d = model.dims.embed;
    let mut out = String::from("class_id");
    for k in 0..d {
        let _ = write!(out, ",post_{k}");
    }
    for k in 0..d {
        let _ = write!(out, ",pre_{k}");
    }
    out.push('\n');
    for (j, (post, pre)) in refined.rows().into_iter().zip(model.centers.0.rows()).enumerate() {
        let _ = write!(out, "{j}");
        for v in post.iter().chain(pre.iter()) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fsutil::write_atomic(path.as_ref(), out.as_bytes())
}

/// Small random helper shared by tests and the gradient checker.
pub(crate) fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dims(input: usize, hidden: usize, layers: usize, classes: usize, gcn_layers: usize) -> ModelDims {
        ModelDims {
            input,
            hidden,
            embed: hidden,
            layers,
            classes,
            gcn_layers,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = VerbClassifier::init(dims(6, 5, 2, 3, 0), None, 10.0, 42).unwrap();
        let b = VerbClassifier::init(dims(6, 5, 2, 3, 0), None, 10.0, 42).unwrap();
        assert_eq!(a, b);
        let c = VerbClassifier::init(dims(6, 5, 2, 3, 0), None, 10.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes_match_reference_setup() {
        let m = VerbClassifier::init(dims(512, 1024, 2, 4, 0), None, 10.0, 0).unwrap();
        assert_eq!(m.encoder.weights[0].dim(), (512, 1024));
        assert_eq!(m.encoder.weights[1].dim(), (1024, 1024));
        assert_eq!(m.encoder.biases[0].len(), 1024);
        assert_eq!(m.encoder.biases[1].len(), 1024);
        assert!(m.gcn.weights.is_empty());
    }

    #[test]
    fn init_rejects_zero_dimension() {
        let err = VerbClassifier::init(dims(0, 4, 1, 3, 0), None, 10.0, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn gcn_layers_need_a_graph() {
        assert!(VerbClassifier::init(dims(3, 4, 1, 3, 1), None, 10.0, 0).is_err());
    }

    fn with_encoder(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>, classes: usize) -> VerbClassifier {
        let input = weights[0].nrows();
        let embed = weights.last().unwrap().ncols();
        let hidden = if weights.len() > 1 { weights[0].ncols() } else { embed };
        let dims = ModelDims {
            input,
            hidden,
            embed,
            layers: weights.len(),
            classes,
            gcn_layers: 0,
        };
        VerbClassifier::from_parts(
            dims,
            MlpEncoder { weights, biases },
            ClassCenters(Array2::from_elem((classes, embed), 1.0)),
            GcnStack { weights: vec![] },
            None,
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_encoder_gives_zero() {
        let m = with_encoder(vec![Array2::zeros((3, 2))], vec![Array1::zeros(2)], 2);
        let e = m.encoder_forward(&array![[1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(e, array![[0.0, 0.0]]);
    }

    #[test]
    fn identity_encoder() {
        let m = with_encoder(vec![Array2::eye(3)], vec![Array1::zeros(3)], 2);
        let x = array![[0.5, -1.5, 2.0]];
        assert_eq!(m.encoder_forward(&x).unwrap(), x);
    }

    #[test]
    fn encoder_two_layers_by_hand() {
        // relu([1, -1, 2, 0.5] W1 + b1) W2 + b2, evaluated by hand.
        let w1 = array![[1.0, 0.0], [2.0, -1.0], [0.0, 1.0], [-2.0, 3.0]];
        let b1 = array![0.5, -0.5];
        let w2 = array![[1.0, -1.0], [0.5, 2.0]];
        let b2 = array![0.0, 1.0];
        // layer 1: [1 - 2 + 0 - 1 + 0.5, 0 + 1 + 2 + 1.5 - 0.5] = [-1.5, 4.0] -> relu [0, 4]
        // layer 2: [0 + 2, 0 + 8] + [0, 1] = [2, 9]
        let m = with_encoder(vec![w1, w2], vec![b1, b2], 2);
        let e = m.encoder_forward(&array![[1.0, -1.0, 2.0, 0.5]]).unwrap();
        assert_eq!(e, array![[2.0, 9.0]]);
    }

    #[test]
    fn encoder_shape_error() {
        let m = with_encoder(vec![Array2::eye(3)], vec![Array1::zeros(3)], 2);
        assert!(matches!(m.encoder_forward(&array![[1.0, 2.0]]), Err(Error::Shape(_))));
    }

    #[test]
    fn gcn_identity_doubles_centers() {
        let c = array![[0.5, 1.0], [2.0, 0.0], [0.0, 3.0]];
        let a = Array2::<f64>::eye(3);
        let out = gcn_refine(&c, a.view(), &[Array2::eye(2), Array2::eye(2)]).unwrap();
        assert_eq!(out, &c * 2.0);
    }

    #[test]
    fn gcn_without_layers_is_identity() {
        let c = array![[0.5, -1.0], [2.0, 0.0]];
        let a = Array2::<f64>::eye(2);
        assert_eq!(gcn_refine(&c, a.view(), &[]).unwrap(), c);
    }

    #[test]
    fn gcn_one_layer_by_hand() {
        let c = array![[1.0, 2.0], [3.0, -1.0]];
        let a = array![[0.5, 0.5], [0.25, 0.75]];
        let w = array![[1.0, -1.0], [0.0, 2.0]];
        // A C = [[2, 0.5], [2.5, -0.25]]
        // (A C) W = [[2, -1], [2.5, -3]] -> relu [[2, 0], [2.5, 0]]
        // residual: [[3, 2], [5.5, -1]]
        let out = gcn_refine(&c, a.view(), &[w]).unwrap();
        assert_eq!(out, array![[3.0, 2.0], [5.5, -1.0]]);
    }

    #[test]
    fn gcn_shape_error() {
        let c = array![[1.0, 2.0], [3.0, -1.0]];
        let a = Array2::<f64>::eye(3);
        assert!(matches!(gcn_refine(&c, a.view(), &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn head_values() {
        let c = array![[1.0, 0.0], [0.0, 1.0]];
        let p = predict_probs(&array![[1.0, 0.0]], &c, 10.0).unwrap();
        assert_eq!(p[[0, 1]], 0.5);
        assert!((p[[0, 0]] - 0.9999546).abs() < 1e-7);
        let scaled = predict_probs(&array![[7.0, 0.0]], &c, 10.0).unwrap();
        assert!((scaled[[0, 0]] - p[[0, 0]]).abs() < 1e-15);
    }

    #[test]
    fn head_rejects_zero_norm() {
        let c = array![[1.0, 0.0], [0.0, 1.0]];
        let err = predict_probs(&array![[0.0, 0.0]], &c, 10.0).unwrap_err();
        assert!(matches!(err, Error::NumericDegeneracy(_)));
        let err = predict_probs(&array![[1.0, 0.0]], &array![[0.0, 0.0]], 10.0).unwrap_err();
        assert!(matches!(err, Error::NumericDegeneracy(_)));
    }

    #[test]
    fn backward_without_cache_is_state_error() {
        let m = VerbClassifier::init(dims(3, 4, 1, 2, 0), None, 10.0, 1).unwrap();
        let x = array![[1.0, 0.0, 0.5]];
        let fwd = m.infer(&x).unwrap();
        let err = m.backward(&fwd, &Array2::zeros((1, 2))).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let graph = crate::corrgraph::CorrelationGraph::from_semantics(
            &(0..3)
                .map(|i| crate::corrgraph::ClassSemantic {
                    class_id: i,
                    name: String::new(),
                    definition: String::new(),
                    embedding: vec![1.0, i as f64, 0.5],
                })
                .collect::<Vec<_>>(),
            1,
            0.5,
        )
        .unwrap();
        let m = VerbClassifier::init(dims(4, 5, 2, 3, 2), Some(graph), 10.0, 3).unwrap();
        let x = array![[1.0, 0.0, 0.5, -0.2], [0.1, 0.3, -0.4, 0.9]];
        let fwd = m.forward(&x).unwrap();
        let g = m.backward(&fwd, &Array2::zeros((2, 3))).unwrap();
        assert!(g.parameters().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(g.input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_and_infer_agree() {
        let m = VerbClassifier::init(dims(3, 4, 2, 2, 0), None, 10.0, 5).unwrap();
        let x = array![[1.0, 0.0, 0.5], [0.2, -0.3, 0.1]];
        assert_eq!(m.forward(&x).unwrap().logits(), m.infer(&x).unwrap().logits());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = VerbClassifier::init(dims(3, 4, 2, 2, 0), None, 10.0, 5).unwrap();
        save_checkpoint(&m, None, &path).unwrap();
        let back = load_checkpoint(&path).unwrap().into_model(None).unwrap();
        assert_eq!(m, back);
    }

    fn parse_csv(path: &Path) -> Vec<Vec<f64>> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect()
    }

    #[test]
    fn export_centers_shape_and_bypass() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("centers.csv");
        let m = VerbClassifier::init(dims(3, 2, 1, 3, 0), None, 10.0, 5).unwrap();
        export_centers(&m, &path).unwrap();
        let rows = parse_csv(&path);
        assert_eq!(rows.len(), 3);
        for (j, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), 5);
            assert_eq!(row[0], j as f64);
            assert_eq!(row[1..3], row[3..5]);
            for k in 0..2 {
                assert!((row[3 + k] - m.centers.0[[j, k]]).abs() <= 1e-12);
            }
        }
    }
}
