//! The learned comparator: a three-layer MLP that maps the element-wise
//! absolute difference of two embeddings to a similarity score in (0, 1).
//!
//! Two independently trained instances of the same architecture play
//! different roles: the *classifier* scores queries against prototypes, the
//! *relation network* scores query pairs against each other. The module
//! also carries the episodic losses for both roles with exact hand-derived
//! gradients (verified against central finite differences in the tests),
//! an Adam optimizer, and JSON checkpointing.
//!
//! Numerical contract: the sigmoid output is clamped to the largest open
//! interval representable inside (0, 1), so scores never saturate to exact
//! 0 or 1 even for extreme pre-activations.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::Episode;
use crate::error::{Error, Result};
use crate::pcp::Prototypes;

/// Numerically safe logistic function, strictly inside (0, 1).
///
/// The two branches avoid overflow of `exp` for large |z|; the clamp keeps
/// the open-interval guarantee where the quotient would round to 0.0 or 1.0.
fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// One dense layer, weights in row-major `[out_dim × in_dim]` order.
#[derive(Debug, Clone, PartialEq)]
struct Layer {
    in_dim: usize,
    out_dim: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
        }
    }

    /// `out[r] = Σ_c w[r,c]·x[c] + b[r]`, accumulated in ascending column
    /// order so results are reproducible bit-for-bit.
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut out = Vec::with_capacity(self.out_dim);
        for r in 0..self.out_dim {
            let row = &self.w[r * self.in_dim..(r + 1) * self.in_dim];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc + self.b[r]);
        }
        out
    }
}

/// Similarity network: `input → H1 (ReLU) → H2 (ReLU) → 1 (sigmoid)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityNet {
    input_dim: usize,
    hidden_dims: [usize; 2],
    layers: [Layer; 3],
}

/// Activations recorded during a forward pass, enough to backpropagate:
/// ReLU outputs double as the derivative mask (`a > 0 ⇔ pre-activation > 0`).
struct ForwardCache {
    a1: Vec<f64>,
    a2: Vec<f64>,
    score: f64,
}

impl SimilarityNet {
    fn validate_dims(input_dim: usize, hidden_dims: [usize; 2]) -> Result<()> {
        if input_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "network widths must be at least 1, got input {input_dim}, hidden {hidden_dims:?}"
            )));
        }
        Ok(())
    }

    /// All-zero parameters; useful as a fixed point in tests (every score
    /// is exactly 0.5).
    pub fn zeros(input_dim: usize, hidden_dims: [usize; 2]) -> Result<Self> {
        Self::validate_dims(input_dim, hidden_dims)?;
        Ok(Self {
            input_dim,
            hidden_dims,
            layers: [
                Layer::zeros(input_dim, hidden_dims[0]),
                Layer::zeros(hidden_dims[0], hidden_dims[1]),
                Layer::zeros(hidden_dims[1], 1),
            ],
        })
    }

    /// He-uniform initialization: weights drawn from
    /// `U(−√(6/fan_in), +√(6/fan_in))` per layer, biases zero. Draw order
    /// is fixed (layer by layer, row-major), so one RNG state yields one
    /// network.
    pub fn init<R: Rng>(input_dim: usize, hidden_dims: [usize; 2], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(input_dim, hidden_dims)?;
        for layer in &mut net.layers {
            let bound = (6.0 / layer.in_dim as f64).sqrt();
            for w in &mut layer.w {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> [usize; 2] {
        self.hidden_dims
    }

    pub fn n_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// All parameters flattened in a fixed order
    /// (`w1, b1, w2, b2, w3, b3`), for optimizers and gradient checks.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_parameters());
        for layer in &self.layers {
            out.extend_from_slice(&layer.w);
            out.extend_from_slice(&layer.b);
        }
        out
    }

    /// Overwrites all parameters from a flat vector in [`Self::parameters`]
    /// order.
    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_parameters() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.n_parameters(),
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let (nw, nb) = (layer.w.len(), layer.b.len());
            layer.w.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            layer.b.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        let mut a1 = self.layers[0].affine(x);
        for v in &mut a1 {
            *v = v.max(0.0);
        }
        let mut a2 = self.layers[1].affine(&a1);
        for v in &mut a2 {
            *v = v.max(0.0);
        }
        let z3 = self.layers[2].affine(&a2)[0];
        ForwardCache {
            a1,
            a2,
            score: sigmoid(z3),
        }
    }

    /// Scores one difference vector. The only failure mode is a width
    /// mismatch; the output is strictly inside (0, 1).
    pub fn forward(&self, diff: &[f64]) -> Result<f64> {
        if diff.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "input has {} dimensions, network expects {}",
                diff.len(),
                self.input_dim
            )));
        }
        Ok(self.forward_cached(diff).score)
    }

    /// Backpropagates `d_loss/d_z3` (the gradient at the sigmoid
    /// *pre-activation*) for one input, accumulating into `grads`.
    fn accumulate_gradient(&self, x: &[f64], cache: &ForwardCache, delta3: f64, grads: &mut GradientBundle) {
        let [h1, h2] = self.hidden_dims;
        let (g12, g3) = grads.layers.split_at_mut(2);
        let (g1, g2) = g12.split_at_mut(1);
        let g1 = &mut g1[0];
        let g2 = &mut g2[0];
        let g3 = &mut g3[0];

        // Output layer: dw3[j] = δ3 · a2[j].
        for j in 0..h2 {
            g3.dw[j] += delta3 * cache.a2[j];
        }
        g3.db[0] += delta3;

        // Hidden layer 2: δ2[j] = w3[j] · δ3 · 1[a2[j] > 0].
        let w3 = &self.layers[2].w;
        let mut delta2 = vec![0.0; h2];
        for j in 0..h2 {
            if cache.a2[j] > 0.0 {
                delta2[j] = w3[j] * delta3;
            }
        }
        let w2 = &self.layers[1].w;
        for j in 0..h2 {
            if delta2[j] != 0.0 {
                let row = &mut g2.dw[j * h1..(j + 1) * h1];
                for (dw, a) in row.iter_mut().zip(&cache.a1) {
                    *dw += delta2[j] * a;
                }
                g2.db[j] += delta2[j];
            }
        }

        // Hidden layer 1: δ1[k] = Σ_j w2[j,k] · δ2[j] · 1[a1[k] > 0].
        let mut delta1 = vec![0.0; h1];
        for j in 0..h2 {
            if delta2[j] != 0.0 {
                let row = &w2[j * h1..(j + 1) * h1];
                for (d1, w) in delta1.iter_mut().zip(row) {
                    *d1 += w * delta2[j];
                }
            }
        }
        for k in 0..h1 {
            if cache.a1[k] <= 0.0 {
                delta1[k] = 0.0;
            }
        }
        for k in 0..h1 {
            if delta1[k] != 0.0 {
                let row = &mut g1.dw[k * self.input_dim..(k + 1) * self.input_dim];
                for (dw, v) in row.iter_mut().zip(x) {
                    *dw += delta1[k] * v;
                }
                g1.db[k] += delta1[k];
            }
        }
    }

    /// Serializes the network to a JSON checkpoint
    /// (`{"input_dim", "hidden_dims", "layers": [{"w", "b"}, ...]}` with
    /// nested row-major weight matrices).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&CheckpointFile::from(self))?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Loads a checkpoint, validating the layer-shape chain
    /// (`D → H1 → H2 → 1`) and that every value is finite.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        file.into_net().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    layers: Vec<CheckpointLayer>,
}

impl From<&SimilarityNet> for CheckpointFile {
    fn from(net: &SimilarityNet) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| CheckpointLayer {
                w: (0..l.out_dim)
                    .map(|r| l.w[r * l.in_dim..(r + 1) * l.in_dim].to_vec())
                    .collect(),
                b: l.b.clone(),
            })
            .collect();
        CheckpointFile {
            input_dim: net.input_dim,
            hidden_dims: net.hidden_dims.to_vec(),
            layers,
        }
    }
}

impl CheckpointFile {
    fn into_net(self) -> Result<SimilarityNet> {
        if self.hidden_dims.len() != 2 {
            return Err(Error::Shape(format!(
                "expected 2 hidden widths, got {}",
                self.hidden_dims.len()
            )));
        }
        if self.layers.len() != 3 {
            return Err(Error::Shape(format!("expected 3 layers, got {}", self.layers.len())));
        }
        let hidden = [self.hidden_dims[0], self.hidden_dims[1]];
        SimilarityNet::validate_dims(self.input_dim, hidden)?;
        let expected = [
            (self.input_dim, hidden[0]),
            (hidden[0], hidden[1]),
            (hidden[1], 1),
        ];
        let mut net = SimilarityNet::zeros(self.input_dim, hidden)?;
        for (idx, (layer_json, (in_dim, out_dim))) in self.layers.iter().zip(expected).enumerate() {
            if layer_json.w.len() != out_dim || layer_json.b.len() != out_dim {
                return Err(Error::Shape(format!(
                    "layer {idx}: expected {out_dim} rows/biases, got {} rows, {} biases",
                    layer_json.w.len(),
                    layer_json.b.len()
                )));
            }
            let target = &mut net.layers[idx];
            for (r, row) in layer_json.w.iter().enumerate() {
                if row.len() != in_dim {
                    return Err(Error::Shape(format!(
                        "layer {idx} row {r}: expected {in_dim} columns, got {}",
                        row.len()
                    )));
                }
                target.w[r * in_dim..(r + 1) * in_dim].copy_from_slice(row);
            }
            target.b.copy_from_slice(&layer_json.b);
        }
        if net.parameters().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint contains non-finite parameters".into()));
        }
        Ok(net)
    }
}

/// Per-layer weight/bias gradient of one of the losses, in the same layout
/// as [`SimilarityNet`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    layers: Vec<LayerGrad>,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerGrad {
    dw: Vec<f64>,
    db: Vec<f64>,
}

impl GradientBundle {
    /// Zero gradient with the same shape as `net`'s parameters.
    pub fn zeros_like(net: &SimilarityNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    dw: vec![0.0; l.w.len()],
                    db: vec![0.0; l.b.len()],
                })
                .collect(),
        }
    }

    fn shape_matches(&self, net: &SimilarityNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.dw.len() == l.w.len() && g.db.len() == l.b.len())
    }

    /// Flattened in [`SimilarityNet::parameters`] order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(&layer.dw);
            out.extend_from_slice(&layer.db);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.dw.iter().chain(&l.db).all(|v| v.is_finite()))
    }
}

/// Classification loss over an episode: the mean over queries of the squared
/// gap to a one-hot target — `(1−s_true)²` for the true class plus `s²` for
/// every other class — measured against fixed prototypes.
///
/// Returns the loss and its exact gradient with respect to the classifier
/// parameters.
pub fn loss_inter(
    classifier: &SimilarityNet,
    episode: &Episode,
    prototypes: &Prototypes,
) -> Result<(f64, GradientBundle)> {
    if prototypes.n_classes() != episode.ways() {
        return Err(Error::Shape(format!(
            "{} prototypes for a {}-way episode",
            prototypes.n_classes(),
            episode.ways()
        )));
    }
    if prototypes.dim() != episode.dim() || episode.dim() != classifier.input_dim() {
        return Err(Error::Shape(format!(
            "widths disagree: episode {}, prototypes {}, network {}",
            episode.dim(),
            prototypes.dim(),
            classifier.input_dim()
        )));
    }

    let truth = episode.query_local_labels();
    let n_queries = episode.n_queries() as f64;
    let mut loss = 0.0;
    let mut grads = GradientBundle::zeros_like(classifier);
    for (i, sample) in episode.query().iter().enumerate() {
        for n in 0..episode.ways() {
            let diff = prototype_abs_diff(sample.embedding.values(), prototypes.vector(n));
            let cache = classifier.forward_cached(&diff);
            let s = cache.score;
            let target = if n == truth[i] { 1.0 } else { 0.0 };
            loss += (s - target) * (s - target);
            // d/dz3 of (s−target)²/NM with s = σ(z3):
            let delta3 = 2.0 * (s - target) / n_queries * s * (1.0 - s);
            classifier.accumulate_gradient(&diff, &cache, delta3, &mut grads);
        }
    }
    Ok((loss / n_queries, grads))
}

/// Pairwise relation loss over an episode's queries: relation scores should
/// be 1 for same-label pairs and 0 otherwise, summed over all ordered pairs
/// and divided by (number of queries)². Self-pairs are excluded; each
/// unordered pair contributes twice, which the implementation folds into a
/// single visit with doubled weight.
///
/// Needs at least two queries; returns the loss and its exact gradient with
/// respect to the relation network parameters.
pub fn loss_intra(relation: &SimilarityNet, episode: &Episode) -> Result<(f64, GradientBundle)> {
    let n_queries = episode.n_queries();
    if n_queries < 2 {
        return Err(Error::InsufficientPairs(n_queries));
    }
    if episode.dim() != relation.input_dim() {
        return Err(Error::Shape(format!(
            "episode width {} vs network width {}",
            episode.dim(),
            relation.input_dim()
        )));
    }

    let truth = episode.query_local_labels();
    let scale = 1.0 / (n_queries as f64 * n_queries as f64);
    let queries = episode.query();
    let mut loss = 0.0;
    let mut grads = GradientBundle::zeros_like(relation);
    for i in 0..n_queries {
        for j in (i + 1)..n_queries {
            let diff = queries[i].embedding.abs_diff(&queries[j].embedding);
            let cache = relation.forward_cached(&diff);
            let r = cache.score;
            let target = if truth[i] == truth[j] { 1.0 } else { 0.0 };
            loss += 2.0 * scale * (r - target) * (r - target);
            let delta3 = 4.0 * scale * (r - target) * r * (1.0 - r);
            relation.accumulate_gradient(&diff, &cache, delta3, &mut grads);
        }
    }
    Ok((loss, grads))
}

fn prototype_abs_diff(query: &[f64], prototype: &[f64]) -> Vec<f64> {
    debug_assert_eq!(query.len(), prototype.len());
    query
        .iter()
        .zip(prototype)
        .map(|(q, p)| (q - p).abs())
        .collect()
}

/// Adam optimizer state: first/second moment estimates plus the step
/// counter, tied to one network's parameter shape.
#[derive(Debug, Clone)]
pub struct AdamState {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: GradientBundle,
    v: GradientBundle,
}

impl AdamState {
    /// Fresh state with the conventional defaults β1 = 0.9, β2 = 0.999,
    /// ε = 1e-8.
    pub fn new(net: &SimilarityNet, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: GradientBundle::zeros_like(net),
            v: GradientBundle::zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }
}

/// One Adam update in place: `θ ← θ − lr · m̂ / (√v̂ + ε)` with
/// bias-corrected moments.
pub fn adam_step(net: &mut SimilarityNet, grads: &GradientBundle, state: &mut AdamState) -> Result<()> {
    if !grads.shape_matches(net) || !state.m.shape_matches(net) {
        return Err(Error::Shape("gradient/optimizer shape does not match network".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (layer_idx, layer) in net.layers.iter_mut().enumerate() {
        let g = &grads.layers[layer_idx];
        let m = &mut state.m.layers[layer_idx];
        let v = &mut state.v.layers[layer_idx];
        let update = |params: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..params.len() {
                m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * grad[i];
                v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
            }
        };
        update(&mut layer.w, &g.dw, &mut m.dw, &mut v.dw);
        update(&mut layer.b, &g.db, &mut m.db, &mut v.db);
    }
    Ok(())
}
