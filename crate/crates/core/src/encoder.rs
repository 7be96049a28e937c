//! A small MLP encoder with a unit-norm output head, its exact reverse-mode
//! gradients, and the two parameter updates used in pre-training: SGD with
//! momentum and weight decay for the query encoder, and the exponential
//! moving average that drives the key encoder.

use crate::error::{ClabError, Result};
use crate::rng::RngStream;
use crate::tensor::{EmbeddingBatch, EmbeddingVector, NORM_EPS};

/// One affine map `z = W x + b`, with `W` stored row-major as
/// `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.in_dim == other.in_dim && self.out_dim == other.out_dim
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Layer stack: ReLU after every layer but the last, then L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    layers: Vec<Layer>,
}

/// Same shapes as [`EncoderParams`]; holds gradients or SGD velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBuffer {
    layers: Vec<Layer>,
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(ClabError::Shape(format!("invalid layer sizes {sizes:?}")));
    }
    Ok(())
}

fn congruent(a: &[Layer], b: &[Layer]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| !x.same_shape(y)) {
        return Err(ClabError::Shape(format!(
            "layer shapes differ: {:?} vs {:?}",
            a.iter().map(|l| (l.in_dim, l.out_dim)).collect::<Vec<_>>(),
            b.iter().map(|l| (l.in_dim, l.out_dim)).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

impl EncoderParams {
    /// All-zero parameters for layer widths `sizes = [input, hidden.., output]`.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Self {
            layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    /// He-normal weights, zero biases.
    pub fn init(sizes: &[usize], rng: &mut RngStream) -> Result<Self> {
        let mut params = Self::zeros(sizes)?;
        for layer in &mut params.layers {
            let std = (2.0 / layer.in_dim as f64).sqrt();
            for w in &mut layer.weights {
                *w = std * rng.normal();
            }
        }
        Ok(params)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(ClabError::Shape("encoder needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(ClabError::Shape(format!(
                    "layer {i} buffers do not match {}x{}",
                    l.out_dim, l.in_dim
                )));
            }
            if l.values().any(|v| !v.is_finite()) {
                return Err(ClabError::Shape(format!(
                    "layer {i} holds non-finite values"
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(ClabError::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.out_dim));
        s
    }

    /// Flat view of every parameter, layer by layer (weights then bias).
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.values().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(ClabError::DimMismatch {
                left: self.num_params(),
                right: values.len(),
            });
        }
        for (dst, src) in self
            .layers
            .iter_mut()
            .flat_map(Layer::values_mut)
            .zip(values)
        {
            *dst = *src;
        }
        Ok(())
    }

    /// Content hash used to tie activation records to the parameters that
    /// produced them.
    fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for l in &self.layers {
            for v in [l.in_dim as u64, l.out_dim as u64]
                .into_iter()
                .chain(l.values().map(|x| x.to_bits()))
            {
                h = (h ^ v).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5);
            }
        }
        h
    }
}

impl GradBuffer {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.values().copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.values().all(|v| *v == 0.0))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) -> Result<()> {
        congruent(&self.layers, &other.layers)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.values_mut().zip(b.values()) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.layers.iter_mut().flat_map(Layer::values_mut) {
            *v *= s;
        }
    }
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    fingerprint: u64,
    batch: usize,
    /// Input to each layer, `batch x in_dim` row-major.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer, `batch x out_dim`.
    pre: Vec<Vec<f64>>,
    head_norms: Vec<f64>,
    output: Vec<f64>,
    out_dim: usize,
}

impl ActivationRecord {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Un-normalized output of the last layer for sample `i`.
    pub fn pre_head(&self, i: usize) -> &[f64] {
        let z = &self.pre[self.pre.len() - 1];
        &z[i * self.out_dim..(i + 1) * self.out_dim]
    }

    pub fn head_norm(&self, i: usize) -> f64 {
        self.head_norms[i]
    }

    /// Normalized embedding of sample `i` (zero if the head norm vanished).
    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.output[i * self.out_dim..(i + 1) * self.out_dim]
    }
}

/// Encodes a batch of flattened inputs into unit-norm embeddings.
pub fn forward(
    params: &EncoderParams,
    batch: &[Vec<f64>],
) -> Result<(EmbeddingBatch, ActivationRecord)> {
    let n = batch.len();
    let in_dim = params.input_dim();
    if let Some(bad) = batch.iter().find(|x| x.len() != in_dim) {
        return Err(ClabError::DimMismatch {
            left: in_dim,
            right: bad.len(),
        });
    }
    let mut x: Vec<f64> = Vec::with_capacity(n * in_dim);
    for row in batch {
        x.extend_from_slice(row);
    }
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    for (li, layer) in params.layers.iter().enumerate() {
        let mut z = vec![0.0; n * layer.out_dim];
        for s in 0..n {
            let xs = &x[s * layer.in_dim..(s + 1) * layer.in_dim];
            let zs = &mut z[s * layer.out_dim..(s + 1) * layer.out_dim];
            for (o, zo) in zs.iter_mut().enumerate() {
                let w = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                *zo = layer.bias[o] + w.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let next = if li < last {
            z.iter().map(|v| v.max(0.0)).collect()
        } else {
            Vec::new()
        };
        inputs.push(std::mem::replace(&mut x, next));
        pre.push(z);
    }
    let d = params.output_dim();
    let z = &pre[last];
    let mut output = vec![0.0; n * d];
    let mut head_norms = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for s in 0..n {
        let zs = &z[s * d..(s + 1) * d];
        let norm = zs.iter().map(|v| v * v).sum::<f64>().sqrt();
        head_norms.push(norm);
        let ys = &mut output[s * d..(s + 1) * d];
        if norm > NORM_EPS {
            for (y, v) in ys.iter_mut().zip(zs) {
                *y = v / norm;
            }
            rows.push(EmbeddingVector::detect(ys.to_vec()));
        } else {
            rows.push(EmbeddingVector::new(ys.to_vec()));
        }
    }
    let record = ActivationRecord {
        fingerprint: params.fingerprint(),
        batch: n,
        inputs,
        pre,
        head_norms,
        output,
        out_dim: d,
    };
    Ok((EmbeddingBatch::new(d, rows)?, record))
}

/// Reverse-mode gradient of a scalar loss with respect to every parameter,
/// given `upstream[i] = ∂L/∂embedding_i`.
pub fn backward(
    params: &EncoderParams,
    record: &ActivationRecord,
    upstream: &[Vec<f64>],
) -> Result<GradBuffer> {
    if record.fingerprint != params.fingerprint() || record.inputs.len() != params.layers.len() {
        return Err(ClabError::StaleRecord);
    }
    if upstream.len() != record.batch {
        return Err(ClabError::DimMismatch {
            left: record.batch,
            right: upstream.len(),
        });
    }
    let n = record.batch;
    let d = record.out_dim;
    if let Some(bad) = upstream.iter().find(|g| g.len() != d) {
        return Err(ClabError::DimMismatch {
            left: d,
            right: bad.len(),
        });
    }
    // Through y = z / |z|: dz = (g - y (y.g)) / |z|.
    let mut delta = vec![0.0; n * d];
    for s in 0..n {
        let norm = record.head_norms[s];
        if norm <= NORM_EPS {
            continue;
        }
        let y = record.embedding(s);
        let g = &upstream[s];
        let yg: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..d {
            delta[s * d + k] = (g[k] - y[k] * yg) / norm;
        }
    }
    let mut grads = GradBuffer::zeros_like(params);
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let x = &record.inputs[li];
        let gl = &mut grads.layers[li];
        for s in 0..n {
            let xs = &x[s * layer.in_dim..(s + 1) * layer.in_dim];
            for o in 0..layer.out_dim {
                let dz = delta[s * layer.out_dim + o];
                if dz == 0.0 {
                    continue;
                }
                gl.bias[o] += dz;
                let gw = &mut gl.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, xi) in gw.iter_mut().zip(xs) {
                    *g += dz * xi;
                }
            }
        }
        if li == 0 {
            break;
        }
        // Into the previous layer's pre-activation, through its ReLU.
        let prev_pre = &record.pre[li - 1];
        let mut next = vec![0.0; n * layer.in_dim];
        for s in 0..n {
            let dx = &mut next[s * layer.in_dim..(s + 1) * layer.in_dim];
            for o in 0..layer.out_dim {
                let dz = delta[s * layer.out_dim + o];
                if dz == 0.0 {
                    continue;
                }
                let w = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, wi) in dx.iter_mut().zip(w) {
                    *g += dz * wi;
                }
            }
            for (g, z) in dx
                .iter_mut()
                .zip(&prev_pre[s * layer.in_dim..(s + 1) * layer.in_dim])
            {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        delta = next;
    }
    Ok(grads)
}

/// `key <- m * key + (1 - m) * query`, elementwise.
pub fn momentum_update(key: &mut EncoderParams, query: &EncoderParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(ClabError::Config(format!(
            "key momentum {m} outside [0, 1]"
        )));
    }
    congruent(&key.layers, &query.layers)?;
    if m == 1.0 {
        return Ok(());
    }
    for (k, q) in key.layers.iter_mut().zip(&query.layers) {
        for (a, b) in k.values_mut().zip(q.values()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- momentum * v + (grad + wd * θ)`, then `θ <- θ - lr * v`.
/// Parameters are untouched if any gradient is non-finite.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &GradBuffer,
    velocity: &mut GradBuffer,
    hyper: SgdHyper,
) -> Result<()> {
    congruent(&params.layers, &grads.layers)?;
    congruent(&params.layers, &velocity.layers)?;
    if let Some(layer) = grads
        .layers
        .iter()
        .position(|l| l.values().any(|v| !v.is_finite()))
    {
        return Err(ClabError::NonFiniteGradient { layer });
    }
    for ((p, g), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(velocity.layers.iter_mut())
    {
        for ((theta, grad), vel) in p.values_mut().zip(g.values()).zip(v.values_mut()) {
            *vel = hyper.momentum * *vel + (grad + hyper.weight_decay * *theta);
            *theta -= hyper.lr * *vel;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fractions of `epochs` at which the learning rate is divided by 10.
    pub lr_milestones: Vec<f64>,
    pub key_momentum: f64,
    pub tau: f64,
    pub queue_size: usize,
    /// Views per anchor: one key view plus `views - 1` query views.
    pub views: usize,
    /// Hidden widths and embedding dimension; the input width comes from the data.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.03,
            weight_decay: 1e-4,
            momentum: 0.9,
            batch_size: 256,
            epochs: 20,
            lr_milestones: vec![0.6, 0.8],
            key_momentum: 0.999,
            tau: 0.2,
            queue_size: 1024,
            views: 2,
            hidden: vec![256, 128],
            embed_dim: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ClabError::Config(m));
        if !(0.0..=1.0).contains(&self.key_momentum) {
            return bad(format!("key momentum {} outside [0, 1]", self.key_momentum));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad(format!("temperature {} must be positive", self.tau));
        }
        if self.queue_size == 0 {
            return bad("queue size must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.views < 2 {
            return bad(format!(
                "{} views; pre-training needs a query and a key view",
                self.views
            ));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum)) {
            return bad("lr and weight decay must be non-negative, momentum in [0, 1)".into());
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&f| epoch >= (f * self.epochs as f64).round() as usize)
            .count();
        self.lr * 0.1f64.powi(passed as i32)
    }

    pub fn sgd_at(&self, epoch: usize) -> SgdHyper {
        SgdHyper {
            lr: self.lr_at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.embed_dim);
        sizes
    }
}
