//! Negative queues and the self-, fully- and semi-supervised InfoNCE losses.
//!
//! All three losses share one kernel: for a query `q`, positive key `k⁺` and a
//! set `A` of active negatives from a queue,
//!
//! ```text
//! loss = -log( κ / (κ + Σ_{m∈A} exp(q·k_m / τ)) ),   κ = exp(q·k⁺ / τ)
//! ```
//!
//! evaluated with a max-shifted log-sum-exp. The self-supervised loss uses
//! every filled slot, the fully-supervised one drops slots whose label equals
//! the anchor's, and the semi-supervised loss routes each sample to one of the
//! two. Gradients are taken with respect to `q` only; keys are constants.

use crate::error::{ClabError, Result};
use crate::rng::RngStream;
use crate::tensor::{dot_slices, EmbeddingBatch, EmbeddingVector};

/// Queue label: `None` marks a key whose class is unknown.
pub type Label = Option<u32>;

pub const UNLABELED: Label = None;

/// Tolerance on `|‖k‖ - 1|` for keys entering a queue.
const UNIT_TOL: f64 = 1e-9;

/// FIFO ring of unit-norm keys with an aligned label ring.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    keys: Vec<f64>,
    labels: Vec<Label>,
    cursor: usize,
    filled: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(ClabError::Config(format!(
                "queue needs positive capacity and dim, got {capacity}x{dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            keys: vec![0.0; capacity * dim],
            labels: vec![UNLABELED; capacity],
            cursor: 0,
            filled: 0,
        })
    }

    /// A full queue of random unit keys, all unlabeled.
    pub fn random(capacity: usize, dim: usize, rng: &mut RngStream) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        for slot in 0..capacity {
            let v = rng.unit_vector(dim);
            q.keys[slot * dim..(slot + 1) * dim].copy_from_slice(&v);
        }
        q.filled = capacity;
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    /// Key stored in physical slot `slot`.
    pub fn key(&self, slot: usize) -> &[f64] {
        &self.keys[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn label(&self, slot: usize) -> Label {
        self.labels[slot]
    }

    /// Appends keys at the cursor, overwriting the oldest entries once full.
    /// Nothing is written unless every key is unit-norm.
    pub fn push(&mut self, keys: &EmbeddingBatch, labels: &[Label]) -> Result<()> {
        if keys.dim() != self.dim {
            return Err(ClabError::DimMismatch {
                left: self.dim,
                right: keys.dim(),
            });
        }
        if keys.len() != labels.len() {
            return Err(ClabError::Shape(format!(
                "{} keys but {} labels",
                keys.len(),
                labels.len()
            )));
        }
        for (index, k) in keys.rows().iter().enumerate() {
            let norm = k.norm();
            if (norm - 1.0).abs() >= UNIT_TOL {
                return Err(ClabError::NotNormalized { index, norm });
            }
        }
        for (k, &label) in keys.rows().iter().zip(labels) {
            let slot = self.cursor;
            self.keys[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(k.values());
            self.labels[slot] = label;
            self.cursor = (self.cursor + 1) % self.capacity;
            self.filled = (self.filled + 1).min(self.capacity);
        }
        Ok(())
    }
}

/// Filled slots usable as negatives for an anchor of class `anchor_label`:
/// every slot whose label differs, including unlabeled ones.
pub fn filter_negatives(queue: &NegativeQueue, anchor_label: u32) -> Vec<usize> {
    (0..queue.filled)
        .filter(|&slot| queue.labels[slot] != Some(anchor_label))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    /// `exp(q·k⁺ / τ)`.
    pub kappa: f64,
    /// `q·k_m / τ` for each active negative, in slot order.
    pub negative_logits: Vec<f64>,
    pub active_negatives: usize,
    /// `∂loss/∂q` in ambient coordinates.
    pub grad_q: EmbeddingVector,
}

/// Labeled/unlabeled status of one pre-training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMask {
    Labeled(u32),
    Unlabeled,
}

impl LabelMask {
    pub fn label(self) -> Label {
        match self {
            LabelMask::Labeled(l) => Some(l),
            LabelMask::Unlabeled => None,
        }
    }
}

fn check_inputs(
    q: &EmbeddingVector,
    k_pos: &EmbeddingVector,
    queue: &NegativeQueue,
    tau: f64,
) -> Result<()> {
    if q.dim() != k_pos.dim() {
        return Err(ClabError::DimMismatch {
            left: q.dim(),
            right: k_pos.dim(),
        });
    }
    if q.dim() != queue.dim() {
        return Err(ClabError::DimMismatch {
            left: q.dim(),
            right: queue.dim(),
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ClabError::Config(format!(
            "temperature {tau} must be positive"
        )));
    }
    if queue.is_empty() {
        return Err(ClabError::EmptyQueue);
    }
    Ok(())
}

/// InfoNCE over the negatives in `slots`.
fn info_nce(
    q: &[f64],
    k_pos: &[f64],
    queue: &NegativeQueue,
    slots: &[usize],
    tau: f64,
) -> LossBreakdown {
    let pos = dot_slices(q, k_pos) / tau;
    let logits: Vec<f64> = slots
        .iter()
        .map(|&s| dot_slices(q, queue.key(s)) / tau)
        .collect();
    let kappa = pos.exp();
    let dim = q.len();
    if slots.is_empty() {
        return LossBreakdown {
            loss: 0.0,
            kappa,
            negative_logits: logits,
            active_negatives: 0,
            grad_q: EmbeddingVector::new(vec![0.0; dim]),
        };
    }
    let shift = logits.iter().copied().fold(pos, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - shift).exp()).collect();
    let neg_sum: f64 = weights.iter().sum();
    let pos_weight = (pos - shift).exp();
    let total = pos_weight + neg_sum;
    let loss = if shift == pos {
        // Positive is the largest logit: loss = log1p(Σ exp(l_m - pos)), exact for tiny losses.
        neg_sum.ln_1p()
    } else {
        (shift - pos) + total.ln()
    }
    .max(0.0);

    // ∂loss/∂q = ((p⁺ - 1) k⁺ + Σ p_m k_m) / τ with softmax weights p; 1 - p⁺ = Σ p_m.
    let mut grad = vec![0.0; dim];
    let c_pos = -(neg_sum / total) / tau;
    for (g, k) in grad.iter_mut().zip(k_pos) {
        *g = c_pos * k;
    }
    for (&slot, w) in slots.iter().zip(&weights) {
        let c = w / total / tau;
        for (g, k) in grad.iter_mut().zip(queue.key(slot)) {
            *g += c * k;
        }
    }
    LossBreakdown {
        loss,
        kappa,
        negative_logits: logits,
        active_negatives: slots.len(),
        grad_q: EmbeddingVector::new(grad),
    }
}

/// Self-supervised loss against every filled queue slot.
pub fn loss_self(
    q: &EmbeddingVector,
    k_pos: &EmbeddingVector,
    queue: &NegativeQueue,
    tau: f64,
) -> Result<LossBreakdown> {
    check_inputs(q, k_pos, queue, tau)?;
    let slots: Vec<usize> = (0..queue.filled).collect();
    Ok(info_nce(q.values(), k_pos.values(), queue, &slots, tau))
}

/// Fully-supervised loss: negatives sharing `anchor_label` are dropped. With
/// no negatives left the loss and gradient are exactly zero.
pub fn loss_full(
    q: &EmbeddingVector,
    k_pos: &EmbeddingVector,
    queue: &NegativeQueue,
    anchor_label: u32,
    tau: f64,
) -> Result<LossBreakdown> {
    check_inputs(q, k_pos, queue, tau)?;
    let slots = filter_negatives(queue, anchor_label);
    Ok(info_nce(q.values(), k_pos.values(), queue, &slots, tau))
}

/// One sample of a semi-supervised batch.
#[derive(Debug, Clone, Copy)]
pub struct SemiSample<'a> {
    pub q: &'a EmbeddingVector,
    pub k_pos: &'a EmbeddingVector,
    pub mask: LabelMask,
}

/// Labeled samples take the fully-supervised loss against `queue_d`,
/// unlabeled ones the self-supervised loss against `queue_u`. The total is
/// the plain sum of per-sample losses in batch order.
pub fn loss_semi(
    batch: &[SemiSample<'_>],
    queue_d: &NegativeQueue,
    queue_u: &NegativeQueue,
    tau: f64,
) -> Result<(f64, Vec<LossBreakdown>)> {
    let mut total = 0.0;
    let mut parts = Vec::with_capacity(batch.len());
    for s in batch {
        let b = match s.mask {
            LabelMask::Labeled(label) => loss_full(s.q, s.k_pos, queue_d, label, tau)?,
            LabelMask::Unlabeled => loss_self(s.q, s.k_pos, queue_u, tau)?,
        };
        total += b.loss;
        parts.push(b);
    }
    Ok((total, parts))
}

/// Largest discrepancy between the analytic `grad_q` reported by `loss_fn`
/// and central finite differences of its loss, taken in ambient space (the
/// perturbed query is not re-projected onto the sphere). The error is
/// normalized by the larger of the two gradients' max-norms; two all-zero
/// gradients give 0.
/// Denominator floor so a vanishing gradient compares absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn loss_grad_check<F>(q: &EmbeddingVector, h: f64, loss_fn: F) -> Result<f64>
where
    F: Fn(&EmbeddingVector) -> Result<LossBreakdown>,
{
    let analytic = loss_fn(q)?.grad_q;
    let mut numeric = vec![0.0; q.dim()];
    let base = q.values().to_vec();
    for (i, n) in numeric.iter_mut().enumerate() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let lp = loss_fn(&EmbeddingVector::new(plus))?.loss;
        let lm = loss_fn(&EmbeddingVector::new(minus))?.loss;
        *n = (lp - lm) / (2.0 * h);
    }
    let scale = analytic
        .values()
        .iter()
        .chain(&numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .values()
        .iter()
        .zip(&numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    Ok(worst / scale.max(GRAD_CHECK_FLOOR))
}
