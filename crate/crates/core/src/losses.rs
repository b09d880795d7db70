//! Focal loss, cross-entropy, Mask SoftMax and the batch entropy regulariser.
//!
//! All functions build recorded graph operations so they can sit inside a
//! second-order meta objective.

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_FLOOR, 1]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Focusing parameter and entropy weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            lambda: 0.2,
        }
    }
}

/// Which loss scores each task head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Focal,
    CrossEntropy,
}

impl LossKind {
    /// Focal loss with focusing parameter `gamma`, or plain cross-entropy.
    pub fn apply(self, g: &mut Graph, pred: Var, target: Var, gamma: f64) -> Result<Var> {
        match self {
            LossKind::Focal => focal_loss(g, pred, target, gamma),
            LossKind::CrossEntropy => cross_entropy(g, pred, target),
        }
    }
}

fn check_pair(g: &Graph, op: &'static str, pred: Var, target: Var) -> Result<usize> {
    let (ps, ts) = (g.shape(pred), g.shape(target));
    if ps.len() != 2 || ps != ts {
        return Err(Error::shape(op, format!("prediction {ps:?} vs target {ts:?}")));
    }
    Ok(ps[0])
}

/// Batch mean of `Σ_c −y_c (1 − ŷ_c)^γ log ŷ_c` for `[N, C]` probabilities and
/// (possibly soft) targets.
pub fn focal_loss(g: &mut Graph, pred: Var, target: Var, gamma: f64) -> Result<Var> {
    if gamma < 0.0 || gamma.is_nan() {
        return Err(Error::NegativeGamma(gamma));
    }
    let n = check_pair(g, "focal-loss", pred, target)?;
    let p = g.clamp(pred, PROB_FLOOR, 1.0);
    let logp = g.log(p);
    let mut term = g.mul(target, logp)?;
    if gamma != 0.0 {
        let q = g.rsub_scalar(1.0, p);
        let w = g.powf(q, gamma);
        term = g.mul(term, w)?;
    }
    let total = g.sum(term);
    Ok(g.scalar_mul(total, -1.0 / n.max(1) as f64))
}

/// Batch mean of `Σ_c −y_c log ŷ_c`.
pub fn cross_entropy(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let n = check_pair(g, "cross-entropy", pred, target)?;
    let p = g.clamp(pred, PROB_FLOOR, 1.0);
    let logp = g.log(p);
    let term = g.mul(target, logp)?;
    let total = g.sum(term);
    Ok(g.scalar_mul(total, -1.0 / n.max(1) as f64))
}

/// Row-wise softmax restricted to the support of `mask` (`[N, K]`, entries 0 or 1).
///
/// Off-support outputs are exactly zero and on-support outputs equal the
/// ordinary softmax of the on-support logits. Each row is shifted by its
/// on-support maximum first.
pub fn mask_softmax(g: &mut Graph, logits: Var, mask: &Tensor) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || mask.shape() != shape.as_slice() {
        return Err(Error::shape(
            "mask-softmax",
            format!("logits {shape:?} vs mask {:?}", mask.shape()),
        ));
    }
    let (n, k) = (shape[0], shape[1]);
    let l = g.value(logits).data();
    let mut shift = Vec::with_capacity(n * k);
    for r in 0..n {
        let row = &l[r * k..(r + 1) * k];
        let m_row = &mask.data()[r * k..(r + 1) * k];
        let max = row
            .iter()
            .zip(m_row)
            .filter(|(_, &m)| m != 0.0)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptyMask);
        }
        shift.extend(m_row.iter().map(|&m| if m != 0.0 { max } else { 0.0 }));
    }
    let shift = g.constant(Tensor::from_parts(shape.clone(), shift));
    let m = g.constant(mask.clone());
    // (logits ⊙ M − shift) is ≤ 0 on the support and 0 elsewhere, so exp never overflows.
    let masked = g.mul(logits, m)?;
    let z = g.sub(masked, shift)?;
    let e = g.exp(z);
    let e = g.mul(e, m)?;
    let s = g.sum_cols(e)?;
    let s = g.repeat_cols(s, k)?;
    g.div(e, s)
}

/// `Σ_k p̄_k log p̄_k` of the batch-mean prediction `p̄`, with `0·log 0 = 0`.
///
/// This is a negative entropy in `[−log K, 0]`; minimising it spreads the
/// batch's predictions across all classes.
pub fn entropy_reg(g: &mut Graph, preds: Var) -> Result<Var> {
    let shape = g.shape(preds).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape(
            "entropy",
            format!("expected non-empty [N, K], got {shape:?}"),
        ));
    }
    let total = g.sum_rows(preds)?;
    let mean = g.scalar_mul(total, 1.0 / shape[0] as f64);
    let safe = g.clamp(mean, PROB_FLOOR, 1.0);
    let logp = g.log(safe);
    let t = g.mul(mean, logp)?;
    Ok(g.sum(t))
}
