//! Transferability adaptation: per-patch transferabilities from the patch
//! discriminator reweight the class-token attention row of the last layer.
//!
//! The weighting is applied after the softmax and is not renormalized, so the
//! reweighted class row sums to at most 1. Transferabilities enter the tape as
//! constants: no gradient flows back through them.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{softmax_slice, Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{AttentionOutput, Block, BlockOutput};

/// Per-patch weights, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferabilityVector(Vec<f64>);

impl TransferabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("transferability {bad} outside [0, 1]")));
        }
        Ok(TransferabilityVector(values))
    }

    pub fn ones(len: usize) -> Self {
        TransferabilityVector(vec![1.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Binary entropy in bits, `0 log 0 = 0`.
pub fn binary_entropy_bits(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    (term(p) + term(1.0 - p)).clamp(0.0, 1.0)
}

/// Transferability of each patch from the discriminator's source probability.
pub fn patch_transferability(probs: &[f64]) -> Result<TransferabilityVector> {
    if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Validation(format!("probability {bad} outside [0, 1]")));
    }
    Ok(TransferabilityVector(probs.iter().map(|&p| binary_entropy_bits(p)).collect()))
}

/// `[1; t_i]` for every image, `n x (R + 1)`.
pub fn class_weights(t: &[f64], n: usize, patches: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (patches + 1));
    for i in 0..n {
        out.push(1.0);
        out.extend_from_slice(&t[i * patches..(i + 1) * patches]);
    }
    out
}

fn checked_class_weights(t: &[f64], n: usize, tokens: usize) -> Result<Vec<f64>> {
    if tokens == 0 || t.len() != n * (tokens - 1) {
        return Err(Error::shape("transferabilities", &[t.len()], &[n, tokens.saturating_sub(1)]));
    }
    TransferabilityVector::new(t.to_vec())?;
    Ok(class_weights(t, n, tokens - 1))
}

/// `[n*heads, T, T]` multiplier: ones except the class row of each head, which
/// holds that image's class weights.
pub fn class_row_mask(class_weights: &[f64], n: usize, heads: usize, tokens: usize) -> Result<Tensor> {
    if class_weights.len() != n * tokens {
        return Err(Error::shape("class_row_mask", &[class_weights.len()], &[n, tokens]));
    }
    let mut mask = Tensor::full(&[n * heads, tokens, tokens], 1.0);
    let data = mask.data_mut();
    for i in 0..n {
        let row = &class_weights[i * tokens..(i + 1) * tokens];
        for h in 0..heads {
            let start = (i * heads + h) * tokens * tokens;
            data[start..start + tokens].copy_from_slice(row);
        }
    }
    Ok(mask)
}

/// Transferable self-attention for a single class query, on plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct TsaOutput {
    /// Softmax weights over the `R + 1` keys.
    pub weights: Vec<f64>,
    /// `weights ⊙ [1; t]`.
    pub effective: Vec<f64>,
    /// `effective · values`, one head-dim vector.
    pub output: Vec<f64>,
}

/// `softmax(q Kᵀ / sqrt(dh)) ⊙ [1; t]` applied to `values`. `keys` and `values`
/// are `(R + 1) x dh` row-major with the class token first.
pub fn tsa(q_class: &[f64], keys: &[f64], values: &[f64], t: &[f64]) -> Result<TsaOutput> {
    let dh = q_class.len();
    if dh == 0 || !keys.len().is_multiple_of(dh) || keys.len() != values.len() {
        return Err(Error::shape("tsa", &[keys.len()], &[values.len(), dh]));
    }
    let tokens = keys.len() / dh;
    if t.len() + 1 != tokens {
        return Err(Error::shape("tsa transferabilities", &[t.len()], &[tokens - 1]));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let scores: Vec<f64> = keys
        .chunks(dh)
        .map(|k| k.iter().zip(q_class).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let mut weights = vec![0.0; tokens];
    softmax_slice(&scores, &mut weights);
    Ok(weighted_sum(weights, values, t, dh))
}

/// The Hadamard-and-mix half of [`tsa`], starting from given softmax weights.
pub fn tsa_from_weights(weights: &[f64], values: &[f64], t: &[f64]) -> Result<TsaOutput> {
    let tokens = weights.len();
    if tokens == 0 || !values.len().is_multiple_of(tokens) || t.len() + 1 != tokens {
        return Err(Error::shape("tsa", &[weights.len(), t.len()], &[values.len()]));
    }
    Ok(weighted_sum(weights.to_vec(), values, t, values.len() / tokens))
}

fn weighted_sum(weights: Vec<f64>, values: &[f64], t: &[f64], dh: usize) -> TsaOutput {
    let effective: Vec<f64> = std::iter::once(weights[0])
        .chain(weights[1..].iter().zip(t).map(|(w, t)| w * t))
        .collect();
    let mut output = vec![0.0; dh];
    for (w, v) in effective.iter().zip(values.chunks(dh)) {
        output.iter_mut().zip(v).for_each(|(o, x)| *o += w * x);
    }
    TsaOutput {
        weights,
        effective,
        output,
    }
}

/// Multi-head attention of `n` images whose class-token rows are weighted by
/// `t` (`n x R`); the same weights are shared by every head.
pub fn t_msa(
    block: &Block,
    tape: &mut Tape,
    store: &ParamStore,
    normed: Var,
    n: usize,
    tokens: usize,
    t: &[f64],
) -> Result<AttentionOutput> {
    let cw = checked_class_weights(t, n, tokens)?;
    block.attn.forward(tape, store, normed, n, tokens, Some(&cw))
}

/// `x' = T-MSA(LN(x)) + x`, `out = MLP(LN(x')) + x'`.
pub fn tam_block(
    block: &Block,
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    n: usize,
    tokens: usize,
    t: &[f64],
) -> Result<BlockOutput> {
    let cw = checked_class_weights(t, n, tokens)?;
    let normed = block.ln1.forward(tape, store, x)?;
    block.forward_normed(tape, store, x, normed, n, tokens, Some(&cw))
}
