//! Domain discriminators and the adversarial losses.
//!
//! Both discriminators sit behind a gradient reversal layer, so a single
//! descent step trains them to separate the domains while pushing the feature
//! extractor the other way.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var, BCE_EPS};
use crate::vit::Linear;

/// Domain label of source examples.
pub const SOURCE: f64 = 1.0;
/// Domain label of target examples.
pub const TARGET: f64 = 0.0;

/// `[1; n_source] ++ [0; n_target]`.
pub fn domain_labels(n_source: usize, n_target: usize) -> Vec<f64> {
    let mut y = vec![SOURCE; n_source];
    y.resize(n_source + n_target, TARGET);
    y
}

/// Perceptron `d -> d -> d/2 -> 1` with GELU hidden activations and a sigmoid
/// output: the probability that its input comes from the source domain.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub layers: Vec<Linear>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        std: f64,
    ) -> Result<Self> {
        let hidden = [input_dim, (input_dim / 2).max(1)];
        Self::with_hidden(store, rng, name, input_dim, &hidden, std)
    }

    pub fn with_hidden<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden: &[usize],
        std: f64,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        if dims.contains(&0) {
            return Err(Error::Config(format!("discriminator {name} has a zero-width layer")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.fc{}", i + 1), w[0], w[1], std))
            .collect::<Result<Vec<_>>>()?;
        Ok(Discriminator { layers })
    }

    /// `[m, d] -> [m, 1]` source probabilities.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i < last {
                h = tape.gelu(h);
            }
        }
        Ok(tape.sigmoid(h))
    }
}

/// Reversal strength at training progress `p`: `2 / (1 + exp(-10 p)) - 1`.
pub fn grl_schedule(progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

/// Mean binary cross-entropy on plain values, with the same clamping as the tape op.
pub fn bce_mean(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::shape("bce_mean", &[probs.len()], &[labels.len()]));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Global adversarial loss on `[n, d]` class states.
pub fn global_domain_loss(
    tape: &mut Tape,
    store: &ParamStore,
    disc: &Discriminator,
    class_states: Var,
    labels: &[f64],
    lambda: f64,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Validation("empty domain batch".into()));
    }
    let reversed = tape.grl(class_states, lambda);
    let probs = disc.forward(tape, store, reversed)?;
    tape.binary_cross_entropy(probs, labels)
}

/// Binary cross-entropy of `[n*R, 1]` patch probabilities, each patch labelled
/// with its image's domain.
pub fn patch_bce(tape: &mut Tape, probs: Var, labels: &[f64], patches: usize) -> Result<Var> {
    if labels.is_empty() || patches == 0 {
        return Err(Error::Validation("empty domain batch".into()));
    }
    let per_patch: Vec<f64> = labels
        .iter()
        .flat_map(|&y| std::iter::repeat_n(y, patches))
        .collect();
    tape.binary_cross_entropy(probs, &per_patch)
}

/// Patch-level adversarial loss on `[n*R, d]` patch features. Returns the loss
/// and the per-patch source probabilities.
pub fn patch_domain_loss(
    tape: &mut Tape,
    store: &ParamStore,
    disc: &Discriminator,
    patch_states: Var,
    labels: &[f64],
    patches: usize,
    lambda: f64,
) -> Result<(Var, Var)> {
    let reversed = tape.grl(patch_states, lambda);
    let probs = disc.forward(tape, store, reversed)?;
    let loss = patch_bce(tape, probs, labels, patches)?;
    Ok((loss, probs))
}
