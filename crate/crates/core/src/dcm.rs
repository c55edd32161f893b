//! Discriminative clustering: mutual information between target inputs and
//! predicted labels, `I = H(mean_j p_j) - mean_j H(p_j)` in nats.
//!
//! The marginal is the mini-batch mean of the predictions.

use crate::error::{Error, Result};
use crate::tape::{softmax_slice, Tape, Var};

const SIMPLEX_TOL: f64 = 1e-9;

/// `n x K` matrix of class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    rows: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl PredictionBatch {
    pub fn new(rows: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if rows == 0 || classes == 0 || probs.len() != rows * classes {
            return Err(Error::shape("PredictionBatch", &[probs.len()], &[rows, classes]));
        }
        for (j, row) in probs.chunks(classes).enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::Validation(format!("row {j} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Validation(format!("row {j} sums to {s}, not 1")));
            }
        }
        Ok(PredictionBatch { rows, classes, probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Validation("ragged prediction rows".into()));
        }
        Self::new(rows.len(), classes, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.probs[j * self.classes..(j + 1) * self.classes]
    }

    pub fn marginal(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.classes];
        for row in self.probs.chunks(self.classes) {
            m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|v| *v /= self.rows as f64);
        m
    }
}

/// Terms are summed in sorted order so the value does not depend on the order
/// of the classes, bit for bit.
fn entropy_nats(p: &[f64]) -> f64 {
    let mut terms: Vec<f64> = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Row-wise softmax of `n x K` logits.
pub fn target_prediction_probs(logits: &[f64], rows: usize, classes: usize) -> Result<PredictionBatch> {
    if classes == 0 || logits.len() != rows * classes {
        return Err(Error::shape("target_prediction_probs", &[logits.len()], &[rows, classes]));
    }
    let mut probs = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks(classes).zip(probs.chunks_mut(classes)) {
        softmax_slice(src, dst);
    }
    PredictionBatch::new(rows, classes, probs)
}

/// Mutual information of a prediction batch, to be maximized.
pub fn mutual_information(batch: &PredictionBatch) -> f64 {
    let marginal = entropy_nats(&batch.marginal());
    let conditional = batch
        .probs
        .chunks(batch.classes)
        .map(entropy_nats)
        .sum::<f64>()
        / batch.rows as f64;
    marginal - conditional
}

/// Mutual information of softmax predictions of `[n, K]` logits, on the tape.
/// The gradient reaches the logits and everything upstream of them.
pub fn mutual_information_on_tape(tape: &mut Tape, logits: Var) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("mutual_information", &shape, &[]));
    }
    let rows = shape[0] as f64;
    let probs = tape.softmax(logits);
    let log_probs = tape.log_softmax(logits);
    let plogp = tape.hadamard(probs, log_probs)?;
    // sum_j sum_k p log p = -n * mean row entropy
    let neg_cond = tape.sum(plogp);
    let neg_cond = tape.scale(neg_cond, 1.0 / rows);
    let marginal = tape.mean_rows(probs)?;
    let mlogm = tape.xlogx(marginal)?;
    let neg_marg = tape.sum(mlogm);
    let marg = tape.scale(neg_marg, -1.0);
    tape.add(marg, neg_cond)
}
