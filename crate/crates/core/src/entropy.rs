use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-9;

/// Shannon entropy `-Σ p log_base p` of a probability vector, with `0 log 0 = 0`.
pub fn entropy(p: &[f64], base: f64) -> Result<f64> {
    if !(base > 0.0 && base != 1.0 && base.is_finite()) {
        return Err(Error::Validation(format!("invalid logarithm base {base}")));
    }
    if p.is_empty() {
        return Err(Error::Validation("empty probability vector".into()));
    }
    if let Some(bad) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Validation(format!("probability {bad} is negative or not finite")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        return Err(Error::Validation(format!("probabilities sum to {total}, not 1")));
    }
    let nats: f64 = -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>();
    Ok((nats / base.ln()).max(0.0))
}
