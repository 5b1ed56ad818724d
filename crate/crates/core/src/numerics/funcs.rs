//! Elementary differentiable functions shared by the model layers.

use crate::error::{Error, Result};

use super::rng::Rng;

/// Numerically stable softmax: max-subtraction before exponentiation.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_unchecked(values))
}

/// Softmax kernel without input validation; also used by the gradient tape.
pub(crate) fn softmax_unchecked(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// ln(1 + e^x), evaluated through the symmetric form for large x so it
/// never overflows: softplus(x) = max(x, 0) + ln(1 + e^{-|x|}).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Closed-form KL(N(mu, diag sigma^2) || N(0, I)) =
/// 1/2 sum_i (sigma_i^2 + mu_i^2 - 1 - ln sigma_i^2).
pub fn kl_diag_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::invalid(format!(
            "kl_diag_gaussian length mismatch: {} vs {}",
            mu.len(),
            sigma.len()
        )));
    }
    let mut total = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if s <= 0.0 {
            return Err(Error::invalid(format!("nonpositive sigma {s}")));
        }
        let s2 = s * s;
        total += 0.5 * (s2 + m * m - 1.0 - s2.ln());
    }
    Ok(total)
}

/// Draw n independent standard normals from the generator.
pub fn sample_standard_normal(rng: &mut Rng, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("sample_standard_normal with n = 0"));
    }
    Ok((0..n).map(|_| rng.next_normal()).collect())
}
