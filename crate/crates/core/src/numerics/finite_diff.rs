//! Central finite-difference gradients, the independent oracle for every
//! analytic gradient in the crate.

use crate::error::{Error, Result};

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate.
///
/// `f` is re-evaluated 2n times; a non-finite evaluation is reported as an error
/// rather than silently producing NaN gradients.
pub fn finite_diff_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    p: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if h <= 0.0 {
        return Err(Error::invalid(format!("finite difference step {h} must be positive")));
    }
    let mut point = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point)?;
        point[i] = orig - h;
        let down = f(&point)?;
        point[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite difference evaluation at coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// |a - b| / max(1, |a|, |b|), the relative-error measure used by all
/// gradient checks in this crate.
pub fn gradient_relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_diff_gradient(|p| Ok(p[0] * p[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let g = finite_diff_gradient(|_| Ok(42.0), &[1.0, -2.0, 0.5], 1e-5).unwrap();
        for gi in g {
            assert!(gi.abs() < 1e-9);
        }
    }

    #[test]
    fn linear_sum() {
        let g = finite_diff_gradient(|p| Ok(p.iter().sum()), &[1.0, 2.0, 3.0], 1e-5).unwrap();
        for gi in g {
            assert!((gi - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_evaluation_propagates() {
        let r = finite_diff_gradient(|p| Ok(p[0].ln()), &[0.0], 1e-5);
        assert!(r.is_err());
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(finite_diff_gradient(|p| Ok(p[0]), &[1.0], 0.0).is_err());
    }
}
