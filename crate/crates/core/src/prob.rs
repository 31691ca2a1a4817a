//! Expectations, covariances and relative entropy on a finite scenario space.
//!
//! Densities are Radon-Nikodym values `dQ/dP` per scenario, so
//! `E_Q[Z] = sum_s p_s xi_s Z_s`.

use crate::error::{Error, Result};
use crate::model::ScenarioSpace;

/// `ln sum_i exp(t_i)` without overflow. Returns `-inf` for an empty slice.
pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn check_len(space: &ScenarioSpace, v: &[f64]) -> Result<()> {
    if v.len() != space.len() {
        return Err(Error::DimensionMismatch {
            expected: space.len(),
            got: v.len(),
        });
    }
    Ok(())
}

/// `E_P[Z]`.
pub fn expect(space: &ScenarioSpace, values: &[f64]) -> Result<f64> {
    check_len(space, values)?;
    Ok(space.probs().iter().zip(values).map(|(p, z)| p * z).sum())
}

/// `E_Q[Z]` where `density` is `dQ/dP`.
pub fn expect_q(space: &ScenarioSpace, density: &[f64], values: &[f64]) -> Result<f64> {
    check_len(space, density)?;
    check_len(space, values)?;
    Ok(space
        .probs()
        .iter()
        .zip(density)
        .zip(values)
        .map(|((p, xi), z)| p * xi * z)
        .sum())
}

/// `COV_Q[a, b] = E_Q[(a - E_Q a)(b - E_Q b)]`, evaluated in centered form.
pub fn cov_q(space: &ScenarioSpace, density: &[f64], a: &[f64], b: &[f64]) -> Result<f64> {
    let ma = expect_q(space, density, a)?;
    let mb = expect_q(space, density, b)?;
    check_len(space, b)?;
    Ok(space
        .probs()
        .iter()
        .zip(density)
        .zip(a.iter().zip(b))
        .map(|((p, xi), (x, y))| p * xi * (x - ma) * (y - mb))
        .sum())
}

/// `H(Q, P) = E[xi ln xi]` with `0 ln 0 = 0`.
pub fn relative_entropy(space: &ScenarioSpace, density: &[f64]) -> Result<f64> {
    check_len(space, density)?;
    Ok(space
        .probs()
        .iter()
        .zip(density)
        .map(|(p, &xi)| if xi > 0.0 { p * xi * xi.ln() } else { 0.0 })
        .sum())
}
