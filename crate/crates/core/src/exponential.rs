//! Closed-form solution for exponential utilities `u_n(x) = -exp(-alpha_n x)/alpha_n`.
//!
//! With `beta_m = sum_{k in I_m} 1/alpha_k`, `beta = sum_m beta_m` and the
//! group aggregate `X_bar_m`:
//!
//! ```text
//! d_m      = beta_m ln( (beta/-B) E[exp(-X_bar_m/beta_m)] )
//! Y^k      = -X^k + (X_bar_m + d_m) / (beta_m alpha_k)          k in I_m
//! dQ^m/dP  = exp(-X_bar_m/beta_m) / E[exp(-X_bar_m/beta_m)]
//! ```
//!
//! Every exponential of `X_bar_m/beta_m` goes through log-sum-exp.

use crate::error::{Error, Result};
use crate::model::{sum_rows, Allocation, DensityVector, Model};
use crate::prob::{log_sum_exp, relative_entropy};
use crate::report::RiskReport;

/// Aggregates derived from the risk aversions and positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentialDerived {
    pub alphas: Vec<f64>,
    pub beta_m: Vec<f64>,
    pub beta: f64,
    /// `X_bar_m[s]`
    pub xbar: Vec<Vec<f64>>,
}

impl ExponentialDerived {
    pub fn new(model: &Model) -> Result<Self> {
        let alphas = model.alphas().ok_or(Error::NotExponential)?;
        let groups = model.grouping().groups();
        let beta_m: Vec<f64> = groups
            .iter()
            .map(|g| g.iter().map(|&k| 1.0 / alphas[k]).sum())
            .collect();
        let beta = beta_m.iter().sum();
        let xbar = groups
            .iter()
            .map(|g| sum_rows(model.positions(), g, model.n_scenarios()))
            .collect();
        Ok(Self {
            alphas,
            beta_m,
            beta,
            xbar,
        })
    }
}

/// `ln E[exp(-X_bar/beta_m)]`.
fn log_mgf(probs: &[f64], xbar: &[f64], beta_m: f64) -> f64 {
    let terms: Vec<f64> = probs
        .iter()
        .zip(xbar)
        .map(|(p, x)| p.ln() - x / beta_m)
        .collect();
    log_sum_exp(&terms)
}

/// Level of one group. Reads only that group's aggregate, `beta` and `B`.
pub fn group_level(probs: &[f64], xbar: &[f64], beta_m: f64, beta: f64, b: f64) -> f64 {
    beta_m * ((beta / -b).ln() + log_mgf(probs, xbar, beta_m))
}

/// Group levels `d_m`; `rho = sum_m d_m`.
pub fn group_levels(model: &Model) -> Result<Vec<f64>> {
    let der = ExponentialDerived::new(model)?;
    Ok(levels_from(model, &der))
}

fn levels_from(model: &Model, der: &ExponentialDerived) -> Vec<f64> {
    der.xbar
        .iter()
        .zip(&der.beta_m)
        .map(|(xbar, &bm)| group_level(model.probs(), xbar, bm, der.beta, model.b()))
        .collect()
}

/// Optimal scenario-dependent allocation for the given levels.
pub fn optimal_allocation(model: &Model, d: &[f64]) -> Result<Allocation> {
    let der = ExponentialDerived::new(model)?;
    if d.len() != model.n_groups() {
        return Err(Error::DimensionMismatch {
            expected: model.n_groups(),
            got: d.len(),
        });
    }
    Ok(allocation_from(model, &der, d))
}

fn allocation_from(model: &Model, der: &ExponentialDerived, d: &[f64]) -> Allocation {
    let grouping = model.grouping();
    let y = model
        .positions()
        .iter()
        .enumerate()
        .map(|(k, xk)| {
            let m = grouping.group_of(k);
            let share = 1.0 / (der.beta_m[m] * der.alphas[k]);
            xk.iter()
                .zip(&der.xbar[m])
                .map(|(x, xb)| -x + share * (xb + d[m]))
                .collect()
        })
        .collect();
    Allocation {
        y,
        levels: d.to_vec(),
    }
}

/// Optimal dual densities, normalized in the log domain.
pub fn dual_density(model: &Model) -> Result<DensityVector> {
    let der = ExponentialDerived::new(model)?;
    Ok(density_from(model, &der))
}

fn density_from(model: &Model, der: &ExponentialDerived) -> DensityVector {
    let rows = der
        .xbar
        .iter()
        .zip(&der.beta_m)
        .map(|(xbar, &bm)| {
            let norm = log_mgf(model.probs(), xbar, bm);
            xbar.iter().map(|x| (-x / bm - norm).exp()).collect()
        })
        .collect();
    DensityVector::from_rows_unchecked(rows)
}

/// Entropic penalty `sum_n (1/alpha_n) (H(Q^{m(n)}, P) + ln(-B/beta))`.
pub fn penalty_exponential(model: &Model, q: &DensityVector) -> Result<f64> {
    let der = ExponentialDerived::new(model)?;
    if q.len() != model.n_groups() {
        return Err(Error::DimensionMismatch {
            expected: model.n_groups(),
            got: q.len(),
        });
    }
    let shift = (-model.b() / der.beta).ln();
    let mut entropy = Vec::with_capacity(q.len());
    for row in q.rows() {
        entropy.push(relative_entropy(model.space(), row)?);
    }
    Ok(der
        .alphas
        .iter()
        .enumerate()
        .map(|(n, a)| (entropy[model.grouping().group_of(n)] + shift) / a)
        .sum())
}

/// Full closed-form report; `lambda_star = -B/beta`.
pub fn risk_report(model: &Model) -> Result<RiskReport> {
    let der = ExponentialDerived::new(model)?;
    let d = levels_from(model, &der);
    let rho = d.iter().sum();
    let allocation = allocation_from(model, &der, &d);
    let q = density_from(model, &der);
    let penalty = penalty_exponential(model, &q)?;
    Ok(RiskReport::assemble(
        model,
        "closed-form",
        rho,
        &allocation,
        &q,
        penalty,
        -model.b() / der.beta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_abs_diff_eq;

    const LN_COSH_1: f64 = 0.4337808304830271;

    #[test]
    fn levels_on_fixtures() {
        assert_abs_diff_eq!(group_levels(&fixtures::fix_a()).unwrap()[0], LN_COSH_1, epsilon = 1e-14);
        assert_eq!(group_levels(&fixtures::fix_b()).unwrap(), vec![0.0]);
        let d = group_levels(&fixtures::fix_b_det()).unwrap();
        assert_abs_diff_eq!(d[0], LN_COSH_1, epsilon = 1e-14);
        assert_abs_diff_eq!(d[1], LN_COSH_1, epsilon = 1e-14);
    }

    #[test]
    fn allocations_on_fixtures() {
        let m = fixtures::fix_b();
        let y = optimal_allocation(&m, &[0.0]).unwrap().y;
        assert_eq!(y, vec![vec![-1.0, 1.0], vec![1.0, -1.0]]);

        let m = fixtures::fix_a();
        let a = optimal_allocation(&m, &group_levels(&m).unwrap()).unwrap();
        for v in &a.y[0] {
            assert_abs_diff_eq!(*v, LN_COSH_1, epsilon = 1e-14);
        }

        let m = fixtures::fix_b_det();
        let a = optimal_allocation(&m, &group_levels(&m).unwrap()).unwrap();
        for row in &a.y {
            for v in row {
                assert_abs_diff_eq!(*v, LN_COSH_1, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn densities_on_fixtures() {
        let m = fixtures::fix_a();
        let q = dual_density(&m).unwrap();
        let masses = q.masses(m.space(), 0);
        assert_abs_diff_eq!(masses[0], 0.11920292202211756, epsilon = 1e-12);
        assert_abs_diff_eq!(masses[1], 0.8807970779778824, epsilon = 1e-12);
        assert_eq!(dual_density(&fixtures::fix_b()).unwrap().rows(), &[vec![1.0, 1.0]]);
        let q = dual_density(&fixtures::fix_b_det()).unwrap();
        let masses = q.masses(m.space(), 0);
        assert_abs_diff_eq!(masses[0], 0.11920292202211756, epsilon = 1e-12);
    }

    #[test]
    fn penalty_on_fixtures() {
        let m = fixtures::fix_b();
        let p = DensityVector::physical(1, 2);
        assert_eq!(penalty_exponential(&m, &p).unwrap(), 0.0);
        let m = fixtures::fix_a();
        assert_eq!(penalty_exponential(&m, &p).unwrap(), 0.0);
        let q = dual_density(&m).unwrap();
        assert_abs_diff_eq!(penalty_exponential(&m, &q).unwrap(), 0.3278133254727377, epsilon = 1e-12);
    }

    #[test]
    fn reports_on_fixtures() {
        let r = risk_report(&fixtures::fix_a()).unwrap();
        assert_abs_diff_eq!(r.rho, LN_COSH_1, epsilon = 1e-14);
        assert_abs_diff_eq!(r.risk_allocations[0], LN_COSH_1, epsilon = 1e-14);
        assert_eq!(r.lambda_star, 1.0);

        let r = risk_report(&fixtures::fix_b()).unwrap();
        assert_eq!(r.rho, 0.0);
        assert_eq!(r.risk_allocations, vec![0.0, 0.0]);
        assert_eq!(r.lambda_star, 1.0);

        let r = risk_report(&fixtures::fix_b_det()).unwrap();
        assert_abs_diff_eq!(r.rho, 2.0 * LN_COSH_1, epsilon = 1e-14);
        assert_abs_diff_eq!(r.risk_allocations[1], LN_COSH_1, epsilon = 1e-14);
        assert!(r.residuals.max() < 1e-12, "{:?}", r.residuals);
    }

    #[test]
    fn general_utilities_rejected() {
        let m = fixtures::as_general(&fixtures::fix_a());
        assert_eq!(group_levels(&m), Err(Error::NotExponential));
        assert!(matches!(risk_report(&m), Err(Error::NotExponential)));
    }

    #[test]
    fn extreme_positions_do_not_overflow() {
        let m = fixtures::fix_a().with_positions(vec![vec![700.0, -700.0]]).unwrap();
        let r = risk_report(&m).unwrap();
        assert!(r.rho.is_finite());
        // d = ln E[e^{-X}] = 700 - ln 2
        assert_abs_diff_eq!(r.rho, 700.0 - std::f64::consts::LN_2, epsilon = 1e-10);
        assert!(r.dual_densities[0].iter().all(|x| x.is_finite()));
    }
}
