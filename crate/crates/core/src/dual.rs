//! Dual machinery for general utilities.
//!
//! For group densities `xi_m = dQ^m/dP` (bank `n` uses the density of its
//! group) the penalty is
//!
//! ```text
//! alpha_B(Q) = inf_{lambda > 0} (1/lambda) ( -B + sum_n E[v_n(lambda xi_n)] )
//!            = sum_n E[xi_n v_n'(lambda* xi_n)]
//! ```
//!
//! and the risk at fixed `Q` is `rho^Q = -sum_n E_{Q^n}[X^n] - alpha_B(Q)`,
//! attained by `Yhat^n = -X^n - v_n'(lambda* xi_n)`. The systemic risk is the
//! maximum of `rho^Q` over the grouped densities.

use crate::error::{Error, Result};
use crate::model::{Allocation, DensityVector, Model, DENSITY_NORM_TOL};
use crate::prob::log_sum_exp;
use crate::report::RiskReport;
use crate::utility::{Utility, MAX_DOUBLINGS};

/// Relative bracket width at which the multiplier bisection stops.
pub const LAMBDA_WIDTH_RTOL: f64 = 1e-14;
/// Absolute first-order residual at which the multiplier bisection stops.
pub const LAMBDA_RESIDUAL_TOL: f64 = 1e-12;
/// Objective decrease tolerated on a step that improves the certificate.
const FLAT_STEP_RTOL: f64 = 1e-12;

/// Solution of the first-order condition for the penalty's multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaStar {
    pub value: f64,
    /// First-order condition evaluated at `value`.
    pub residual: f64,
    pub iterations: usize,
}

fn check_density(model: &Model, q: &DensityVector) -> Result<()> {
    if q.len() != model.n_groups() {
        return Err(Error::DimensionMismatch {
            expected: model.n_groups(),
            got: q.len(),
        });
    }
    for (m, row) in q.rows().iter().enumerate() {
        if row.len() != model.n_scenarios() {
            return Err(Error::DimensionMismatch {
                expected: model.n_scenarios(),
                got: row.len(),
            });
        }
        check_row(model.probs(), row).map_err(|mass| Error::NonNormalizedQ { group: m, mass })?;
    }
    Ok(())
}

fn check_row(probs: &[f64], row: &[f64]) -> std::result::Result<(), f64> {
    let mass: f64 = row.iter().zip(probs).map(|(x, p)| x * p).sum();
    if row.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (mass - 1.0).abs() > DENSITY_NORM_TOL {
        return Err(mass);
    }
    Ok(())
}

/// `sum_s p_s v(lambda xi_s)` and `sum_s p_s xi_s v'(lambda xi_s)` for one bank.
/// Scenarios with `xi_s = 0` contribute `v(0+) = u(+inf)` and nothing.
fn conjugate_moments(u: &Utility, probs: &[f64], xi: &[f64], lambda: f64) -> Result<(f64, f64)> {
    let (mut ev, mut exv) = (0.0, 0.0);
    for (p, &x) in probs.iter().zip(xi) {
        if x > 0.0 {
            let c = u.conjugate(lambda * x)?;
            ev += p * c.value;
            exv += p * x * c.slope;
        } else {
            ev += p * u.supremum();
        }
    }
    Ok((ev, exv))
}

/// `-B + sum_n E[v_n(lambda xi_n)] - lambda sum_n E[xi_n v_n'(lambda xi_n)]`,
/// increasing in `eta = 1/lambda`.
fn first_order(model: &Model, q: &DensityVector, lambda: f64) -> Result<f64> {
    let mut total = -model.b();
    for (n, u) in model.utilities().iter().enumerate() {
        let xi = q.row(model.grouping().group_of(n));
        let (ev, exv) = conjugate_moments(u, model.probs(), xi, lambda)?;
        total += ev - lambda * exv;
    }
    Ok(total)
}

/// Solves the first-order condition in `eta = 1/lambda`, where the penalty's
/// objective is strictly convex: bracket by doubling or halving from
/// `eta = 1`, then bisect.
pub fn solve_lambda_star(model: &Model, q: &DensityVector) -> Result<LambdaStar> {
    check_density(model, q)?;
    let f = |eta: f64| first_order(model, q, 1.0 / eta);

    let f1 = f(1.0)?;
    if f1 == 0.0 {
        return Ok(LambdaStar {
            value: 1.0,
            residual: 0.0,
            iterations: 0,
        });
    }
    // f increasing in eta: f1 < 0 means the root is to the right.
    let (mut lo, mut hi) = (1.0, 1.0);
    let mut iterations = 0;
    let mut found = false;
    for _ in 0..MAX_DOUBLINGS {
        iterations += 1;
        if f1 < 0.0 {
            lo = hi;
            hi *= 2.0;
            if f(hi)? >= 0.0 {
                found = true;
                break;
            }
        } else {
            hi = lo;
            lo *= 0.5;
            if f(lo)? < 0.0 {
                found = true;
                break;
            }
        }
    }
    if !found {
        return Err(Error::BracketFailure);
    }

    let mut eta = 0.5 * (lo + hi);
    let mut residual = f(eta)?;
    while (hi - lo) > LAMBDA_WIDTH_RTOL * eta && residual.abs() > LAMBDA_RESIDUAL_TOL {
        iterations += 1;
        if residual < 0.0 {
            lo = eta;
        } else {
            hi = eta;
        }
        eta = 0.5 * (lo + hi);
        residual = f(eta)?;
    }
    Ok(LambdaStar {
        value: 1.0 / eta,
        residual,
        iterations,
    })
}

fn penalty_at(model: &Model, q: &DensityVector, lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for (n, u) in model.utilities().iter().enumerate() {
        let xi = q.row(model.grouping().group_of(n));
        total += conjugate_moments(u, model.probs(), xi, lambda)?.1;
    }
    Ok(total)
}

/// `alpha_B(Q) = sum_n E[xi_n v_n'(lambda* xi_n)]`.
pub fn penalty_general(model: &Model, q: &DensityVector) -> Result<f64> {
    let lambda = solve_lambda_star(model, q)?;
    penalty_at(model, q, lambda.value)
}

/// Risk at a fixed dual vector and the allocation attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedDual {
    pub rho_q: f64,
    /// `Yhat[n][s]`; clears only when `Q` is optimal.
    pub yhat: Vec<Vec<f64>>,
    pub lambda_star: LambdaStar,
    pub penalty: f64,
}

impl FixedDual {
    /// `S_m(s) = sum_{k in I_m} Yhat^k(s)`.
    pub fn group_sums(&self, model: &Model) -> Vec<Vec<f64>> {
        model
            .grouping()
            .groups()
            .iter()
            .map(|g| crate::model::sum_rows(&self.yhat, g, model.n_scenarios()))
            .collect()
    }
}

/// `rho^Q` and `Yhat_Q`.
pub fn rho_given_q(model: &Model, q: &DensityVector) -> Result<FixedDual> {
    check_density(model, q)?;
    for (m, row) in q.rows().iter().enumerate() {
        if let Some(s) = row.iter().position(|&x| x == 0.0) {
            return Err(Error::ZeroDensityScenario { group: m, scenario: s });
        }
    }
    let lambda_star = solve_lambda_star(model, q)?;
    let lambda = lambda_star.value;
    let probs = model.probs();
    let mut yhat = Vec::with_capacity(model.n_banks());
    let (mut rho_q, mut penalty) = (0.0, 0.0);
    for (n, (u, x)) in model.utilities().iter().zip(model.positions()).enumerate() {
        let xi = q.row(model.grouping().group_of(n));
        let mut row = Vec::with_capacity(x.len());
        for s in 0..x.len() {
            let slope = u.conjugate_slope(lambda * xi[s])?;
            row.push(-x[s] - slope);
            let w = probs[s] * xi[s];
            penalty += w * slope;
            rho_q -= w * x[s];
        }
        yhat.push(row);
    }
    Ok(FixedDual {
        rho_q: rho_q - penalty,
        yhat,
        lambda_star,
        penalty,
    })
}

/// Tuning of [`maximize_dual`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentOptions {
    /// Stationarity certificate threshold, relative to `1 + |rho|`.
    pub tol: f64,
    pub max_iter: usize,
    /// Step halvings per line search.
    pub max_backtracks: usize,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            max_backtracks: 60,
        }
    }
}

/// Last accepted iterate of the dual ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct DualAscentState {
    pub q: DensityVector,
    pub objective: f64,
    /// `max_m` of the P-standard deviation of the within-group sums of `Yhat`.
    pub stationarity: f64,
    pub iterations: usize,
    /// Objective after every accepted step, starting from `Q = P`.
    pub history: Vec<f64>,
}

/// Output of [`maximize_dual`].
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub q: DensityVector,
    pub rho: f64,
    pub at_optimum: FixedDual,
    pub trace: DualAscentState,
}

fn densities_from_scores(probs: &[f64], scores: &[Vec<f64>]) -> DensityVector {
    let rows = scores
        .iter()
        .map(|theta| {
            let terms: Vec<f64> = probs.iter().zip(theta).map(|(p, t)| p.ln() + t).collect();
            let norm = log_sum_exp(&terms);
            theta.iter().map(|t| (t - norm).exp()).collect()
        })
        .collect();
    DensityVector::from_rows_unchecked(rows)
}

fn stationarity(probs: &[f64], sums: &[Vec<f64>]) -> f64 {
    sums.iter()
        .map(|row| {
            let mean: f64 = row.iter().zip(probs).map(|(v, p)| v * p).sum();
            row.iter()
                .zip(probs)
                .map(|(v, p)| p * (v - mean).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

/// Maximizes `rho^Q` over grouped densities.
///
/// Densities are softmax images of unconstrained scores, which keeps them
/// strictly positive. The ascent direction is the score gradient
/// `p_s xi_s (S_m(s) - E_{Q^m} S_m)` rescaled per scenario by
/// `p_s xi_s sum_{k in I_m} T_k`, where `T_k = -u_k'/u_k''` is the risk
/// tolerance at the current allocation; a backtracking line search keeps
/// the objective non-decreasing. Iteration stops on the stationarity
/// certificate: within-group sums of `Yhat` constant across scenarios.
pub fn maximize_dual(model: &Model) -> Result<DualSolution> {
    maximize_dual_with(model, &AscentOptions::default())
}

pub fn maximize_dual_with(model: &Model, options: &AscentOptions) -> Result<DualSolution> {
    let probs = model.probs();
    let groups = model.grouping().groups();
    let mut scores = vec![vec![0.0; model.n_scenarios()]; model.n_groups()];
    let mut q = densities_from_scores(probs, &scores);
    let mut current = rho_given_q(model, &q)?;
    let mut sums = current.group_sums(model);
    let mut stat = stationarity(probs, &sums);
    let mut history = vec![current.rho_q];
    let mut iterations = 0;
    let mut polish = 2;

    loop {
        let converged = stat <= options.tol * (1.0 + current.rho_q.abs());
        if converged {
            if polish == 0 || stat == 0.0 {
                break;
            }
            polish -= 1;
        }
        if iterations >= options.max_iter {
            return Err(Error::NoConvergence("dual ascent"));
        }
        iterations += 1;

        let mut direction = vec![vec![0.0; model.n_scenarios()]; model.n_groups()];
        let mut slope = 0.0;
        for (m, g) in groups.iter().enumerate() {
            let xi = q.row(m);
            let mean: f64 = (0..probs.len()).map(|s| probs[s] * xi[s] * sums[m][s]).sum();
            for s in 0..probs.len() {
                let tolerance: f64 = g
                    .iter()
                    .map(|&k| {
                        let u = &model.utilities()[k];
                        let x = model.positions()[k][s] + current.yhat[k][s];
                        -u.marginal(x) / u.curvature(x)
                    })
                    .sum();
                let grad = probs[s] * xi[s] * (sums[m][s] - mean);
                direction[m][s] = (sums[m][s] - mean) / tolerance;
                slope += grad * direction[m][s];
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..options.max_backtracks {
            let trial: Vec<Vec<f64>> = scores
                .iter()
                .zip(&direction)
                .map(|(t, d)| t.iter().zip(d).map(|(a, b)| a + step * b).collect())
                .collect();
            let q_trial = densities_from_scores(probs, &trial);
            match rho_given_q(model, &q_trial) {
                Ok(cand) => {
                    let cand_sums = cand.group_sums(model);
                    let cand_stat = stationarity(probs, &cand_sums);
                    let armijo = cand.rho_q >= current.rho_q + 1e-4 * step * slope;
                    // Near the optimum the increase drowns in the evaluation
                    // noise of rho^Q; accept a flat step only if the
                    // certificate improves.
                    let flat = cand.rho_q >= current.rho_q - FLAT_STEP_RTOL * (1.0 + current.rho_q.abs())
                        && cand_stat < stat;
                    if armijo || flat {
                        accepted = Some((trial, q_trial, cand, cand_sums, cand_stat));
                        break;
                    }
                }
                Err(Error::ZeroDensityScenario { .. }) | Err(Error::BracketFailure) => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, q_trial, cand, cand_sums, cand_stat)) => {
                scores = trial;
                q = q_trial;
                current = cand;
                sums = cand_sums;
                stat = cand_stat;
                history.push(current.rho_q);
            }
            None if converged => break,
            None => return Err(Error::NoConvergence("dual ascent line search")),
        }
    }

    let trace = DualAscentState {
        q: q.clone(),
        objective: current.rho_q,
        stationarity: stat,
        iterations,
        history,
    };
    Ok(DualSolution {
        q,
        rho: current.rho_q,
        at_optimum: current,
        trace,
    })
}

/// Projects `Yhat_Q` onto the allocation family: each group's mismatch
/// `d_m - S_m(s)` is spread equally over its members, with
/// `d_m = E_{Q^m}[S_m]`. This keeps every `E_{Q^m}[Y^n]`, hence `rho^Q`, and
/// moves expected utility only at second order in the mismatch.
pub fn clearing_projection(model: &Model, q: &DensityVector, fixed: &FixedDual) -> Allocation {
    let probs = model.probs();
    let sums = fixed.group_sums(model);
    let levels: Vec<f64> = sums
        .iter()
        .enumerate()
        .map(|(m, row)| row.iter().zip(q.row(m)).zip(probs).map(|((v, x), p)| v * x * p).sum())
        .collect();
    let groups = model.grouping().groups();
    let y = fixed
        .yhat
        .iter()
        .enumerate()
        .map(|(n, row)| {
            let m = model.grouping().group_of(n);
            let share = 1.0 / groups[m].len() as f64;
            row.iter()
                .zip(&sums[m])
                .map(|(y, s)| y + share * (levels[m] - s))
                .collect()
        })
        .collect();
    Allocation { y, levels }
}

/// Report from the dual engine, with the allocation from [`clearing_projection`].
pub fn dual_report(model: &Model, options: &AscentOptions) -> Result<RiskReport> {
    let sol = maximize_dual_with(model, options)?;
    let allocation = clearing_projection(model, &sol.q, &sol.at_optimum);
    Ok(RiskReport::assemble(
        model,
        "dual",
        sol.rho,
        &allocation,
        &sol.q,
        sol.at_optimum.penalty,
        sol.at_optimum.lambda_star.value,
    ))
}

/// `U_n(a)` together with its minimizing multiplier, which is also `U_n'(a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValuePoint {
    pub value: f64,
    pub slope: f64,
}

/// `U_n(a) = inf_{lambda > 0} { lambda (E_{Q^n}[X^n] + a) + E[v_n(lambda xi_n)] }`.
pub fn value_function(model: &Model, n: usize, q_row: &[f64], a: f64) -> Result<f64> {
    Ok(value_point(model, n, q_row, a)?.value)
}

/// Minimizes the strictly convex objective of [`value_function`] by bisection
/// on its derivative `E_{Q^n}[X^n] + a + E[xi v_n'(lambda xi)]` in `ln lambda`.
pub fn value_point(model: &Model, n: usize, q_row: &[f64], a: f64) -> Result<ValuePoint> {
    if n >= model.n_banks() {
        return Err(Error::DimensionMismatch {
            expected: model.n_banks(),
            got: n + 1,
        });
    }
    if q_row.len() != model.n_scenarios() {
        return Err(Error::DimensionMismatch {
            expected: model.n_scenarios(),
            got: q_row.len(),
        });
    }
    let probs = model.probs();
    check_row(probs, q_row).map_err(|mass| Error::NonNormalizedQ {
        group: model.grouping().group_of(n),
        mass,
    })?;
    let u = &model.utilities()[n];
    let c: f64 = model.positions()[n]
        .iter()
        .zip(q_row)
        .zip(probs)
        .map(|((x, xi), p)| p * xi * x)
        .sum::<f64>()
        + a;
    let deriv = |t: f64| -> Result<f64> { Ok(c + conjugate_moments(u, probs, q_row, t.exp())?.1) };

    let (lo, hi) = log_bracket(|t| deriv(t))?;
    let t = bisect(lo, hi, |t| deriv(t))?;
    let lambda = t.exp();
    let ev = conjugate_moments(u, probs, q_row, lambda)?.0;
    Ok(ValuePoint {
        value: lambda * c + ev,
        slope: lambda,
    })
}

/// Brackets the root of an increasing function of `t` by doubling steps
/// away from `t = 0`.
fn log_bracket<F: Fn(f64) -> Result<f64>>(f: F) -> Result<(f64, f64)> {
    let f0 = f(0.0)?;
    if f0 == 0.0 {
        return Ok((0.0, 0.0));
    }
    let dir = if f0 < 0.0 { 1.0 } else { -1.0 };
    let mut near = 0.0;
    let mut step = 1.0;
    for _ in 0..MAX_DOUBLINGS {
        let t = dir * step;
        let ft = f(t)?;
        if (ft >= 0.0) == (dir > 0.0) {
            return Ok(if dir > 0.0 { (near, t) } else { (t, near) });
        }
        near = t;
        step *= 2.0;
    }
    Err(Error::BracketFailure)
}

/// Bisection of an increasing function on `[lo, hi]` down to adjacent floats.
fn bisect<F: Fn(f64) -> Result<f64>>(mut lo: f64, mut hi: f64, f: F) -> Result<f64> {
    while hi - lo > 2.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(1e-300) {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid)?;
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Splits the total `A` as `argmax sum_n U_n(a^n)` subject to `sum_n a^n = A`.
///
/// At the optimum every `U_n'(a^n)` equals a common multiplier `mu`, and for a
/// given `mu` the matching amount is
/// `a^n(mu) = -E_{Q^n}[X^n] - E[xi_n v_n'(mu xi_n)]`, decreasing in `mu`.
/// The multiplier is found by bisection in `ln mu`.
pub fn optimal_split(model: &Model, q: &DensityVector, total: f64) -> Result<Vec<f64>> {
    check_density(model, q)?;
    let probs = model.probs();
    let amounts = |t: f64| -> Result<Vec<f64>> {
        let mu = t.exp();
        model
            .utilities()
            .iter()
            .zip(model.positions())
            .enumerate()
            .map(|(n, (u, x))| {
                let xi = q.row(model.grouping().group_of(n));
                let ex: f64 = x.iter().zip(xi).zip(probs).map(|((x, xi), p)| p * xi * x).sum();
                Ok(-ex - conjugate_moments(u, probs, xi, mu)?.1)
            })
            .collect()
    };
    // increasing in t
    let excess = |t: f64| -> Result<f64> { Ok(total - amounts(t)?.iter().sum::<f64>()) };
    let (lo, hi) = log_bracket(excess).map_err(|_| Error::NoConvergence("optimal split bracket"))?;
    let t = bisect(lo, hi, excess)?;
    let mut a = amounts(t)?;
    let gap = (total - a.iter().sum::<f64>()) / a.len() as f64;
    for v in &mut a {
        *v += gap;
    }
    Ok(a)
}
