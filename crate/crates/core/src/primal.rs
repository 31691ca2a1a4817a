//! Brute-force solution of the primal problems.
//!
//! ```text
//! rho(X)  = inf { sum_m d_m : Y in C, E[sum_n u_n(X^n + Y^n)] >= B }
//! pi_A(X) = sup { E[sum_n u_n(X^n + Y^n)] : Y in C, sum_m d_m <= A }
//! ```
//!
//! where `C` holds the allocations whose within-group sums are the
//! deterministic levels `d_m`. The allocation is parametrized by the levels
//! and the positions of every group member except the first, whose position
//! absorbs the remainder, so clearing holds by construction.
//!
//! `pi_A` is an unconstrained strictly concave maximization once the last
//! level is eliminated through `sum_m d_m = A`; it is solved by damped
//! Newton. `rho` is the root of `pi_A(X) = B` in `A`, found by Newton on the
//! concave increasing map `A -> pi_A(X)` with slope `dpi/dA = E[u'_k(X^k+Y^k)]`.
//!
//! Only the model primitives are shared with the other engines.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{Allocation, DensityVector, Model};
use crate::report::RiskReport;

/// KKT residual the primal solve must reach.
pub const KKT_TOL: f64 = 1e-8;

/// Halvings back toward the last solved total after an overflow.
const MAX_RETREATS: usize = 60;

/// Tuning of the primal solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimalOptions {
    pub max_newton: usize,
    pub max_outer: usize,
    /// Target for `|pi_A - B|`, relative to `1 + |B|`.
    pub budget_tol: f64,
}

impl Default for PrimalOptions {
    fn default() -> Self {
        Self {
            max_newton: 200,
            max_outer: 200,
            budget_tol: 1e-13,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalSolution {
    pub rho: f64,
    pub allocation: Allocation,
    /// `E[sum_n u_n(X^n + Y^n)]`
    pub utility_attained: f64,
    /// `utility_attained - B`
    pub feasibility_residual: f64,
    pub kkt_residual: f64,
    /// `dpi/dA` at the optimum; the multiplier of the budget constraint is its inverse.
    pub marginal: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityMax {
    pub value: f64,
    pub allocation: Allocation,
    /// `dpi/dA`
    pub marginal: f64,
}

/// Linear map from the free variables to the allocation matrix at a given total.
struct Layout {
    n_banks: usize,
    n_scen: usize,
    n_groups: usize,
    /// `(first member, other members)` per group
    members: Vec<(usize, Vec<usize>)>,
    /// offset of each group's member block in the variable vector
    offsets: Vec<usize>,
    n_vars: usize,
}

impl Layout {
    fn new(model: &Model) -> Self {
        let n_scen = model.n_scenarios();
        let n_groups = model.n_groups();
        let members: Vec<(usize, Vec<usize>)> = model
            .grouping()
            .groups()
            .iter()
            .map(|g| (g[0], g[1..].to_vec()))
            .collect();
        let mut offsets = Vec::with_capacity(n_groups);
        let mut next = n_groups - 1;
        for (_, rest) in &members {
            offsets.push(next);
            next += rest.len() * n_scen;
        }
        Self {
            n_banks: model.n_banks(),
            n_scen,
            n_groups,
            members,
            offsets,
            n_vars: next,
        }
    }

    fn levels(&self, x: &DVector<f64>, total: f64) -> Vec<f64> {
        let mut d: Vec<f64> = (0..self.n_groups - 1).map(|m| x[m]).collect();
        d.push(total - d.iter().sum::<f64>());
        d
    }

    fn allocation(&self, x: &DVector<f64>, total: f64) -> Allocation {
        let levels = self.levels(x, total);
        let mut y = vec![vec![0.0; self.n_scen]; self.n_banks];
        for (m, (first, rest)) in self.members.iter().enumerate() {
            for s in 0..self.n_scen {
                let mut others = 0.0;
                for (j, &k) in rest.iter().enumerate() {
                    let v = x[self.offsets[m] + j * self.n_scen + s];
                    y[k][s] = v;
                    others += v;
                }
                y[*first][s] = levels[m] - others;
            }
        }
        Allocation { y, levels }
    }

    /// Inverse of [`Layout::allocation`] for a matrix that clears; the total
    /// is returned alongside.
    fn variables(&self, y: &[Vec<f64>], probs: &[f64]) -> (DVector<f64>, f64) {
        let mut x = DVector::zeros(self.n_vars);
        let mut total = 0.0;
        for (m, (first, rest)) in self.members.iter().enumerate() {
            let level: f64 = (0..self.n_scen)
                .map(|s| probs[s] * (y[*first][s] + rest.iter().map(|&k| y[k][s]).sum::<f64>()))
                .sum();
            if m + 1 < self.n_groups {
                x[m] = level;
            }
            total += level;
            for (j, &k) in rest.iter().enumerate() {
                for s in 0..self.n_scen {
                    x[self.offsets[m] + j * self.n_scen + s] = y[k][s];
                }
            }
        }
        (x, total)
    }

    /// Moves the total by `delta`, spreading it equally over all banks.
    fn shift_total(&self, x: &mut DVector<f64>, delta: f64) {
        let per_bank = delta / self.n_banks as f64;
        for (m, (_, rest)) in self.members.iter().enumerate() {
            if m + 1 < self.n_groups {
                x[m] += per_bank * (1 + rest.len()) as f64;
            }
            for j in 0..rest.len() * self.n_scen {
                x[self.offsets[m] + j] += per_bank;
            }
        }
    }

    /// Jacobian `dY[n][s] / dx`, rows indexed by `n * S + s`.
    fn jacobian(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.n_banks * self.n_scen, self.n_vars);
        let last = self.n_groups - 1;
        for (m, (first, rest)) in self.members.iter().enumerate() {
            for s in 0..self.n_scen {
                let row0 = first * self.n_scen + s;
                if m < last {
                    t[(row0, m)] = 1.0;
                } else {
                    for mm in 0..last {
                        t[(row0, mm)] = -1.0;
                    }
                }
                for (j, &k) in rest.iter().enumerate() {
                    let col = self.offsets[m] + j * self.n_scen + s;
                    t[(k * self.n_scen + s, col)] = 1.0;
                    t[(row0, col)] = -1.0;
                }
            }
        }
        t
    }
}

/// Objective, gradient and negated Hessian of `x -> E[sum u(X + Y(x))]`.
struct Concave<'a> {
    model: &'a Model,
    layout: &'a Layout,
    jac: DMatrix<f64>,
}

impl<'a> Concave<'a> {
    fn value(&self, x: &DVector<f64>, total: f64) -> f64 {
        self.model.expected_utility(&self.layout.allocation(x, total).y)
    }

    /// Per-entry `p_s u'` and `-p_s u''` at the allocation.
    fn weights(&self, y: &[Vec<f64>]) -> (DVector<f64>, DVector<f64>) {
        let s_len = self.layout.n_scen;
        let probs = self.model.probs();
        let mut w = DVector::zeros(self.layout.n_banks * s_len);
        let mut c = DVector::zeros(self.layout.n_banks * s_len);
        for (n, (u, x)) in self.model.utilities().iter().zip(self.model.positions()).enumerate() {
            for s in 0..s_len {
                let z = x[s] + y[n][s];
                w[n * s_len + s] = probs[s] * u.marginal(z);
                c[n * s_len + s] = -probs[s] * u.curvature(z);
            }
        }
        (w, c)
    }

    fn gradient_and_hessian(&self, x: &DVector<f64>, total: f64) -> (DVector<f64>, DMatrix<f64>) {
        let a = self.layout.allocation(x, total);
        let (w, c) = self.weights(&a.y);
        let grad = self.jac.tr_mul(&w);
        let mut scaled = self.jac.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= c[i];
        }
        (grad, self.jac.tr_mul(&scaled))
    }

    /// `dpi/dA` at fixed free variables: the first member of the last group
    /// absorbs a change of the total.
    fn marginal(&self, x: &DVector<f64>, total: f64) -> f64 {
        let a = self.layout.allocation(x, total);
        let (w, _) = self.weights(&a.y);
        let first = self.layout.members[self.layout.n_groups - 1].0;
        (0..self.layout.n_scen).map(|s| w[first * self.layout.n_scen + s]).sum()
    }

    /// Damped Newton ascent at a fixed total. Once the Newton decrement is
    /// too small for the objective to register progress, full steps are
    /// taken until the decrement stops shrinking.
    fn maximize(&self, x: &mut DVector<f64>, total: f64, max_iter: usize) -> Result<f64> {
        let mut value = self.value(x, total);
        if self.layout.n_vars == 0 {
            return Ok(value);
        }
        let mut prev_floor = f64::INFINITY;
        for _ in 0..max_iter {
            let (grad, neg_hess) = self.gradient_and_hessian(x, total);
            let step = match neg_hess.clone().cholesky() {
                Some(ch) => ch.solve(&grad),
                None => {
                    let ridge = 1e-12 * neg_hess.diagonal().amax().max(1e-300);
                    let shifted = neg_hess + DMatrix::identity(self.layout.n_vars, self.layout.n_vars) * ridge;
                    shifted.cholesky().ok_or(Error::NoConvergence("primal Newton system"))?.solve(&grad)
                }
            };
            let decrement = grad.dot(&step);
            if !decrement.is_finite() {
                return Err(Error::NoConvergence("primal Newton step"));
            }
            if decrement <= 1e-20 * (1.0 + value.abs()) {
                return Ok(value);
            }
            if decrement <= 1e-14 * (1.0 + value.abs()) {
                if decrement >= prev_floor {
                    return Ok(value);
                }
                prev_floor = decrement;
                *x += &step;
                value = self.value(x, total);
                continue;
            }
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let trial = &*x + &step * t;
                let v = self.value(&trial, total);
                if v.is_finite() && v >= value + 1e-4 * t * decrement {
                    *x = trial;
                    value = v;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                return Err(Error::NoConvergence("primal line search"));
            }
        }
        Err(Error::NoConvergence("primal Newton"))
    }
}

/// `pi_A(X)` and its maximizer.
pub fn max_utility(model: &Model, total: f64) -> Result<UtilityMax> {
    max_utility_with(model, total, &PrimalOptions::default())
}

pub fn max_utility_with(model: &Model, total: f64, options: &PrimalOptions) -> Result<UtilityMax> {
    let layout = Layout::new(model);
    let problem = Concave {
        model,
        layout: &layout,
        jac: layout.jacobian(),
    };
    let mut x = DVector::zeros(layout.n_vars);
    let value = problem.maximize(&mut x, total, options.max_newton)?;
    Ok(UtilityMax {
        value,
        allocation: layout.allocation(&x, total),
        marginal: problem.marginal(&x, total),
    })
}

/// `rho(X)` and its optimal allocation, starting from `Y = 0`.
pub fn primal_solve(model: &Model) -> Result<PrimalSolution> {
    let zero = vec![vec![0.0; model.n_scenarios()]; model.n_banks()];
    primal_solve_from(model, &zero, &PrimalOptions::default())
}

/// A solved `pi_A` at one total.
struct Point {
    total: f64,
    x: DVector<f64>,
    value: f64,
}

/// `rho(X)` starting from an arbitrary `N x S` allocation; only its
/// non-first-member entries and its group-level P-means are used.
///
/// The budget root is found by safeguarded Newton on
/// `A -> phi(pi_A(X))`, where `phi(v) = -ln(sup u - v)` for utilities
/// bounded above: for exponential utilities this map is affine in `A`.
/// Once the root is bracketed, steps leaving the bracket are replaced by
/// bisection.
pub fn primal_solve_from(model: &Model, start: &[Vec<f64>], options: &PrimalOptions) -> Result<PrimalSolution> {
    let layout = Layout::new(model);
    let problem = Concave {
        model,
        layout: &layout,
        jac: layout.jacobian(),
    };
    let b = model.b();
    let sup: f64 = model.utilities().iter().map(|u| u.supremum()).sum();
    let phi = |v: f64| if sup.is_finite() { -(sup - v).ln() } else { v };
    let dphi = |v: f64| if sup.is_finite() { 1.0 / (sup - v) } else { 1.0 };

    // Warm start from `from`, with the change of total spread over all banks.
    // A failed solve to the left of `from` is an overflow of the utilities.
    let eval = |total: f64, from: &Point| -> Result<Option<Point>> {
        let mut x = from.x.clone();
        layout.shift_total(&mut x, total - from.total);
        match problem.maximize(&mut x, total, options.max_newton) {
            Ok(value) if value.is_finite() => Ok(Some(Point { total, x, value })),
            Ok(_) => Ok(None),
            Err(_) if total < from.total => Ok(None),
            Err(e) => Err(e),
        }
    };

    let (mut x, total) = layout.variables(start, model.probs());
    let value = problem.maximize(&mut x, total, options.max_newton)?;
    let mut cur = Point { total, x, value };
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut converged = false;
    for _ in 0..options.max_outer {
        let gap = cur.value - b;
        if gap.abs() <= options.budget_tol * (1.0 + b.abs()) {
            converged = true;
            break;
        }
        if gap < 0.0 {
            lo = lo.max(cur.total);
        } else {
            hi = hi.min(cur.total);
        }
        let slope = problem.marginal(&cur.x, cur.total);
        if !(slope >= 0.0) {
            // pi_A is nondecreasing whenever B is attainable
            return Err(Error::Infeasible);
        }
        let f = phi(cur.value) - phi(b);
        let mut next = cur.total - f / (dphi(cur.value) * slope);
        if lo.is_finite() && hi.is_finite() {
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
        } else if !next.is_finite() {
            let step = 1.0 + cur.total.abs();
            next = if gap < 0.0 { cur.total + step } else { cur.total - step };
        }
        if next == cur.total {
            converged = true;
            break;
        }
        let mut moved = false;
        for _ in 0..MAX_RETREATS {
            match eval(next, &cur)? {
                Some(p) => {
                    cur = p;
                    moved = true;
                    break;
                }
                None => {
                    lo = lo.max(next);
                    next = 0.5 * (next + cur.total);
                }
            }
        }
        if !moved {
            return Err(Error::NoConvergence("primal budget root"));
        }
    }
    if !converged {
        return Err(Error::NoConvergence("primal budget root"));
    }

    let Point { total, x, value } = cur;
    let allocation = layout.allocation(&x, total);
    let marginal = problem.marginal(&x, total);
    let kkt_residual = kkt_residual(model, &allocation, marginal, value);
    if kkt_residual > KKT_TOL {
        return Err(Error::NoConvergence("primal KKT"));
    }
    Ok(PrimalSolution {
        rho: allocation.total(),
        allocation,
        utility_attained: value,
        feasibility_residual: value - b,
        kkt_residual,
        marginal,
    })
}

/// KKT residual of `min sum d` s.t. `E[sum u] >= B` with multiplier `1/marginal`:
/// level stationarity, member stationarity and the binding constraint.
fn kkt_residual(model: &Model, allocation: &Allocation, marginal: f64, value: f64) -> f64 {
    let probs = model.probs();
    let mu = 1.0 / marginal;
    let mut worst = (value - model.b()).abs();
    for g in model.grouping().groups() {
        let w = |k: usize, s: usize| {
            let u = &model.utilities()[k];
            probs[s] * u.marginal(model.positions()[k][s] + allocation.y[k][s])
        };
        let level_grad: f64 = (0..probs.len()).map(|s| w(g[0], s)).sum();
        worst = worst.max((1.0 - mu * level_grad).abs());
        for &k in &g[1..] {
            for s in 0..probs.len() {
                worst = worst.max(mu * (w(k, s) - w(g[0], s)).abs());
            }
        }
    }
    worst
}

/// Outcome of [`check_conjugacy`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugacyReport {
    pub rho: f64,
    /// `pi_{rho}(X)`
    pub pi: f64,
    /// `|pi - B|`
    pub gap: f64,
    /// Sup-norm distance between the two optimizers.
    pub optimizer_distance: f64,
    pub pass: bool,
}

/// Solves `rho(X)` and then `pi_{rho(X)}(X)` from a fresh start; the value
/// must return to `B` and the optimizers must coincide.
pub fn check_conjugacy(model: &Model) -> Result<ConjugacyReport> {
    let primal = primal_solve(model)?;
    let pi = max_utility(model, primal.rho)?;
    let gap = (pi.value - model.b()).abs();
    let optimizer_distance = primal
        .allocation
        .y
        .iter()
        .zip(&pi.allocation.y)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    Ok(ConjugacyReport {
        rho: primal.rho,
        pi: pi.value,
        gap,
        optimizer_distance,
        pass: gap <= 1e-6 && optimizer_distance <= 1e-5,
    })
}

/// Report from the primal oracle. The dual densities are read off the
/// normalized marginal utilities of each group's members at the optimum.
pub fn primal_report(model: &Model) -> Result<RiskReport> {
    let sol = primal_solve(model)?;
    let probs = model.probs();
    let y = &sol.allocation.y;
    let mut rows = Vec::with_capacity(model.n_groups());
    for g in model.grouping().groups() {
        let raw: Vec<f64> = (0..probs.len())
            .map(|s| {
                g.iter()
                    .map(|&k| model.utilities()[k].marginal(model.positions()[k][s] + y[k][s]))
                    .sum::<f64>()
                    / g.len() as f64
            })
            .collect();
        let mass: f64 = raw.iter().zip(probs).map(|(r, p)| r * p).sum();
        rows.push(raw.iter().map(|r| r / mass).collect());
    }
    let q = DensityVector::from_rows_unchecked(rows);
    let lambda = sol.marginal;
    let mut penalty = 0.0;
    for (n, u) in model.utilities().iter().enumerate() {
        let xi = q.row(model.grouping().group_of(n));
        for s in 0..probs.len() {
            penalty += probs[s] * xi[s] * u.conjugate_slope(lambda * xi[s])?;
        }
    }
    Ok(RiskReport::assemble(
        model,
        "primal",
        sol.rho,
        &sol.allocation,
        &q,
        penalty,
        lambda,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_abs_diff_eq;

    const LN_COSH_1: f64 = 0.4337808304830271;

    #[test]
    fn fix_a() {
        let sol = primal_solve(&fixtures::fix_a()).unwrap();
        assert_abs_diff_eq!(sol.rho, LN_COSH_1, epsilon = 1e-12);
        for v in &sol.allocation.y[0] {
            assert_abs_diff_eq!(*v, LN_COSH_1, epsilon = 1e-12);
        }
        assert!(sol.kkt_residual <= KKT_TOL);
    }

    #[test]
    fn fix_b_hedge() {
        let sol = primal_solve(&fixtures::fix_b()).unwrap();
        assert_abs_diff_eq!(sol.rho, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.allocation.y[0][0], -1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.allocation.y[0][1], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.allocation.y[1][0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.allocation.y[1][1], -1.0, epsilon = 1e-10);
    }

    #[test]
    fn fix_c_matches_closed_form() {
        let m = fixtures::fix_c();
        let sol = primal_solve(&m).unwrap();
        let cf = crate::exponential::risk_report(&m).unwrap();
        assert_abs_diff_eq!(sol.rho, cf.rho, epsilon = 1e-6);
        assert!(sol.feasibility_residual.abs() <= 1e-8);
    }

    #[test]
    fn max_utility_cases() {
        let m = fixtures::fix_a();
        assert_abs_diff_eq!(max_utility(&m, LN_COSH_1).unwrap().value, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(max_utility(&m, 0.0).unwrap().value, -1.5430806348152437, epsilon = 1e-12);
        assert_abs_diff_eq!(max_utility(&fixtures::fix_b(), 0.0).unwrap().value, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn conjugacy_on_fixtures() {
        for m in [fixtures::fix_a(), fixtures::fix_b(), fixtures::fix_c()] {
            let r = check_conjugacy(&m).unwrap();
            assert!(r.pass, "{r:?}");
        }
        let r = check_conjugacy(&fixtures::fix_b()).unwrap();
        assert_abs_diff_eq!(r.pi, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn general_utilities_through_primal() {
        let m = fixtures::as_general(&fixtures::fix_c());
        let sol = primal_solve(&m).unwrap();
        let cf = crate::exponential::risk_report(&fixtures::fix_c()).unwrap();
        assert_abs_diff_eq!(sol.rho, cf.rho, epsilon = 1e-9);
    }

    #[test]
    fn report_residuals_small() {
        let r = primal_report(&fixtures::fix_c()).unwrap();
        assert!(r.residuals.max() <= 1e-9, "{:?}", r.residuals);
    }
}
