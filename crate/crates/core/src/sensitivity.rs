//! Cash additivity, marginal risk contributions and group-splitting
//! comparisons.
//!
//! The analytic sensitivities are the exponential-case covariance formulas
//! for a perturbation `X + eps V`, evaluated at the optimal dual densities
//! `Q_X`. Each one is paired with a central finite difference of the
//! closed-form quantities at `X +- eps V`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponential::{self, ExponentialDerived};
use crate::model::{sum_rows, Allocation, Grouping, Model};
use crate::primal;
use crate::prob::{cov_q, expect_q};

/// Default finite-difference step.
pub const FD_EPS: f64 = 1e-4;

/// Floor of the denominator in relative finite-difference mismatches.
pub const REL_FLOOR: f64 = 1e-6;

/// Perturbation direction `V` with its group sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    v: Vec<Vec<f64>>,
    vbar: Vec<Vec<f64>>,
}

impl Direction {
    pub fn new(model: &Model, v: Vec<Vec<f64>>) -> Result<Self> {
        if v.len() != model.n_banks() {
            return Err(Error::DimensionMismatch {
                expected: model.n_banks(),
                got: v.len(),
            });
        }
        for row in &v {
            if row.len() != model.n_scenarios() {
                return Err(Error::DimensionMismatch {
                    expected: model.n_scenarios(),
                    got: row.len(),
                });
            }
        }
        if let Some((bank, scenario)) = v
            .iter()
            .enumerate()
            .find_map(|(n, row)| row.iter().position(|x| !x.is_finite()).map(|s| (n, s)))
        {
            return Err(Error::NonFinitePosition { bank, scenario });
        }
        let vbar = model
            .grouping()
            .groups()
            .iter()
            .map(|g| sum_rows(&v, g, model.n_scenarios()))
            .collect();
        Ok(Self { v, vbar })
    }

    pub fn v(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn vbar(&self) -> &[Vec<f64>] {
        &self.vbar
    }

    /// `X + eps V`
    fn shifted(&self, model: &Model, eps: f64) -> Result<Model> {
        let x = model
            .positions()
            .iter()
            .zip(&self.v)
            .map(|(x, v)| x.iter().zip(v).map(|(a, b)| a + eps * b).collect())
            .collect();
        model.with_positions(x)
    }
}

/// Systemic risk with the cheapest engine available: closed form for
/// exponential utilities, the primal oracle otherwise. Returns `(rho, levels)`.
fn solve_levels(model: &Model) -> Result<(f64, Vec<f64>)> {
    if model.alphas().is_some() {
        let d = exponential::group_levels(model)?;
        Ok((d.iter().sum(), d))
    } else {
        let sol = primal::primal_solve(model)?;
        Ok((sol.rho, sol.allocation.levels))
    }
}

/// Outcome of [`cash_shift_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct CashShiftReport {
    pub rho: f64,
    /// `rho(X + Z)`
    pub rho_shifted: f64,
    /// `rho(X) - sum_m d_m(Z)`
    pub predicted: f64,
    /// `|rho_shifted - predicted| / (1 + |rho|)`
    pub residual: f64,
    /// Central difference of `eps -> rho(X + eps Z)` at zero.
    pub directional_fd: f64,
    /// `-sum_m d_m(Z)`
    pub directional: f64,
}

/// Relative tolerance of the cash-additivity identity.
pub const CASH_TOL: f64 = 1e-10;

impl CashShiftReport {
    pub fn holds(&self) -> bool {
        self.residual <= CASH_TOL
    }
}

/// Checks `rho(X + Z) = rho(X) - sum_m d_m(Z)` for a shift `Z` in the
/// allocation family, and the matching directional derivative.
pub fn cash_shift_check(model: &Model, z: &[Vec<f64>]) -> Result<CashShiftReport> {
    if z.len() != model.n_banks() || z.iter().any(|r| r.len() != model.n_scenarios()) {
        return Err(Error::DimensionMismatch {
            expected: model.n_banks(),
            got: z.len(),
        });
    }
    let shift = Allocation::from_matrix(model.grouping(), z.to_vec())?;
    let dir = Direction::new(model, z.to_vec())?;
    let (rho, _) = solve_levels(model)?;
    let (rho_shifted, _) = solve_levels(&dir.shifted(model, 1.0)?)?;
    let predicted = rho - shift.total();
    let (up, _) = solve_levels(&dir.shifted(model, FD_EPS)?)?;
    let (down, _) = solve_levels(&dir.shifted(model, -FD_EPS)?)?;
    Ok(CashShiftReport {
        rho,
        rho_shifted,
        predicted,
        residual: (rho_shifted - predicted).abs() / (1.0 + rho.abs()),
        directional_fd: (up - down) / (2.0 * FD_EPS),
        directional: -shift.total(),
    })
}

/// Group and total marginal risk contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalContribution {
    /// `E_{Q^m}[-V_bar_m]`; `None` for non-exponential utilities.
    pub group_analytic: Option<Vec<f64>>,
    pub total_analytic: Option<f64>,
    /// Central differences of `d_m(X + eps V)` and of `rho`.
    pub group_fd: Vec<f64>,
    pub total_fd: f64,
}

impl MarginalContribution {
    /// Largest relative analytic-vs-FD mismatch, if the analytic path ran.
    pub fn max_rel_mismatch(&self) -> Option<f64> {
        let groups = self.group_analytic.as_ref()?;
        let total = self.total_analytic?;
        Some(
            groups
                .iter()
                .zip(&self.group_fd)
                .map(|(a, f)| rel_mismatch(*a, *f))
                .fold(rel_mismatch(total, self.total_fd), f64::max),
        )
    }
}

/// `|a - f| / max(|a|, REL_FLOOR)`
pub fn rel_mismatch(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(REL_FLOOR)
}

pub fn marginal_contribution(model: &Model, dir: &Direction, eps: f64) -> Result<MarginalContribution> {
    let (group_analytic, total_analytic) = if model.alphas().is_some() {
        let q = exponential::dual_density(model)?;
        let mut groups = Vec::with_capacity(model.n_groups());
        for (m, vbar) in dir.vbar.iter().enumerate() {
            groups.push(-expect_q(model.space(), q.row(m), vbar)?);
        }
        let total = groups.iter().sum();
        (Some(groups), Some(total))
    } else {
        (None, None)
    };
    let (_, up) = solve_levels(&dir.shifted(model, eps)?)?;
    let (_, down) = solve_levels(&dir.shifted(model, -eps)?)?;
    let group_fd: Vec<f64> = up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * eps)).collect();
    let total_fd = (up.iter().sum::<f64>() - down.iter().sum::<f64>()) / (2.0 * eps);
    Ok(MarginalContribution {
        group_analytic,
        total_analytic,
        group_fd,
        total_fd,
    })
}

/// One analytic sensitivity and its finite-difference counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdCheck {
    pub name: String,
    pub analytic: f64,
    pub fd: f64,
    pub abs_mismatch: f64,
}

impl FdCheck {
    fn new(name: String, analytic: f64, fd: f64) -> Self {
        Self {
            name,
            analytic,
            fd,
            abs_mismatch: (analytic - fd).abs(),
        }
    }

    pub fn rel_mismatch(&self) -> f64 {
        rel_mismatch(self.analytic, self.fd)
    }
}

/// All exponential-case sensitivities along one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    /// `d/deps d_m = E_{Q^m}[-V_bar_m]`
    pub group_marginals: Vec<f64>,
    /// `d/deps rho = sum_m E_{Q^m}[-V_bar_m]`
    pub total_marginal: f64,
    /// `d/deps E_{Q_X^m}[Y^n_{X+eps V}] = E_{Q^m}[-V^n]`
    pub local_causal: Vec<f64>,
    /// `d/deps E_{Q^m_{X+eps V}}[X^n] = -(1/beta_m) COV_{Q^m}[V_bar_m, X^n]`
    pub density_marginals: Vec<f64>,
    /// `d/deps E_{Q^m_{X+eps V}}[Y^n_{X+eps V}]`
    pub allocation_marginals: Vec<f64>,
    /// `d/deps alpha_B(Q_{X+eps V}) = sum_m (1/beta_m) COV_{Q^m}[V_bar_m, X_bar_m]`
    pub penalty_marginal: f64,
    /// Analytic value, central difference and mismatch for every entry above.
    pub fd_residuals: Vec<FdCheck>,
}

impl SensitivityReport {
    pub fn max_rel_mismatch(&self) -> f64 {
        self.fd_residuals.iter().map(FdCheck::rel_mismatch).fold(0.0, f64::max)
    }
}

/// Closed-form quantities whose derivatives are checked by finite differences.
struct Snapshot {
    levels: Vec<f64>,
    allocation: Vec<Vec<f64>>,
    q: crate::model::DensityVector,
}

fn snapshot(model: &Model) -> Result<Snapshot> {
    let levels = exponential::group_levels(model)?;
    let allocation = exponential::optimal_allocation(model, &levels)?.y;
    let q = exponential::dual_density(model)?;
    Ok(Snapshot { levels, allocation, q })
}

/// Analytic sensitivities at `Q_X` with central differences at step `eps`.
pub fn allocation_sensitivities(model: &Model, dir: &Direction, eps: f64) -> Result<SensitivityReport> {
    let der = ExponentialDerived::new(model)?;
    let space = model.space();
    let grouping = model.grouping();
    let base = snapshot(model)?;
    let q = &base.q;

    let mut group_marginals = Vec::with_capacity(model.n_groups());
    for (m, vbar) in dir.vbar.iter().enumerate() {
        group_marginals.push(-expect_q(space, q.row(m), vbar)?);
    }
    let total_marginal = group_marginals.iter().sum();

    let (mut local_causal, mut density_marginals, mut allocation_marginals) = (vec![], vec![], vec![]);
    for n in 0..model.n_banks() {
        let m = grouping.group_of(n);
        let xi = q.row(m);
        let local = -expect_q(space, xi, &dir.v[n])?;
        let cov_vx = cov_q(space, xi, &dir.vbar[m], &model.positions()[n])?;
        let cov_vxbar = cov_q(space, xi, &dir.vbar[m], &der.xbar[m])?;
        local_causal.push(local);
        density_marginals.push(-cov_vx / der.beta_m[m]);
        allocation_marginals
            .push(local + cov_vx / der.beta_m[m] - cov_vxbar / (der.alphas[n] * der.beta_m[m].powi(2)));
    }
    let mut penalty_marginal = 0.0;
    for m in 0..model.n_groups() {
        penalty_marginal += cov_q(space, q.row(m), &dir.vbar[m], &der.xbar[m])? / der.beta_m[m];
    }

    let up = snapshot(&dir.shifted(model, eps)?)?;
    let down = snapshot(&dir.shifted(model, -eps)?)?;
    let cd = |a: f64, b: f64| (a - b) / (2.0 * eps);
    let mut fd = Vec::new();
    for m in 0..model.n_groups() {
        fd.push(FdCheck::new(
            format!("item1_group{}", m + 1),
            group_marginals[m],
            cd(up.levels[m], down.levels[m]),
        ));
    }
    for n in 0..model.n_banks() {
        let xi = q.row(grouping.group_of(n));
        fd.push(FdCheck::new(
            format!("item2_bank{}", n + 1),
            local_causal[n],
            cd(
                expect_q(space, xi, &up.allocation[n])?,
                expect_q(space, xi, &down.allocation[n])?,
            ),
        ));
    }
    for n in 0..model.n_banks() {
        let m = grouping.group_of(n);
        let x = &model.positions()[n];
        fd.push(FdCheck::new(
            format!("item3_Z=X{}", n + 1),
            density_marginals[n],
            cd(expect_q(space, up.q.row(m), x)?, expect_q(space, down.q.row(m), x)?),
        ));
    }
    for n in 0..model.n_banks() {
        let m = grouping.group_of(n);
        fd.push(FdCheck::new(
            format!("item4_bank{}", n + 1),
            allocation_marginals[n],
            cd(
                expect_q(space, up.q.row(m), &up.allocation[n])?,
                expect_q(space, down.q.row(m), &down.allocation[n])?,
            ),
        ));
    }
    fd.push(FdCheck::new(
        "item5_penalty".into(),
        penalty_marginal,
        cd(
            exponential::penalty_exponential(model, &up.q)?,
            exponential::penalty_exponential(model, &down.q)?,
        ),
    ));
    fd.push(FdCheck::new(
        "item6_total".into(),
        total_marginal,
        cd(up.levels.iter().sum(), down.levels.iter().sum()),
    ));

    Ok(SensitivityReport {
        group_marginals,
        total_marginal,
        local_causal,
        density_marginals,
        allocation_marginals,
        penalty_marginal,
        fd_residuals: fd,
    })
}

/// Both sides of the group-splitting inequality
/// `E_{Q^m}[sum_{i in I'} Y^i] <= d'_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub group: usize,
    pub subgroup: Vec<usize>,
    /// `E_{Q^m}[sum_{i in I'} Y^i]` under the original grouping.
    pub lhs: f64,
    /// Level of the split-off subgroup under the refined grouping.
    pub rhs: f64,
}

/// Slack below which the splitting inequality counts as violated.
pub const SPLIT_SLACK: f64 = -1e-9;

impl SplitReport {
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }

    pub fn holds(&self) -> bool {
        self.slack() >= SPLIT_SLACK
    }
}

/// Splits `subgroup` (0-based bank indices) off group `group`. A subgroup
/// equal to the whole group is the identity refinement.
pub fn split_compare(model: &Model, group: usize, subgroup: &[usize]) -> Result<SplitReport> {
    let groups = model.grouping().groups();
    let members = groups
        .get(group)
        .ok_or_else(|| Error::BadSubgroup(format!("no group {group}")))?;
    if subgroup.is_empty() {
        return Err(Error::BadSubgroup("subgroup is empty".into()));
    }
    let mut sorted = subgroup.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != subgroup.len() {
        return Err(Error::BadSubgroup("repeated bank in subgroup".into()));
    }
    if let Some(k) = subgroup.iter().find(|k| !members.contains(k)) {
        return Err(Error::BadSubgroup(format!("bank {k} is not in group {group}")));
    }

    let q = exponential::dual_density(model)?;
    let levels = exponential::group_levels(model)?;
    let y = exponential::optimal_allocation(model, &levels)?.y;
    let part = sum_rows(&y, subgroup, model.n_scenarios());
    let lhs = expect_q(model.space(), q.row(group), &part)?;

    let rhs = if subgroup.len() == members.len() {
        levels[group]
    } else {
        let rest: Vec<usize> = members.iter().copied().filter(|k| !subgroup.contains(k)).collect();
        let mut refined: Vec<Vec<usize>> = groups.to_vec();
        refined[group] = subgroup.to_vec();
        refined.push(rest);
        let refined = model.with_grouping(Grouping::new(refined, model.n_banks())?)?;
        exponential::group_levels(&refined)?[group]
    };
    Ok(SplitReport {
        group,
        subgroup: subgroup.to_vec(),
        lhs,
        rhs,
    })
}

/// Splits every bank off its group in turn.
pub fn singleton_sweep(model: &Model) -> Result<Vec<SplitReport>> {
    (0..model.n_banks())
        .map(|n| split_compare(model, model.grouping().group_of(n), &[n]))
        .collect()
}

/// Per-bank `(E_{Q_X}[Y^n], (Y*)^n)`: risk allocation under one mutualized
/// group against the deterministic allocation under singleton groups.
pub fn deterministic_comparison(model: &Model) -> Result<Vec<(f64, f64)>> {
    let pooled = model.with_grouping(Grouping::single(model.n_banks()))?;
    let det = model.with_grouping(Grouping::singletons(model.n_banks()))?;
    let shares = exponential::risk_report(&pooled)?.risk_allocations;
    let fixed = exponential::group_levels(&det)?;
    Ok(shares.into_iter().zip(fixed).collect())
}
