//! Assembled risk report shared by all engines.

use serde::{Deserialize, Serialize};

use crate::model::{Allocation, DensityVector, Model};
use crate::prob::expect_q;

/// Diagnostic residuals of a solved instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Residuals {
    /// `|E[sum_n u_n(X^n + Y^n)] - B|`
    pub budget: f64,
    /// `|rho - (sum_m E_{Q^m}[-X_bar_m] - penalty)|`
    pub duality_gap: f64,
    /// Relative clearing violation of the allocation.
    pub clearing: f64,
    /// `|sum_n rho^n - rho|`
    pub full_allocation: f64,
    /// Pairwise engine disagreement, present only when several engines ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_engine: Option<CrossEngine>,
}

impl Residuals {
    /// Largest residual, including engine disagreement when present.
    pub fn max(&self) -> f64 {
        let base = self
            .budget
            .max(self.duality_gap)
            .max(self.clearing)
            .max(self.full_allocation);
        match &self.cross_engine {
            Some(c) => base.max(c.max_pairwise),
            None => base,
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.budget, self.duality_gap, self.clearing, self.full_allocation]
            .iter()
            .all(|v| v.is_finite())
            && self.cross_engine.as_ref().map_or(true, |c| c.max_pairwise.is_finite())
    }
}

/// `rho` from each engine and their largest pairwise difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossEngine {
    pub closed_form: f64,
    pub dual: f64,
    pub primal: f64,
    pub max_pairwise: f64,
}

impl CrossEngine {
    pub fn new(closed_form: f64, dual: f64, primal: f64) -> Self {
        let max_pairwise = (closed_form - dual)
            .abs()
            .max((closed_form - primal).abs())
            .max((dual - primal).abs());
        Self {
            closed_form,
            dual,
            primal,
            max_pairwise,
        }
    }
}

/// Systemic risk, optimal allocation, dual optimizer and per-bank shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskReport {
    pub method: String,
    pub rho: f64,
    pub group_levels: Vec<f64>,
    /// `Y[n][s]`
    pub allocation: Vec<Vec<f64>>,
    /// `dQ^m/dP[m][s]`
    pub dual_densities: Vec<Vec<f64>>,
    /// `rho^n = E_{Q^{m(n)}}[Y^n]`
    pub risk_allocations: Vec<f64>,
    pub penalty: f64,
    pub lambda_star: f64,
    pub residuals: Residuals,
}

impl RiskReport {
    /// Computes per-bank shares and residuals from the engine outputs.
    pub fn assemble(
        model: &Model,
        method: &str,
        rho: f64,
        allocation: &Allocation,
        q: &DensityVector,
        penalty: f64,
        lambda_star: f64,
    ) -> Self {
        let space = model.space();
        let grouping = model.grouping();
        let risk_allocations: Vec<f64> = allocation
            .y
            .iter()
            .enumerate()
            .map(|(n, yn)| {
                expect_q(space, q.row(grouping.group_of(n)), yn).expect("shapes checked by engines")
            })
            .collect();
        let dual_value: f64 = (0..model.n_groups())
            .map(|m| {
                -expect_q(space, q.row(m), &model.group_sum(m)).expect("shapes checked by engines")
            })
            .sum::<f64>()
            - penalty;
        let residuals = Residuals {
            budget: (model.expected_utility(&allocation.y) - model.b()).abs(),
            duality_gap: (rho - dual_value).abs(),
            clearing: allocation.clearing_residual(grouping),
            full_allocation: (risk_allocations.iter().sum::<f64>() - rho).abs(),
            cross_engine: None,
        };
        Self {
            method: method.to_string(),
            rho,
            group_levels: allocation.levels.clone(),
            allocation: allocation.y.clone(),
            dual_densities: q.rows().to_vec(),
            risk_allocations,
            penalty,
            lambda_star,
            residuals,
        }
    }
}
