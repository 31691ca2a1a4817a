use sysrisk::dual::{self, AscentOptions};
use sysrisk::sensitivity::{self, Direction, FdCheck, SplitReport};
use sysrisk::{exponential, primal, validate_model, CrossEngine, Grouping, Model, RiskReport};

use crate::config::{Method, RunConfig, Tolerances};
use crate::io::Scenarios;
use crate::CliError;

pub fn build_model(config: &RunConfig, scenarios: &Scenarios) -> Result<Model, CliError> {
    let n = scenarios.positions.len();
    let grouping = Grouping::new(config.zero_based_groups()?, n)?;
    Ok(validate_model(
        scenarios.space.clone(),
        scenarios.positions.clone(),
        grouping,
        config.utilities()?,
        config.b,
    )?)
}

/// One residual compared against its configured tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value.is_finite() && self.value <= self.tol
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RiskReport,
    pub checks: Vec<Check>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

/// Runs the configured engine(s). `method = all` reports the closed form and
/// records the pairwise disagreement of the three engines.
pub fn run(config: &RunConfig, model: &Model) -> Result<RunOutcome, CliError> {
    let tol = &config.tolerances;
    let ascent = AscentOptions {
        tol: tol.ascent_tol,
        ..AscentOptions::default()
    };
    let report = match config.method {
        Method::ClosedForm => exponential::risk_report(model)?,
        Method::Dual => dual::dual_report(model, &ascent)?,
        Method::Primal => primal::primal_report(model)?,
        Method::All => {
            let mut cf = exponential::risk_report(model)?;
            let d = dual::dual_report(model, &ascent)?;
            let p = primal::primal_report(model)?;
            cf.residuals.cross_engine = Some(CrossEngine::new(cf.rho, d.rho, p.rho));
            cf
        }
    };
    let lambda_residual = match config.method {
        Method::Dual | Method::All => {
            let q = sysrisk::DensityVector::new(model.space(), report.dual_densities.clone())?;
            let generic = dual::solve_lambda_star(model, &q)?;
            let mut worst = generic.residual.abs();
            if config.method == Method::All {
                // closed-form multiplier against the generic root
                worst = worst.max((generic.value - report.lambda_star).abs());
            }
            Some(worst)
        }
        _ => None,
    };
    let checks = checks(&report, tol, model.b(), lambda_residual);
    Ok(RunOutcome { report, checks })
}

fn checks(report: &RiskReport, tol: &Tolerances, b: f64, lambda_residual: Option<f64>) -> Vec<Check> {
    let r = &report.residuals;
    let scale = 1.0 + report.rho.abs();
    let mut out = vec![
        Check {
            name: "budget",
            value: r.budget,
            tol: tol.residual_tol,
        },
        Check {
            name: "duality_gap",
            value: r.duality_gap,
            tol: tol.residual_tol * scale,
        },
        Check {
            name: "clearing",
            value: r.clearing,
            tol: tol.clearing_tol,
        },
        Check {
            name: "full_allocation",
            value: r.full_allocation,
            tol: tol.residual_tol,
        },
    ];
    if let Some(c) = &r.cross_engine {
        out.push(Check {
            name: "cross_engine",
            value: c.max_pairwise,
            tol: tol.cross_engine_tol * scale,
        });
    }
    if let Some(v) = lambda_residual {
        out.push(Check {
            name: "lambda_star",
            value: v,
            tol: tol.lambda_tol * (1.0 + b.abs()),
        });
    }
    out
}

/// Relative analytic-vs-FD mismatch above which the sensitivity run fails.
pub const SENSITIVITY_TOL: f64 = 1e-3;

pub fn sensitivity_rows(config: &RunConfig, model: &Model, v: Vec<Vec<f64>>) -> Result<Vec<FdCheck>, CliError> {
    let dir = Direction::new(model, v)?;
    Ok(sensitivity::allocation_sensitivities(model, &dir, config.tolerances.fd_eps)?.fd_residuals)
}

/// `group` and `subgroup` are 1-based.
pub fn split(model: &Model, group: usize, subgroup: &[usize]) -> Result<SplitReport, CliError> {
    let zero = |k: usize| {
        k.checked_sub(1)
            .ok_or_else(|| CliError::Config("bank and group indices are 1-based".into()))
    };
    let sub = subgroup.iter().map(|&k| zero(k)).collect::<Result<Vec<_>, _>>()?;
    Ok(sensitivity::split_compare(model, zero(group)?, &sub)?)
}
