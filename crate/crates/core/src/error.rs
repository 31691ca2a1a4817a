use thiserror::Error;

/// Errors raised by model validation and the solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("grouping is not a partition of the banks: {0}")]
    NonPartition(String),
    #[error("bad probability vector: {0}")]
    BadProbability(String),
    #[error("bad utility for bank {bank}: {reason}")]
    BadUtility { bank: usize, reason: String },
    #[error("acceptability level B = {b} is not below the utility supremum {sup}")]
    InfeasibleB { b: f64, sup: f64 },
    #[error("position of bank {bank} in scenario {scenario} is not finite")]
    NonFinitePosition { bank: usize, scenario: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("conjugate evaluated at non-positive dual argument {0}")]
    NonPositiveDual(f64),
    #[error("could not invert marginal utility at y = {0}")]
    InversionFailure(f64),
    #[error("operation requires exponential utilities for every bank")]
    NotExponential,
    #[error("no sign change of the first-order condition within the doubling cap")]
    BracketFailure,
    #[error("density of group {group} is not normalized (E[xi] = {mass})")]
    NonNormalizedQ { group: usize, mass: f64 },
    #[error("density of group {group} vanishes on scenario {scenario}")]
    ZeroDensityScenario { group: usize, scenario: usize },
    #[error("{0} did not converge")]
    NoConvergence(&'static str),
    #[error("budget constraint is infeasible")]
    Infeasible,
    #[error("shift is not in the allocation family: group {group}, scenario {scenario}")]
    NotInC { group: usize, scenario: usize },
    #[error("bad subgroup: {0}")]
    BadSubgroup(String),
}

pub type Result<T> = std::result::Result<T, Error>;
