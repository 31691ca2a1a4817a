//! Systemic risk measures with scenario-dependent cash allocations on a
//! finite scenario space.
//!
//! * [`model`], [`prob`], [`utility`]: problem data, expectations under
//!   group densities, utilities and their conjugates.
//! * [`exponential`]: closed-form solution for exponential utilities.
//! * [`dual`]: general-utility dual machinery (multiplier, penalty, dual
//!   ascent, value functions and the fair split).
//! * [`primal`]: brute-force solution of the primal problems, used as an
//!   independent oracle.
//! * [`sensitivity`]: cash additivity, marginal contributions and
//!   group-splitting comparisons.

pub mod dual;
pub mod error;
pub mod exponential;
pub mod fixtures;
pub mod model;
pub mod primal;
pub mod prob;
pub mod report;
pub mod sensitivity;
pub mod utility;

pub use error::{Error, Result};
pub use model::{validate_model, Allocation, DensityVector, Grouping, Model, ScenarioSpace};
pub use report::{CrossEngine, Residuals, RiskReport};
pub use utility::{conjugate_eval, Conjugate, ExponentialMixture, MarginalUtility, OpaqueExponential, Utility};
