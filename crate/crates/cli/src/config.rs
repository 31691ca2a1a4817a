use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sysrisk::{ExponentialMixture, OpaqueExponential, Utility};

use crate::CliError;

/// Run configuration read from JSON. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub utilities: Vec<UtilitySpec>,
    /// Groups of 1-based bank indices.
    pub grouping: Vec<Vec<usize>>,
    #[serde(rename = "B")]
    pub b: f64,
    pub method: Method,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Report destination when `--out` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// A bare number is an exponential risk aversion; an object tagged
/// `general` is handed to the engines only through its marginal utility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UtilitySpec {
    Exponential(f64),
    General { general: GeneralUtility },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneralUtility {
    Exponential { alpha: f64 },
    Mixture { weights: Vec<f64>, rates: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ClosedForm,
    Dual,
    Primal,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// First-order residual of the multiplier, relative to `1 + |B|`.
    pub lambda_tol: f64,
    /// Dual-ascent stationarity certificate, relative to `1 + |rho|`.
    pub ascent_tol: f64,
    /// Finite-difference step of the sensitivity table.
    pub fd_eps: f64,
    /// Budget and full-allocation residuals; duality gap relative to `1 + |rho|`.
    pub residual_tol: f64,
    pub clearing_tol: f64,
    /// Largest pairwise engine disagreement, relative to `1 + |rho|`.
    pub cross_engine_tol: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            lambda_tol: 1e-8,
            ascent_tol: 1e-6,
            fd_eps: 1e-4,
            residual_tol: 1e-8,
            clearing_tol: 1e-12,
            cross_engine_tol: 1e-4,
        }
    }
}

impl Tolerances {
    fn check(&self) -> Result<(), CliError> {
        let named = [
            ("lambda_tol", self.lambda_tol),
            ("ascent_tol", self.ascent_tol),
            ("fd_eps", self.fd_eps),
            ("residual_tol", self.residual_tol),
            ("clearing_tol", self.clearing_tol),
            ("cross_engine_tol", self.cross_engine_tol),
        ];
        match named.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            Some((name, v)) => Err(CliError::Config(format!("tolerance {name} must be positive, got {v}"))),
            None => Ok(()),
        }
    }
}

impl UtilitySpec {
    pub fn to_utility(&self) -> Result<Utility, CliError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match self {
            UtilitySpec::Exponential(a) if positive(*a) => Ok(Utility::exponential(*a)),
            UtilitySpec::Exponential(a) => Err(CliError::Config(format!("risk aversion must be positive, got {a}"))),
            UtilitySpec::General {
                general: GeneralUtility::Exponential { alpha },
            } if positive(*alpha) => Ok(Utility::general(OpaqueExponential { alpha: *alpha })),
            UtilitySpec::General {
                general: GeneralUtility::Mixture { weights, rates },
            } if !weights.is_empty()
                && weights.len() == rates.len()
                && weights.iter().chain(rates).all(|&v| positive(v)) =>
            {
                Ok(Utility::general(ExponentialMixture::new(weights.clone(), rates.clone())))
            }
            UtilitySpec::General { general } => Err(CliError::Config(format!("invalid general utility {general:?}"))),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.tolerances.check()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Grouping with 0-based indices.
    pub fn zero_based_groups(&self) -> Result<Vec<Vec<usize>>, CliError> {
        self.grouping
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&k| {
                        k.checked_sub(1)
                            .ok_or_else(|| CliError::Config("bank indices are 1-based".into()))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn utilities(&self) -> Result<Vec<Utility>, CliError> {
        self.utilities.iter().map(UtilitySpec::to_utility).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_config() {
        let c = RunConfig::from_json(r#"{"utilities":[1.0],"grouping":[[1]],"B":-1,"method":"closed-form"}"#).unwrap();
        assert_eq!(c.method, Method::ClosedForm);
        assert_eq!(c.tolerances, Tolerances::default());
        assert_eq!(c.zero_based_groups().unwrap(), vec![vec![0]]);
    }

    #[test]
    fn parses_general_utilities() {
        let c = RunConfig::from_json(
            r#"{"utilities":[{"general":{"exponential":{"alpha":2}}},
                {"general":{"mixture":{"weights":[0.5,0.5],"rates":[1,3]}}}],
                "grouping":[[1,2]],"B":-2,"method":"dual","tolerances":{"ascent_tol":1e-7}}"#,
        )
        .unwrap();
        let u = c.utilities().unwrap();
        assert!(u.iter().all(|u| u.alpha().is_none()));
        assert_eq!(c.tolerances.ascent_tol, 1e-7);
        assert_eq!(c.tolerances.fd_eps, 1e-4);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for bad in [
            r#"{"utilities":[1],"grouping":[[1]],"B":-1,"method":"closed-form","extra":1}"#,
            r#"{"utilities":[1],"grouping":[[1]],"B":-1,"method":"newton"}"#,
            r#"{"utilities":[1],"grouping":[[1]],"B":-1,"method":"all","tolerances":{"fd_eps":0}}"#,
            r#"{"utilities":[1],"grouping":[[1]],"B":-1,"method":"all","tolerances":{"typo":1}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(bad), Err(CliError::Config(_))), "{bad}");
        }
        let c = RunConfig::from_json(r#"{"utilities":[-1],"grouping":[[0]],"B":-1,"method":"all"}"#).unwrap();
        assert!(c.utilities().is_err());
        assert!(c.zero_based_groups().is_err());
    }
}
