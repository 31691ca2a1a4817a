//! Problem data: scenario space, positions, grouping, utilities and the
//! validated [`Model`], plus the dual and allocation value types.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::utility::Utility;

/// Tolerance on `sum p_s = 1`.
pub const PROB_SUM_TOL: f64 = 1e-12;
/// Tolerance on `E[xi] = 1` for a density.
pub const DENSITY_NORM_TOL: f64 = 1e-10;
/// Relative tolerance for the clearing condition of an allocation.
pub const CLEARING_TOL: f64 = 1e-12;

/// Probe points used to sample the monotonicity of general utilities.
pub const DEFAULT_PROBES: [f64; 9] = [-50.0, -20.0, -5.0, -1.0, 0.0, 1.0, 5.0, 20.0, 50.0];

/// Finite probability space with strictly positive weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpace {
    probabilities: Vec<f64>,
}

impl ScenarioSpace {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::BadProbability("no scenarios".into()));
        }
        if let Some((s, p)) = probabilities
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p > 0.0))
        {
            return Err(Error::BadProbability(format!("weight {p} of scenario {s} is not positive")));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::BadProbability(format!("weights sum to {total}")));
        }
        Ok(Self { probabilities })
    }

    pub fn uniform(len: usize) -> Result<Self> {
        Self::new(vec![1.0 / len as f64; len])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }
}

/// Partition of the bank indices `0..N` into non-empty groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping {
    groups: Vec<Vec<usize>>,
    owner: Vec<usize>,
}

impl Grouping {
    pub fn new(groups: Vec<Vec<usize>>, n_banks: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::NonPartition("no groups".into()));
        }
        let mut owner = vec![usize::MAX; n_banks];
        for (m, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::NonPartition(format!("group {m} is empty")));
            }
            for &k in g {
                if k >= n_banks {
                    return Err(Error::NonPartition(format!("bank {k} out of range")));
                }
                if owner[k] != usize::MAX {
                    return Err(Error::NonPartition(format!("bank {k} is in more than one group")));
                }
                owner[k] = m;
            }
        }
        if let Some(k) = owner.iter().position(|&m| m == usize::MAX) {
            return Err(Error::NonPartition(format!("bank {k} is in no group")));
        }
        Ok(Self { groups, owner })
    }

    /// Every bank in its own group: deterministic allocations.
    pub fn singletons(n_banks: usize) -> Self {
        Self::new((0..n_banks).map(|k| vec![k]).collect(), n_banks).expect("singletons partition")
    }

    /// One group with every bank: fully mutualized allocations.
    pub fn single(n_banks: usize) -> Self {
        Self::new(vec![(0..n_banks).collect()], n_banks).expect("single-group partition")
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn n_banks(&self) -> usize {
        self.owner.len()
    }

    /// Index of the group containing `bank`.
    pub fn group_of(&self, bank: usize) -> usize {
        self.owner[bank]
    }

    /// Every group of `self` is contained in some group of `coarser`.
    pub fn refines(&self, coarser: &Grouping) -> bool {
        self.n_banks() == coarser.n_banks()
            && self
                .groups
                .iter()
                .all(|g| g.iter().all(|&k| coarser.group_of(k) == coarser.group_of(g[0])))
    }
}

/// Options for [`validate_model_with`].
#[derive(Debug, Clone)]
pub struct ValidationOptions {
    pub probes: Vec<f64>,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            probes: DEFAULT_PROBES.to_vec(),
        }
    }
}

/// A validated problem instance.
#[derive(Debug, Clone)]
pub struct Model {
    space: ScenarioSpace,
    positions: Vec<Vec<f64>>,
    grouping: Grouping,
    utilities: Vec<Utility>,
    b: f64,
}

/// Validates raw inputs with the default probe points.
pub fn validate_model(
    space: ScenarioSpace,
    positions: Vec<Vec<f64>>,
    grouping: Grouping,
    utilities: Vec<Utility>,
    b: f64,
) -> Result<Model> {
    validate_model_with(space, positions, grouping, utilities, b, &ValidationOptions::default())
}

pub fn validate_model_with(
    space: ScenarioSpace,
    positions: Vec<Vec<f64>>,
    grouping: Grouping,
    utilities: Vec<Utility>,
    b: f64,
    options: &ValidationOptions,
) -> Result<Model> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::DimensionMismatch { expected: 1, got: 0 });
    }
    for (bank, row) in positions.iter().enumerate() {
        if row.len() != space.len() {
            return Err(Error::DimensionMismatch {
                expected: space.len(),
                got: row.len(),
            });
        }
        if let Some(scenario) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinitePosition { bank, scenario });
        }
    }
    if grouping.n_banks() != n {
        return Err(Error::NonPartition(format!(
            "grouping covers {} banks, positions have {n}",
            grouping.n_banks()
        )));
    }
    if utilities.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: utilities.len(),
        });
    }
    for (bank, u) in utilities.iter().enumerate() {
        u.check(&options.probes)
            .map_err(|reason| Error::BadUtility { bank, reason })?;
    }
    let sup: f64 = utilities.iter().map(Utility::supremum).sum();
    if !b.is_finite() || b >= sup {
        return Err(Error::InfeasibleB { b, sup });
    }
    Ok(Model {
        space,
        positions,
        grouping,
        utilities,
        b,
    })
}

impl Model {
    pub fn space(&self) -> &ScenarioSpace {
        &self.space
    }

    pub fn probs(&self) -> &[f64] {
        self.space.probs()
    }

    pub fn positions(&self) -> &[Vec<f64>] {
        &self.positions
    }

    pub fn grouping(&self) -> &Grouping {
        &self.grouping
    }

    pub fn utilities(&self) -> &[Utility] {
        &self.utilities
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn n_banks(&self) -> usize {
        self.positions.len()
    }

    pub fn n_scenarios(&self) -> usize {
        self.space.len()
    }

    pub fn n_groups(&self) -> usize {
        self.grouping.len()
    }

    /// Per-bank risk aversions, if every utility is a closed-form exponential.
    pub fn alphas(&self) -> Option<Vec<f64>> {
        self.utilities.iter().map(Utility::alpha).collect()
    }

    /// `X_bar_m(s) = sum_{k in I_m} X^k(s)`.
    pub fn group_sum(&self, m: usize) -> Vec<f64> {
        sum_rows(&self.positions, &self.grouping.groups()[m], self.n_scenarios())
    }

    /// Same model with different positions.
    pub fn with_positions(&self, positions: Vec<Vec<f64>>) -> Result<Model> {
        validate_model(
            self.space.clone(),
            positions,
            self.grouping.clone(),
            self.utilities.clone(),
            self.b,
        )
    }

    /// Same model with a different grouping.
    pub fn with_grouping(&self, grouping: Grouping) -> Result<Model> {
        validate_model(
            self.space.clone(),
            self.positions.clone(),
            grouping,
            self.utilities.clone(),
            self.b,
        )
    }

    /// Same model with different utilities.
    pub fn with_utilities(&self, utilities: Vec<Utility>) -> Result<Model> {
        validate_model(
            self.space.clone(),
            self.positions.clone(),
            self.grouping.clone(),
            utilities,
            self.b,
        )
    }

    /// `E[sum_n u_n(X^n + Y^n)]` for an arbitrary `N x S` matrix `y`.
    pub fn expected_utility(&self, y: &[Vec<f64>]) -> f64 {
        let p = self.probs();
        self.utilities
            .iter()
            .zip(&self.positions)
            .zip(y)
            .map(|((u, x), yn)| {
                (0..p.len())
                    .map(|s| p[s] * u.value(x[s] + yn[s]))
                    .sum::<f64>()
            })
            .sum()
    }
}

pub(crate) fn sum_rows(rows: &[Vec<f64>], members: &[usize], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for &k in members {
        for (o, v) in out.iter_mut().zip(&rows[k]) {
            *o += v;
        }
    }
    out
}

/// One density `dQ^m/dP` per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityVector {
    densities: Vec<Vec<f64>>,
}

impl DensityVector {
    /// Checks non-negativity and `E[xi_m] = 1` for every group.
    pub fn new(space: &ScenarioSpace, densities: Vec<Vec<f64>>) -> Result<Self> {
        for (m, row) in densities.iter().enumerate() {
            if row.len() != space.len() {
                return Err(Error::DimensionMismatch {
                    expected: space.len(),
                    got: row.len(),
                });
            }
            let mass: f64 = row.iter().zip(space.probs()).map(|(x, p)| x * p).sum();
            if row.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (mass - 1.0).abs() > DENSITY_NORM_TOL {
                return Err(Error::NonNormalizedQ { group: m, mass });
            }
        }
        Ok(Self { densities })
    }

    /// `Q^m = P` for every group.
    pub fn physical(n_groups: usize, n_scenarios: usize) -> Self {
        Self {
            densities: vec![vec![1.0; n_scenarios]; n_groups],
        }
    }

    pub(crate) fn from_rows_unchecked(densities: Vec<Vec<f64>>) -> Self {
        Self { densities }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.densities
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.densities[m]
    }

    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    /// Scenario masses `p_s xi_m(s)` of group `m`.
    pub fn masses(&self, space: &ScenarioSpace, m: usize) -> Vec<f64> {
        self.densities[m].iter().zip(space.probs()).map(|(x, p)| x * p).collect()
    }
}

/// Scenario-dependent allocation `Y` whose group sums are the deterministic
/// levels `d_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub y: Vec<Vec<f64>>,
    pub levels: Vec<f64>,
}

impl Allocation {
    /// Builds an allocation from an `N x S` matrix, taking the levels from the
    /// first scenario and rejecting matrices that violate clearing.
    pub fn from_matrix(grouping: &Grouping, y: Vec<Vec<f64>>) -> Result<Self> {
        let s_len = y.first().map_or(0, Vec::len);
        let levels: Vec<f64> = grouping
            .groups()
            .iter()
            .map(|g| g.iter().map(|&k| y[k][0]).sum())
            .collect();
        let a = Self { y, levels };
        for (m, g) in grouping.groups().iter().enumerate() {
            let sums = sum_rows(&a.y, g, s_len);
            if let Some(s) = sums
                .iter()
                .position(|v| (v - a.levels[m]).abs() > CLEARING_TOL * (1.0 + a.levels[m].abs()))
            {
                return Err(Error::NotInC { group: m, scenario: s });
            }
        }
        Ok(a)
    }

    /// `max_{m,s} |sum_{k in I_m} Y^k(s) - d_m| / (1 + |d_m|)`.
    pub fn clearing_residual(&self, grouping: &Grouping) -> f64 {
        let s_len = self.y.first().map_or(0, Vec::len);
        grouping
            .groups()
            .iter()
            .zip(&self.levels)
            .flat_map(|(g, d)| {
                sum_rows(&self.y, g, s_len)
                    .into_iter()
                    .map(move |v| (v - d).abs() / (1.0 + d.abs()))
            })
            .fold(0.0, f64::max)
    }

    pub fn total(&self) -> f64 {
        self.levels.iter().sum()
    }
}
