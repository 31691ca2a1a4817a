//! Small reference instances used across the test suites and the examples
//! in the README.

use crate::model::{validate_model, Grouping, Model, ScenarioSpace};
use crate::utility::{OpaqueExponential, Utility};

fn build(probs: Vec<f64>, x: Vec<Vec<f64>>, grouping: Grouping, alphas: &[f64], b: f64) -> Model {
    validate_model(
        ScenarioSpace::new(probs).expect("fixture probabilities"),
        x,
        grouping,
        alphas.iter().map(|&a| Utility::exponential(a)).collect(),
        b,
    )
    .expect("fixture model")
}

/// One bank, `X = (1, -1)` on two equally likely scenarios, `alpha = 1`, `B = -1`.
pub fn fix_a() -> Model {
    build(vec![0.5, 0.5], vec![vec![1.0, -1.0]], Grouping::single(1), &[1.0], -1.0)
}

/// Two perfectly hedged banks in one group, `B = -2`.
pub fn fix_b() -> Model {
    build(
        vec![0.5, 0.5],
        vec![vec![1.0, -1.0], vec![-1.0, 1.0]],
        Grouping::single(2),
        &[1.0, 1.0],
        -2.0,
    )
}

/// [`fix_b`] with deterministic (singleton) groups.
pub fn fix_b_det() -> Model {
    fix_b()
        .with_grouping(Grouping::singletons(2))
        .expect("fixture grouping")
}

/// Three scenarios, two heterogeneous banks in one group.
pub fn fix_c() -> Model {
    build(
        vec![0.2, 0.3, 0.5],
        vec![vec![0.0, 1.0, -1.0], vec![2.0, -1.0, 0.0]],
        Grouping::single(2),
        &[1.0, 2.0],
        -1.5,
    )
}

/// Replaces every closed-form exponential by the same utility supplied
/// through the general interface.
pub fn as_general(model: &Model) -> Model {
    let utilities = model
        .utilities()
        .iter()
        .map(|u| match u.alpha() {
            Some(alpha) => Utility::general(OpaqueExponential { alpha }),
            None => u.clone(),
        })
        .collect();
    model.with_utilities(utilities).expect("same model, general path")
}
