#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sysrisk::{validate_model, ExponentialMixture, Grouping, Model, ScenarioSpace, Utility};

pub const LN_COSH_1: f64 = 0.4337808304830271;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Bounds of a random instance.
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    pub max_s: usize,
    pub max_n: usize,
    pub max_h: usize,
    pub x_bound: f64,
    pub alpha: (f64, f64),
    pub b: (f64, f64),
}

impl Default for Shape {
    fn default() -> Self {
        Self {
            max_s: 16,
            max_n: 5,
            max_h: 3,
            x_bound: 5.0,
            alpha: (0.2, 5.0),
            b: (-10.0, -0.1),
        }
    }
}

pub fn random_probs(rng: &mut ChaCha8Rng, s: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..s).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|p| p / total).collect()
}

/// Random partition of `n` banks into exactly `h` non-empty groups.
pub fn random_grouping(rng: &mut ChaCha8Rng, n: usize, h: usize) -> Grouping {
    let mut banks: Vec<usize> = (0..n).collect();
    banks.shuffle(rng);
    let mut groups = vec![Vec::new(); h];
    for (i, &k) in banks.iter().enumerate() {
        let m = if i < h { i } else { rng.gen_range(0..h) };
        groups[m].push(k);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    Grouping::new(groups, n).expect("random partition")
}

pub fn random_positions(rng: &mut ChaCha8Rng, n: usize, s: usize, bound: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..s).map(|_| rng.gen_range(-bound..=bound)).collect())
        .collect()
}

pub fn random_model(rng: &mut ChaCha8Rng, shape: &Shape) -> Model {
    let s = rng.gen_range(2..=shape.max_s);
    let n = rng.gen_range(1..=shape.max_n);
    let h = rng.gen_range(1..=shape.max_h.min(n));
    let alphas: Vec<f64> = (0..n).map(|_| rng.gen_range(shape.alpha.0..=shape.alpha.1)).collect();
    validate_model(
        ScenarioSpace::new(random_probs(rng, s)).unwrap(),
        random_positions(rng, n, s, shape.x_bound),
        random_grouping(rng, n, h),
        alphas.iter().map(|&a| Utility::exponential(a)).collect(),
        rng.gen_range(shape.b.0..=shape.b.1),
    )
    .expect("random model")
}

/// Same instance with two-term exponential-mixture utilities.
pub fn with_mixtures(rng: &mut ChaCha8Rng, model: &Model) -> Model {
    let utilities = (0..model.n_banks())
        .map(|_| {
            let w = rng.gen_range(0.2..0.8);
            Utility::general(ExponentialMixture::new(
                vec![w, 1.0 - w],
                vec![rng.gen_range(0.3..1.0), rng.gen_range(1.0..3.0)],
            ))
        })
        .collect();
    model.with_utilities(utilities).unwrap()
}

/// Random element of the allocation family: arbitrary rows whose group sums
/// are deterministic.
pub fn random_in_c(rng: &mut ChaCha8Rng, model: &Model, bound: f64) -> Vec<Vec<f64>> {
    let s = model.n_scenarios();
    let mut z = random_positions(rng, model.n_banks(), s, bound);
    for g in model.grouping().groups() {
        let level = rng.gen_range(-bound..=bound);
        let (&last, rest) = g.split_last().unwrap();
        for t in 0..s {
            let partial: f64 = rest.iter().map(|&k| z[k][t]).sum();
            z[last][t] = level - partial;
        }
    }
    z
}

pub fn sup_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

pub fn add(a: &[Vec<f64>], b: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + scale * v).collect())
        .collect()
}
