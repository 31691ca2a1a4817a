mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sysrisk::dual;
use sysrisk::prob::{expect, expect_q, relative_entropy};
use sysrisk::sensitivity::{self, Direction};
use sysrisk::{exponential, primal, DensityVector, ExponentialMixture, Grouping, Model, OpaqueExponential, ScenarioSpace, Utility};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig::with_cases(cases)
}

fn random_density(rng: &mut rand_chacha::ChaCha8Rng, model: &Model) -> DensityVector {
    let probs = model.probs();
    let rows = (0..model.n_groups())
        .map(|_| {
            let raw: Vec<f64> = probs.iter().map(|_| rng.gen_range(0.01..3.0)).collect();
            let mass: f64 = raw.iter().zip(probs).map(|(r, p)| r * p).sum();
            raw.iter().map(|r| r / mass).collect()
        })
        .collect();
    DensityVector::new(model.space(), rows).unwrap()
}

fn random_utility(rng: &mut rand_chacha::ChaCha8Rng) -> Utility {
    match rng.gen_range(0..3) {
        0 => Utility::exponential(rng.gen_range(0.2..5.0)),
        1 => Utility::general(OpaqueExponential {
            alpha: rng.gen_range(0.2..5.0),
        }),
        _ => Utility::general(ExponentialMixture::new(
            vec![rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)],
            vec![rng.gen_range(0.2..1.0), rng.gen_range(1.0..5.0)],
        )),
    }
}

fn small_model(seed: u64) -> (rand_chacha::ChaCha8Rng, Model) {
    let mut r = rng(seed);
    let m = random_model(
        &mut r,
        &Shape {
            max_s: 8,
            ..Shape::default()
        },
    );
    (r, m)
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn unit_density_expectation_is_plain_expectation(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = r.gen_range(1..20);
        let space = ScenarioSpace::new(random_probs(&mut r, s)).unwrap();
        let values: Vec<f64> = (0..s).map(|_| r.gen_range(-100.0..100.0)).collect();
        prop_assert_eq!(expect_q(&space, &vec![1.0; s], &values).unwrap(), expect(&space, &values).unwrap());
    }

    #[test]
    fn relative_entropy_is_nonnegative(seed in any::<u64>()) {
        let (mut r, m) = small_model(seed);
        let q = random_density(&mut r, &m);
        for row in q.rows() {
            prop_assert!(relative_entropy(m.space(), row).unwrap() >= 0.0);
        }
    }

    #[test]
    fn conjugate_identity(seed in any::<u64>(), log_y in -6.0f64..6.0) {
        let u = random_utility(&mut rng(seed));
        let y = 10f64.powf(log_y);
        let c = u.conjugate(y).unwrap();
        let lhs = u.value(-c.slope);
        let rhs = c.value - y * c.slope;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn conjugate_slope_is_increasing(seed in any::<u64>(), a in -6.0f64..6.0, b in -6.0f64..6.0) {
        prop_assume!((a - b).abs() > 1e-9);
        let u = random_utility(&mut rng(seed));
        let (lo, hi) = (10f64.powf(a.min(b)), 10f64.powf(a.max(b)));
        prop_assert!(u.conjugate_slope(lo).unwrap() < u.conjugate_slope(hi).unwrap());
    }

    #[test]
    fn general_conjugate_matches_closed_form(alpha in 0.2f64..5.0, log_y in -6.0f64..6.0) {
        let y = 10f64.powf(log_y);
        let closed = Utility::exponential(alpha).conjugate(y).unwrap();
        let general = Utility::general(OpaqueExponential { alpha }).conjugate(y).unwrap();
        prop_assert!((closed.value - general.value).abs() <= 1e-10 * closed.value.abs().max(1.0));
        prop_assert!((closed.slope - general.slope).abs() <= 1e-10 * closed.slope.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn closed_form_report_residuals(seed in any::<u64>()) {
        let m = random_model(&mut rng(seed), &Shape::default());
        let r = exponential::risk_report(&m).unwrap();
        let scale = 1.0 + r.rho.abs();
        prop_assert!(r.residuals.clearing <= 1e-12);
        prop_assert!(r.residuals.budget <= 1e-10 * m.b().abs());
        prop_assert!(r.residuals.duality_gap <= 1e-9 * scale);
        prop_assert!(r.residuals.full_allocation <= 1e-9 * scale);
    }

    #[test]
    fn group_locality(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = random_model(&mut r, &Shape::default());
        let target = r.gen_range(0..m.n_groups());
        let mut x = m.positions().to_vec();
        for (k, row) in x.iter_mut().enumerate() {
            if m.grouping().group_of(k) != target {
                row.iter_mut().for_each(|v| *v += r.gen_range(-3.0..3.0));
            }
        }
        let moved = m.with_positions(x).unwrap();
        let (before, after) = (exponential::risk_report(&m).unwrap(), exponential::risk_report(&moved).unwrap());
        prop_assert_eq!(before.group_levels[target], after.group_levels[target]);
        for &k in &m.grouping().groups()[target] {
            prop_assert_eq!(&before.allocation[k], &after.allocation[k]);
        }
    }

    #[test]
    fn weak_duality(seed in any::<u64>()) {
        let (mut r, m) = small_model(seed);
        let rho: f64 = exponential::group_levels(&m).unwrap().iter().sum();
        for _ in 0..5 {
            let q = random_density(&mut r, &m);
            let penalty = exponential::penalty_exponential(&m, &q).unwrap();
            let value: f64 = (0..m.n_groups())
                .map(|g| -expect_q(m.space(), q.row(g), &m.group_sum(g)).unwrap())
                .sum::<f64>() - penalty;
            prop_assert!(value <= rho + 1e-9);
            prop_assert!(dual::rho_given_q(&m, &q).unwrap().rho_q <= rho + 1e-9);
        }
    }

    #[test]
    fn coarsening_lowers_risk(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = random_model(&mut r, &Shape::default());
        prop_assume!(m.n_groups() >= 2);
        let mut groups = m.grouping().groups().to_vec();
        let j = r.gen_range(1..groups.len());
        let merged = groups.remove(j);
        groups[0].extend(merged);
        let coarse = Grouping::new(groups, m.n_banks()).unwrap();
        prop_assert!(m.grouping().refines(&coarse));
        let fine: f64 = exponential::group_levels(&m).unwrap().iter().sum();
        let merged: f64 = exponential::group_levels(&m.with_grouping(coarse).unwrap()).unwrap().iter().sum();
        prop_assert!(merged <= fine + 1e-9);
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn generic_multiplier_matches_closed_form(seed in any::<u64>()) {
        let (mut r, m) = small_model(seed);
        let g = with_opaque(&m);
        let beta: f64 = m.alphas().unwrap().iter().map(|a| 1.0 / a).sum();
        let q = random_density(&mut r, &m);
        let ls = dual::solve_lambda_star(&g, &q).unwrap();
        prop_assert!((ls.value + m.b() / beta).abs() <= 1e-10, "{} vs {}", ls.value, -m.b() / beta);
    }

    #[test]
    fn dual_identifies_primal_allocation(seed in any::<u64>()) {
        let (_, m) = small_model(seed);
        let sol = dual::maximize_dual(&with_opaque(&m)).unwrap();
        let cf = exponential::risk_report(&m).unwrap();
        prop_assert!(sup_distance(&sol.at_optimum.yhat, &cf.allocation) <= 1e-5);
    }

    #[test]
    fn dual_maximum_dominates_random_densities(seed in any::<u64>()) {
        let (mut r, m) = small_model(seed);
        let g = with_mixtures(&mut r, &m);
        let sol = dual::maximize_dual(&g).unwrap();
        for _ in 0..5 {
            let q = random_density(&mut r, &g);
            let fixed = dual::rho_given_q(&g, &q).unwrap();
            prop_assert!(sol.rho >= fixed.rho_q - 1e-9);
            let budget = g.expected_utility(&fixed.yhat);
            prop_assert!((budget - g.b()).abs() <= 1e-9, "{budget} vs {}", g.b());
        }
    }

    #[test]
    fn value_functions_increase_and_decompose(seed in any::<u64>()) {
        let (mut r, m) = small_model(seed);
        let g = with_mixtures(&mut r, &m);
        let q = random_density(&mut r, &g);
        for n in 0..g.n_banks() {
            let row = q.row(g.grouping().group_of(n));
            let a = r.gen_range(-3.0..3.0);
            let delta = r.gen_range(1e-3..1.0);
            prop_assert!(dual::value_function(&g, n, row, a - delta).unwrap() < dual::value_function(&g, n, row, a).unwrap());
        }
        let total = r.gen_range(-3.0..3.0);
        let split = dual::optimal_split(&g, &q, total).unwrap();
        let value = |a: &[f64]| -> f64 {
            a.iter().enumerate()
                .map(|(n, &v)| dual::value_function(&g, n, q.row(g.grouping().group_of(n)), v).unwrap())
                .sum()
        };
        let best = value(&split);
        for _ in 0..5 {
            let mut other: Vec<f64> = split.iter().map(|v| v + r.gen_range(-0.5..0.5)).collect();
            let drift = (other.iter().sum::<f64>() - total) / other.len() as f64;
            other.iter_mut().for_each(|v| *v -= drift);
            prop_assert!(value(&other) <= best + 1e-9);
        }
    }
}

fn with_opaque(m: &Model) -> Model {
    sysrisk::fixtures::as_general(m)
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn primal_is_convex_and_monotone(seed in any::<u64>()) {
        let (mut r, m) = small_model(seed);
        let g = with_mixtures(&mut r, &m);
        let other = random_positions(&mut r, g.n_banks(), g.n_scenarios(), 5.0);
        let t = r.gen_range(0.05..0.95);
        let mix: Vec<Vec<f64>> = add(&g.positions().iter().map(|row| row.iter().map(|v| t * v).collect()).collect::<Vec<_>>(), &other, 1.0 - t);
        let rho = |x: Vec<Vec<f64>>| primal::primal_solve(&g.with_positions(x).unwrap()).unwrap().rho;
        let (r1, r2, rm) = (rho(g.positions().to_vec()), rho(other.clone()), rho(mix));
        prop_assert!(rm <= t * r1 + (1.0 - t) * r2 + 1e-7);

        let bump: Vec<Vec<f64>> = g.positions().iter().map(|row| row.iter().map(|v| v + r.gen_range(0.0..1.0)).collect()).collect();
        prop_assert!(rho(bump) <= r1 + 1e-9);
    }

    #[test]
    fn utility_max_is_increasing_and_concave(seed in any::<u64>()) {
        let (mut r, m) = small_model(seed);
        let g = with_mixtures(&mut r, &m);
        let grid: Vec<f64> = (0..7).map(|i| -3.0 + i as f64).collect();
        let pi: Vec<f64> = grid.iter().map(|&a| primal::max_utility(&g, a).unwrap().value).collect();
        for w in pi.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
        for w in pi.windows(3) {
            prop_assert!(w[1] >= 0.5 * (w[0] + w[2]) - 1e-9);
        }
    }

    #[test]
    fn primal_optimizer_is_unique(seed in any::<u64>()) {
        let (mut r, m) = small_model(seed);
        let reference = primal::primal_solve(&m).unwrap();
        let options = primal::PrimalOptions::default();
        for _ in 0..10 {
            let start = random_in_c(&mut r, &m, 3.0);
            let sol = primal::primal_solve_from(&m, &start, &options).unwrap();
            prop_assert!(sup_distance(&sol.allocation.y, &reference.allocation.y) <= 1e-5);
        }
    }
}

proptest! {
    #![proptest_config(config(32))]

    #[test]
    fn allocation_marginals_aggregate(seed in any::<u64>()) {
        let (mut r, m) = small_model(seed);
        let v = random_positions(&mut r, m.n_banks(), m.n_scenarios(), 2.0);
        let rep = sensitivity::allocation_sensitivities(&m, &Direction::new(&m, v).unwrap(), 1e-4).unwrap();
        for (g, members) in m.grouping().groups().iter().enumerate() {
            let sum: f64 = members.iter().map(|&k| rep.allocation_marginals[k]).sum();
            prop_assert!((sum - rep.group_marginals[g]).abs() <= 1e-9);
        }
    }

    #[test]
    fn deterministic_direction_marginal(seed in any::<u64>()) {
        let (mut r, m) = small_model(seed);
        let c: Vec<f64> = (0..m.n_banks()).map(|_| r.gen_range(-2.0..2.0)).collect();
        let v = c.iter().map(|&k| vec![k; m.n_scenarios()]).collect();
        let rep = sensitivity::allocation_sensitivities(&m, &Direction::new(&m, v).unwrap(), 1e-4).unwrap();
        prop_assert!((rep.total_marginal + c.iter().sum::<f64>()).abs() <= 1e-12);
    }

    #[test]
    fn splits_respect_monotonicity(seed in any::<u64>()) {
        let (_, m) = small_model(seed);
        let rho: f64 = exponential::group_levels(&m).unwrap().iter().sum();
        for rep in sensitivity::singleton_sweep(&m).unwrap() {
            prop_assert!(rep.holds(), "{:?}", rep);
        }
        for n in 0..m.n_banks() {
            let g = m.grouping().group_of(n);
            let members = &m.grouping().groups()[g];
            if members.len() < 2 {
                continue;
            }
            let mut groups: Vec<Vec<usize>> = m.grouping().groups().to_vec();
            groups[g] = vec![n];
            groups.push(members.iter().copied().filter(|&k| k != n).collect());
            let refined = m.with_grouping(Grouping::new(groups, m.n_banks()).unwrap()).unwrap();
            let split: f64 = exponential::group_levels(&refined).unwrap().iter().sum();
            prop_assert!(split >= rho - 1e-9);
        }
        for (pooled, det) in sensitivity::deterministic_comparison(&m).unwrap() {
            prop_assert!(pooled <= det + 1e-9);
        }
    }
}
