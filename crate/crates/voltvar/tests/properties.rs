//! Cross-module properties on randomized instances: the polytopic stability
//! restrictions imply the spectral condition, stable dynamics contract at the
//! certified geometric rate, and the three equilibrium solvers agree.

mod common;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voltvar::benchmark;
use voltvar::dynamics;
use voltvar::stability::{polytopic_check_1p, polytopic_check_3p, spectral_norm};
use voltvar::VoltVarError;

fn scaled_norm(x: &nalgebra::DMatrix<f64>, alpha: &DVector<f64>) -> f64 {
    let mut scaled = x.clone();
    for i in 0..x.nrows() {
        scaled.row_mut(i).scale_mut(alpha[i]);
    }
    spectral_norm(&scaled)
}

#[test]
fn single_phase_restriction_implies_spectral_condition() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=10);
        let model = common::random_radial_feeder(&mut rng, n);
        let epsilon = rng.gen_range(0.05..0.95);
        let x = model.reactance_sensitivity();
        let alpha = common::random_polytopic_alpha_1p(&mut rng, x, epsilon);
        assert!(polytopic_check_1p(x, &alpha, epsilon).unwrap());
        if scaled_norm(x, &alpha) > 1.0 - epsilon + 1e-12 {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn multiphase_restriction_implies_spectral_condition() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=8);
        let model = common::random_multiphase_model(&mut rng, n);
        let epsilon = rng.gen_range(0.05..0.95);
        let x = model.reactance_sensitivity();
        let alpha = common::random_polytopic_alpha_3p(&mut rng, x, epsilon);
        assert!(polytopic_check_3p(x, &alpha, epsilon));
        if scaled_norm(x, &alpha) > 1.0 - epsilon + 1e-12 {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn certified_dynamics_contract_at_geometric_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for trial in 0..100 {
        let n = rng.gen_range(1..=6);
        let epsilon = rng.gen_range(0.2..0.8);
        let model = if trial % 2 == 0 {
            common::random_radial_feeder(&mut rng, n)
        } else {
            common::random_multiphase_model(&mut rng, n)
        };
        let params = common::random_feasible_rules(&mut rng, &model, epsilon);
        let scenario = common::random_scenario(&mut rng, n);
        let star = dynamics::equilibrium_fixed_point(&model, &params, &scenario, 1e-13).unwrap();
        let trace = dynamics::simulate(&model, &params, &scenario, 400, 1e-13).unwrap();
        let bound0 = 2.0 * params.qhat.norm();
        for (t, q) in trace.setpoints.iter().enumerate() {
            let gap = (q - &star.q_star).norm();
            let bound = bound0 * (1.0 - epsilon).powi(t as i32);
            assert!(
                gap <= bound + 1e-9,
                "trial {trial}: step {t} gap {gap} exceeds bound {bound}"
            );
        }
    }
}

#[test]
fn equilibrium_solvers_agree_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut done = 0;
    while done < 200 {
        let n = rng.gen_range(1..=6);
        let epsilon = rng.gen_range(0.2..0.8);
        let model = common::random_radial_feeder(&mut rng, n);
        let params = common::random_feasible_rules(&mut rng, &model, epsilon);
        let scenario = common::random_scenario(&mut rng, n);
        let fp = dynamics::equilibrium_fixed_point(&model, &params, &scenario, 1e-10).unwrap();
        let cd =
            dynamics::equilibrium_coordinate_descent(&model, &params, &scenario, 1e-12).unwrap();
        let re = match benchmark::enumerate_equilibrium(&model, &params, &scenario) {
            Ok(eq) => eq,
            // a random instance may graze a region boundary; skip it
            Err(VoltVarError::Degenerate(_)) => continue,
            Err(e) => panic!("{e}"),
        };
        for (a, b, label) in [
            (&fp.q_star, &cd.q_star, "fixed-point vs coordinate descent"),
            (&fp.q_star, &re.q_star, "fixed-point vs enumeration"),
            (&cd.q_star, &re.q_star, "coordinate descent vs enumeration"),
        ] {
            let gap = (a - b).abs().max();
            assert!(gap < 1e-6, "{label} gap {gap}");
        }
        let (res, _) = benchmark::kkt_residual(&model, &params, &scenario, &re.q_star).unwrap();
        assert!(res <= 1e-6, "KKT residual {res}");
        done += 1;
    }
}

#[test]
fn enumerated_equilibria_are_unique() {
    // every consistent region assignment of a stable instance yields the same
    // setpoints, over 200 random instances
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..200 {
        let n = rng.gen_range(1..=4);
        let model = common::random_radial_feeder(&mut rng, n);
        let params = common::random_feasible_rules(&mut rng, &model, 0.3);
        let scenario = common::random_scenario(&mut rng, n);
        let found = benchmark::enumerate_assignments(&model, &params, &scenario).unwrap();
        assert!(!found.is_empty(), "no consistent assignment");
        for (_, q) in &found[1..] {
            assert!((q - &found[0].1).abs().max() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // the certified contraction implies the fixed point is independent of the
    // starting scenario history: iterating from any reported trace endpoint
    // reaches the same equilibrium
    #[test]
    fn equilibrium_is_start_independent(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=5);
        let model = common::random_radial_feeder(&mut rng, n);
        let params = common::random_feasible_rules(&mut rng, &model, 0.4);
        let s1 = common::random_scenario(&mut rng, n);
        let fp = dynamics::equilibrium_fixed_point(&model, &params, &s1, 1e-12).unwrap();
        let trace = dynamics::simulate(&model, &params, &s1, 300, 1e-12).unwrap();
        prop_assert!(trace.converged);
        let last = trace.setpoints.last().unwrap();
        prop_assert!((last - &fp.q_star).abs().max() < 1e-9);
    }

    // scaling qhat scales the reachable set: setpoints never leave the box
    #[test]
    fn setpoints_stay_within_capability(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=5);
        let model = common::random_radial_feeder(&mut rng, n);
        let params = common::random_feasible_rules(&mut rng, &model, 0.3);
        let s = common::random_scenario(&mut rng, n);
        let trace = dynamics::simulate(&model, &params, &s, 100, 1e-10).unwrap();
        for q in &trace.setpoints {
            for i in 0..n {
                prop_assert!(q[i].abs() <= params.qbar[i] + 1e-12);
            }
        }
    }
}
