//! Shared generators for the integration tests: random radial feeders,
//! random multiphase sensitivity models, and random rules certified by the
//! polytopic stability restrictions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use voltvar::feeder::{build_radial_sensitivities, FeederKind, FeederModel, Line, Phase, Scenario};
use voltvar::rules::{Parameterization, RuleParams};

/// Random radial feeder with `n` non-root nodes: each node attaches to a
/// uniformly chosen earlier node (or the root), with positive r/x per line.
pub fn random_radial_feeder(rng: &mut ChaCha8Rng, n: usize) -> FeederModel {
    let mut lines = Vec::with_capacity(n);
    for node in 1..=n as u32 {
        let parent = rng.gen_range(0..node);
        lines.push(Line {
            from: parent,
            to: node,
            r: rng.gen_range(0.002..0.02),
            x: rng.gen_range(0.002..0.02),
        });
    }
    build_radial_sensitivities(&lines, 0, 1.0).expect("random tree is a valid feeder")
}

/// Random multiphase sensitivity model: X = B^T B + 0.05 I is symmetric
/// positive definite but typically has entries of both signs.
pub fn random_multiphase_model(rng: &mut ChaCha8Rng, n: usize) -> FeederModel {
    let phases = [Phase::A, Phase::B, Phase::C];
    loop {
        let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3));
        let x = b.transpose() * &b + DMatrix::identity(n, n) * 0.05;
        let has_negative = x.iter().any(|&e| e < 0.0);
        let model = FeederModel::new(
            DMatrix::identity(n, n),
            x,
            1.0,
            (0..n).map(|i| phases[i % 3]).collect(),
            FeederKind::Multiphase,
        );
        if let Ok(m) = model {
            if has_negative || n < 2 {
                return m;
            }
        }
    }
}

/// Random slopes satisfying the single-phase polytopic restriction with a
/// margin: alpha_n <= (1 - eps) / (row sum of X).
pub fn random_polytopic_alpha_1p(
    rng: &mut ChaCha8Rng,
    x: &DMatrix<f64>,
    epsilon: f64,
) -> DVector<f64> {
    let mut alpha = DVector::from_fn(x.nrows(), |i, _| {
        let row_sum: f64 = x.row(i).iter().sum();
        rng.gen_range(0.05..1.0) * (1.0 - epsilon) / row_sum
    });
    // the restriction also bounds X alpha entrywise; scale down to satisfy it
    let worst = (x * &alpha).max() / (1.0 - epsilon);
    if worst > 1.0 {
        alpha /= worst * (1.0 + 1e-12);
    }
    alpha
}

/// Random slopes satisfying the multiphase restriction, which bounds both the
/// |X| row sums and the |X|^T rows scaled by alpha.
pub fn random_polytopic_alpha_3p(
    rng: &mut ChaCha8Rng,
    x: &DMatrix<f64>,
    epsilon: f64,
) -> DVector<f64> {
    let x_abs = x.abs();
    let mut alpha = DVector::from_fn(x.nrows(), |i, _| {
        let row_sum: f64 = x_abs.row(i).iter().sum();
        rng.gen_range(0.05..1.0) * (1.0 - epsilon) / row_sum
    });
    // the restriction also bounds |X|^T alpha entrywise; scale down to satisfy it
    let worst = (x_abs.transpose() * &alpha).max() / (1.0 - epsilon);
    if worst > 1.0 {
        alpha /= worst * (1.0 + 1e-12);
    }
    alpha
}

/// Random rule parameters certified by the polytopic restriction for the
/// model's kind, with the capability set to the saturation level.
pub fn random_feasible_rules(
    rng: &mut ChaCha8Rng,
    model: &FeederModel,
    epsilon: f64,
) -> RuleParams {
    let x = model.reactance_sensitivity();
    let alpha = match model.kind() {
        FeederKind::SinglePhase => random_polytopic_alpha_1p(rng, x, epsilon),
        FeederKind::Multiphase => random_polytopic_alpha_3p(rng, x, epsilon),
    };
    let n = model.n_nodes();
    let delta = DVector::from_fn(n, |_, _| rng.gen_range(0.0..0.03));
    let sigma = DVector::from_fn(n, |i, _| delta[i] + rng.gen_range(0.02..0.15));
    let qhat = DVector::from_fn(n, |i, _| alpha[i] * (sigma[i] - delta[i]));
    RuleParams::from_parameterization(
        Parameterization::VAlphaDeltaSigma,
        DVector::from_fn(n, |_, _| rng.gen_range(0.97..1.03)),
        delta,
        Some(sigma),
        None,
        Some(alpha),
        qhat,
        vec![true; n],
    )
    .expect("generated rules are well formed")
}

/// Random grid condition around nominal voltage.
pub fn random_scenario(rng: &mut ChaCha8Rng, n: usize) -> Scenario {
    Scenario::from_vtilde(DVector::from_fn(n, |_, _| rng.gen_range(0.92..1.12)))
}
