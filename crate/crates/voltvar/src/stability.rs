//! Stability certification of Volt/VAR slopes: the spectral condition, the
//! polytopic restrictions for single- and multi-phase feeders, and the minimum
//! unrolling depth needed to approximate equilibrium voltages.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Result, VoltVarError};
use crate::feeder::FeederKind;

#[derive(Debug, Clone, Serialize)]
pub struct StabilityCertificate {
    pub epsilon: f64,
    pub spectral_norm: f64,
    pub spectral_pass: bool,
    pub polytopic_pass: bool,
    pub kind: FeederKind,
}

const POWER_ITER_TOL: f64 = 1e-12;
const POWER_ITER_MAX: usize = 20_000;

/// Operator 2-norm (largest singular value). Power iteration on `m^T m`, with
/// a dense SVD fallback when the iteration stalls.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let n = m.ncols();
    if n == 0 {
        return 0.0;
    }
    let gram = m.transpose() * m;
    if gram.amax() == 0.0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0f64;
    for _ in 0..POWER_ITER_MAX {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = w / norm;
        let lambda_next = (&gram * &next).dot(&next);
        let done = (lambda_next - lambda).abs() <= POWER_ITER_TOL * lambda_next.max(1.0);
        v = next;
        lambda = lambda_next;
        if done {
            return lambda.max(0.0).sqrt();
        }
    }
    // Stalled (e.g. nearly equal leading eigenvalues); fall back to SVD.
    m.clone().svd(false, false).singular_values.max()
}

/// Check the spectral condition `||diag(alpha) X||_2 <= 1 - epsilon`.
pub fn spectral_check(
    x: &DMatrix<f64>,
    alpha: &DVector<f64>,
    epsilon: f64,
    kind: FeederKind,
) -> Result<StabilityCertificate> {
    check_epsilon(epsilon)?;
    check_alpha(alpha)?;
    let scaled = scale_rows(x, alpha);
    let norm = spectral_norm(&scaled);
    let spectral_pass = norm <= 1.0 - epsilon;
    let polytopic_pass = match kind {
        FeederKind::SinglePhase => polytopic_check_1p(x, alpha, epsilon)?,
        FeederKind::Multiphase => polytopic_check_3p(x, alpha, epsilon),
    };
    Ok(StabilityCertificate {
        epsilon,
        spectral_norm: norm,
        spectral_pass,
        polytopic_pass,
        kind,
    })
}

/// Single-phase polytopic restriction:
/// `X alpha <= (1-eps) 1` and `alpha_n <= (1-eps) / sum_m X_nm`.
pub fn polytopic_check_1p(x: &DMatrix<f64>, alpha: &DVector<f64>, epsilon: f64) -> Result<bool> {
    if x.iter().any(|&e| e < 0.0) {
        return Err(VoltVarError::Kind(
            "single-phase polytopic check requires nonnegative X; use the multiphase check".into(),
        ));
    }
    let bound = 1.0 - epsilon;
    let xa = x * alpha;
    if xa.iter().any(|&e| e > bound) {
        return Ok(false);
    }
    for n in 0..x.nrows() {
        if alpha[n] == 0.0 {
            // DER-less node: contributes no loop gain, skip the row bound
            continue;
        }
        let row_sum: f64 = x.row(n).iter().sum();
        if alpha[n] * row_sum > bound {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Multiphase polytopic restriction with entry-wise absolute values:
/// `|X|^T alpha <= (1-eps) 1` and `alpha_n <= (1-eps) / sum_m |X_nm|`.
pub fn polytopic_check_3p(x: &DMatrix<f64>, alpha: &DVector<f64>, epsilon: f64) -> bool {
    let bound = 1.0 - epsilon;
    let x_abs = x.abs();
    let col = x_abs.transpose() * alpha;
    if col.iter().any(|&e| e > bound) {
        return false;
    }
    for n in 0..x.nrows() {
        if alpha[n] == 0.0 {
            continue;
        }
        let row_sum: f64 = x_abs.row(n).iter().sum();
        if alpha[n] * row_sum > bound {
            return false;
        }
    }
    true
}

/// Minimum unrolling depth T so that an epsilon-stable rule's truncated
/// trajectory is within eps1 of the equilibrium voltages:
/// `T >= log(2 ||X|| ||qhat|| / eps1) / log(1/(1-eps))`.
pub fn min_depth_from_norms(x_norm: f64, qhat_norm: f64, epsilon: f64, eps1: f64) -> Result<usize> {
    check_epsilon(epsilon)?;
    if eps1 <= 0.0 {
        return Err(VoltVarError::Validation(format!(
            "eps1 must be positive, got {eps1}"
        )));
    }
    let reach = 2.0 * x_norm * qhat_norm;
    if reach <= eps1 {
        return Ok(0);
    }
    let t = (reach / eps1).ln() / (1.0 - epsilon).recip().ln();
    Ok(t.ceil() as usize)
}

pub fn min_depth(
    x: &DMatrix<f64>,
    qhat: &DVector<f64>,
    epsilon: f64,
    eps1: f64,
) -> Result<usize> {
    min_depth_from_norms(spectral_norm(x), qhat.norm(), epsilon, eps1)
}

pub(crate) fn scale_rows(x: &DMatrix<f64>, alpha: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = x.clone();
    for n in 0..x.nrows() {
        scaled.row_mut(n).scale_mut(alpha[n]);
    }
    scaled
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(VoltVarError::Validation(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    Ok(())
}

fn check_alpha(alpha: &DVector<f64>) -> Result<()> {
    if alpha.iter().any(|&a| a < 0.0) {
        return Err(VoltVarError::Validation(
            "alpha must be nonnegative componentwise".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn zero_slopes_are_stable_for_any_margin() {
        let cert = spectral_check(
            &scalar(0.5),
            &DVector::zeros(1),
            0.99,
            FeederKind::SinglePhase,
        )
        .unwrap();
        assert_eq!(cert.spectral_norm, 0.0);
        assert!(cert.spectral_pass);
        assert!(cert.polytopic_pass);
    }

    #[test]
    fn scalar_boundary_passes_and_overshoot_fails() {
        let pass = spectral_check(
            &scalar(0.5),
            &DVector::from_element(1, 1.0),
            0.5,
            FeederKind::SinglePhase,
        )
        .unwrap();
        assert!((pass.spectral_norm - 0.5).abs() < 1e-12);
        assert!(pass.spectral_pass);
        let fail = spectral_check(
            &scalar(0.5),
            &DVector::from_element(1, 1.2),
            0.5,
            FeederKind::SinglePhase,
        )
        .unwrap();
        assert!((fail.spectral_norm - 0.6).abs() < 1e-12);
        assert!(!fail.spectral_pass);
    }

    #[test]
    fn polytopic_scalar_examples() {
        let x = scalar(0.5);
        let a = DVector::from_element(1, 1.0);
        assert!(polytopic_check_1p(&x, &a, 0.5).unwrap());
        assert!(!polytopic_check_1p(&x, &a, 0.6).unwrap());
        assert!(polytopic_check_1p(&x, &DVector::zeros(1), 0.99).unwrap());
    }

    #[test]
    fn polytopic_1p_rejects_negative_entries() {
        let x = DMatrix::from_row_slice(2, 2, &[0.4, -0.1, -0.2, 0.5]);
        let err = polytopic_check_1p(&x, &DVector::from_element(2, 0.1), 0.3).unwrap_err();
        assert!(matches!(err, VoltVarError::Kind(_)));
    }

    #[test]
    fn polytopic_3p_hand_arithmetic() {
        let x = DMatrix::from_row_slice(2, 2, &[0.4, -0.1, -0.2, 0.5]);
        // |X|^T alpha = (0.6, 0.6) <= 0.7; row sums (0.5, 0.7) bound alpha by (1.4, 1.0)
        assert!(polytopic_check_3p(&x, &DVector::from_element(2, 1.0), 0.3));
        // |X|^T alpha = (0.9, 0.9) > 0.7
        assert!(!polytopic_check_3p(&x, &DVector::from_element(2, 1.5), 0.3));
        assert!(polytopic_check_3p(&x, &DVector::zeros(2), 0.3));
    }

    #[test]
    fn min_depth_reported_values() {
        assert_eq!(min_depth_from_norms(0.463, 0.1, 0.3, 1e-4).unwrap(), 20);
        let t = min_depth_from_norms(0.463, 0.1, 0.3, 1e-6).unwrap();
        assert!(t == 32 || t == 33, "got {t}");
        assert_eq!(min_depth_from_norms(0.463, 0.1, 0.3, 1.0).unwrap(), 0);
    }

    #[test]
    fn min_depth_monotone() {
        let mut prev = 0;
        for eps1 in [1e-2, 1e-3, 1e-4, 1e-5, 1e-6] {
            let t = min_depth_from_norms(0.463, 0.1, 0.3, eps1).unwrap();
            assert!(t >= prev);
            prev = t;
        }
        let mut prev_t = usize::MAX;
        for eps in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let t = min_depth_from_norms(0.463, 0.1, eps, 1e-4).unwrap();
            assert!(t <= prev_t);
            prev_t = t;
        }
    }

    #[test]
    fn bad_epsilon_rejected() {
        assert!(min_depth_from_norms(0.5, 0.1, 0.0, 1e-4).is_err());
        assert!(min_depth_from_norms(0.5, 0.1, 1.0, 1e-4).is_err());
        assert!(spectral_check(&scalar(0.5), &DVector::zeros(1), 1.5, FeederKind::SinglePhase)
            .is_err());
    }

    #[test]
    fn spectral_norm_matches_svd_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(1..10);
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let via_svd = m.clone().svd(false, false).singular_values.max();
            assert!((spectral_norm(&m) - via_svd).abs() < 1e-9);
        }
    }
}
