//! Closed-loop Volt/VAR dynamics: iterate `v^t = X q^t + vtilde`,
//! `q^{t+1} = f_z(v^t)`, locate equilibria, and evaluate the inner convex
//! objective whose minimizer the equilibrium is (single phase).

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Result, VoltVarError};
use crate::feeder::{FeederKind, FeederModel, Scenario};
use crate::rules::{eval_rule_vector, RuleParams};
use crate::stability::{scale_rows, spectral_norm};

/// Default tolerance on the infinity norm of the setpoint change.
pub const DEFAULT_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct DynamicsTrace {
    pub setpoints: Vec<DVector<f64>>,
    pub voltages: Vec<DVector<f64>>,
    pub converged: bool,
    pub settle_steps: usize,
    /// 2-norm of the last setpoint change
    pub final_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquilibriumMethod {
    FixedPoint,
    CoordinateDescent,
    RegionEnumeration,
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub q_star: DVector<f64>,
    pub v_star: DVector<f64>,
    pub method: EquilibriumMethod,
    /// Inner objective F(q*); single-phase only.
    pub objective: Option<f64>,
    /// Infinity norm of `f_z(X q* + vtilde) - q*`.
    pub fixed_point_residual: f64,
    /// Filled in by the KKT checker when requested.
    pub kkt_residual: Option<f64>,
    /// Set when the rule failed the spectral stability check.
    pub stability_warning: Option<String>,
}

/// One step of the dynamics: `v = X q + vtilde`, `q_next = f_z(v)`.
pub fn step(
    model: &FeederModel,
    params: &RuleParams,
    scenario: &Scenario,
    q: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let v = model.voltage(q, scenario)?;
    let q_next = eval_rule_vector(params, &v)?;
    Ok((q_next, v))
}

/// Iterate the dynamics from `q^0 = 0` until the setpoint change drops below
/// `tol` (infinity norm) or `t_max` steps elapse. Non-convergence is reported
/// in the trace, not an error.
pub fn simulate(
    model: &FeederModel,
    params: &RuleParams,
    scenario: &Scenario,
    t_max: usize,
    tol: f64,
) -> Result<DynamicsTrace> {
    let n = model.n_nodes();
    let mut q = DVector::zeros(n);
    let mut setpoints = vec![q.clone()];
    let mut voltages = vec![model.voltage(&q, scenario)?];
    let mut converged = false;
    let mut settle_steps = 0;
    let mut final_gap = f64::INFINITY;
    for t in 0..t_max {
        let (q_next, _) = step(model, params, scenario, &q)?;
        let change = (&q_next - &q).abs().max();
        final_gap = (&q_next - &q).norm();
        q = q_next;
        voltages.push(model.voltage(&q, scenario)?);
        setpoints.push(q.clone());
        if change < tol {
            converged = true;
            settle_steps = t + 1;
            break;
        }
        settle_steps = t + 1;
    }
    Ok(DynamicsTrace {
        setpoints,
        voltages,
        converged,
        settle_steps,
        final_gap,
    })
}

/// Equilibrium via fixed-point iteration of the dynamics.
pub fn equilibrium_fixed_point(
    model: &FeederModel,
    params: &RuleParams,
    scenario: &Scenario,
    tol: f64,
) -> Result<EquilibriumResult> {
    let alpha = params.alpha();
    let norm = spectral_norm(&scale_rows(model.reactance_sensitivity(), &alpha));
    let (max_iters, warning) = if norm < 1.0 {
        let eps = 1.0 - norm;
        let reach = 2.0 * params.qhat.norm();
        let depth = if reach <= tol {
            1
        } else {
            ((reach / tol).ln() / (1.0 - eps).recip().ln()).ceil() as usize
        };
        ((10 * depth.max(1)).max(50), None)
    } else {
        (
            10_000,
            Some(format!(
                "rule fails the spectral stability check: ||diag(alpha) X||_2 = {norm:.6}"
            )),
        )
    };
    let mut q = DVector::zeros(model.n_nodes());
    for _ in 0..max_iters {
        let (q_next, _) = step(model, params, scenario, &q)?;
        let change = (&q_next - &q).abs().max();
        q = q_next;
        if change < tol {
            return finish(model, params, scenario, q, EquilibriumMethod::FixedPoint, warning);
        }
    }
    Err(VoltVarError::Convergence(format!(
        "fixed-point iteration did not settle within {max_iters} steps (spectral norm {norm:.4})"
    )))
}

/// Inner convex objective `F(q) = 1/2 q^T X q + q^T (vtilde - vref)
/// + sum_n (q_n^2 / (2 alpha_n) + delta_n |q_n|)`. Single phase only.
pub fn inner_objective(
    model: &FeederModel,
    params: &RuleParams,
    scenario: &Scenario,
    q: &DVector<f64>,
) -> Result<f64> {
    if model.kind() != FeederKind::SinglePhase {
        return Err(VoltVarError::Kind(
            "the inner variational form exists only for single-phase feeders".into(),
        ));
    }
    if q.len() != model.n_nodes() {
        return Err(VoltVarError::Dimension(format!(
            "q has length {}, expected {}",
            q.len(),
            model.n_nodes()
        )));
    }
    let x = model.reactance_sensitivity();
    let v_term = 0.5 * (x * q).dot(q) + q.dot(&(&scenario.vtilde - &params.vref));
    let alpha = params.alpha();
    let mut c_term = 0.0;
    for n in 0..q.len() {
        if params.der_mask[n] {
            c_term += q[n] * q[n] / (2.0 * alpha[n]) + params.delta[n] * q[n].abs();
        }
    }
    Ok(v_term + c_term)
}

/// Independent equilibrium oracle: exact coordinate minimization of the inner
/// objective (soft-threshold plus clip per coordinate), in fixed node order.
pub fn equilibrium_coordinate_descent(
    model: &FeederModel,
    params: &RuleParams,
    scenario: &Scenario,
    tol: f64,
) -> Result<EquilibriumResult> {
    if model.kind() != FeederKind::SinglePhase {
        return Err(VoltVarError::Kind(
            "coordinate descent minimizes the inner program; single phase only".into(),
        ));
    }
    let n = model.n_nodes();
    let x = model.reactance_sensitivity();
    let alpha = params.alpha();
    let mut q: DVector<f64> = DVector::zeros(n);
    let max_sweeps = 200_000;
    for _ in 0..max_sweeps {
        let mut max_change = 0.0f64;
        for i in 0..n {
            if !params.der_mask[i] {
                continue;
            }
            // partial residual: gradient of the smooth quadratic at q_i = 0
            let mut r = scenario.vtilde[i] - params.vref[i];
            for j in 0..n {
                if j != i {
                    r += x[(i, j)] * q[j];
                }
            }
            let c = 1.0 / alpha[i];
            let shrunk = (r.abs() - params.delta[i]).max(0.0);
            let unclipped = -r.signum() * shrunk / (x[(i, i)] + c);
            let new: f64 = unclipped.clamp(-params.qbar[i], params.qbar[i]);
            max_change = max_change.max((new - q[i]).abs());
            q[i] = new;
        }
        if max_change < tol {
            return finish(
                model,
                params,
                scenario,
                q,
                EquilibriumMethod::CoordinateDescent,
                None,
            );
        }
    }
    Err(VoltVarError::Convergence(format!(
        "coordinate descent did not settle within {max_sweeps} sweeps"
    )))
}

pub(crate) fn finish(
    model: &FeederModel,
    params: &RuleParams,
    scenario: &Scenario,
    q: DVector<f64>,
    method: EquilibriumMethod,
    stability_warning: Option<String>,
) -> Result<EquilibriumResult> {
    let v = model.voltage(&q, scenario)?;
    let residual = (eval_rule_vector(params, &v)? - &q).abs().max();
    let objective = match model.kind() {
        FeederKind::SinglePhase => Some(inner_objective(model, params, scenario, &q)?),
        FeederKind::Multiphase => None,
    };
    Ok(EquilibriumResult {
        q_star: q,
        v_star: v,
        method,
        objective,
        fixed_point_residual: residual,
        kkt_residual: None,
        stability_warning,
    })
}
