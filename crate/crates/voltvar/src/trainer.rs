//! Optimal rule design: projected stochastic gradient descent over
//! (vref, alpha, delta, sigma), with the reciprocal-slope transform that makes
//! the IEEE-1547-plus-stability feasible set convex, and a cyclic-projection
//! solver (Dykstra) for the projection step.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, VoltVarError};
use crate::feeder::{FeederKind, FeederModel, Scenario};
use crate::rules::{Parameterization, RuleParams};
use crate::stability::{min_depth_from_norms, spectral_check, spectral_norm, StabilityCertificate};
use crate::twin::{self, Gradient, TwinConfig};

/// Floor applied to alpha before the reciprocal transform; the gradient step
/// may cross zero.
pub const ALPHA_MIN: f64 = 1e-6;

const PROJ_FEAS_TOL: f64 = 1e-8;
const DYKSTRA_TOL: f64 = 1e-12;
const DYKSTRA_RESIDUAL_TOL: f64 = 1e-10;
const DYKSTRA_MAX_CYCLES: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerMode {
    Plain,
    AdaptiveMoment,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub step_size: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub epsilon: f64,
    pub optimizer: OptimizerMode,
    pub beta1: f64,
    pub beta2: f64,
    pub moment_floor: f64,
    pub seed: u64,
    /// Starting point in (vref, delta, sigma, alpha); projected before epoch 1.
    pub init: InitPoint,
    /// Layer-to-layer objective-change threshold for the adaptive-depth twin.
    pub adaptive_tol: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct InitPoint {
    pub vref: f64,
    pub delta: f64,
    pub sigma: f64,
    pub alpha: f64,
}

impl Default for InitPoint {
    fn default() -> Self {
        InitPoint {
            vref: 0.95,
            delta: 0.1,
            sigma: 0.3,
            alpha: 1.5,
        }
    }
}

impl TrainConfig {
    pub fn new(epsilon: f64, epochs: usize, step_size: f64, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            step_size,
            batch_size,
            epochs,
            epsilon,
            optimizer: OptimizerMode::AdaptiveMoment,
            beta1: 0.9,
            beta2: 0.999,
            moment_floor: 1e-8,
            seed,
            init: InitPoint::default(),
            adaptive_tol: 1e-7,
        }
    }
}

/// Trainable point in parameter space (vref, alpha, delta, sigma).
#[derive(Debug, Clone)]
pub struct ZPoint {
    pub vref: DVector<f64>,
    pub alpha: DVector<f64>,
    pub delta: DVector<f64>,
    pub sigma: DVector<f64>,
}

/// The same point in the transformed space (vref, c, delta, sigma) plus the
/// auxiliary vector used by the stability rows.
#[derive(Debug, Clone)]
pub struct CPoint {
    pub vref: DVector<f64>,
    pub c: DVector<f64>,
    pub delta: DVector<f64>,
    pub sigma: DVector<f64>,
    pub aux: DVector<f64>,
}

/// Transform (vref, alpha, delta, sigma) to (vref, c, delta, sigma) with
/// c = 1/alpha. Alpha entries below [`ALPHA_MIN`] are clamped first; the
/// return reports whether any clamp fired.
pub fn to_c_space(z: &ZPoint, mask: &[bool], aux_warm_start: &DVector<f64>) -> (CPoint, bool) {
    let n = z.alpha.len();
    let mut clamped = false;
    let c = DVector::from_fn(n, |i, _| {
        if !mask[i] {
            return f64::INFINITY;
        }
        let a = if z.alpha[i] < ALPHA_MIN {
            clamped = true;
            ALPHA_MIN
        } else {
            z.alpha[i]
        };
        1.0 / a
    });
    (
        CPoint {
            vref: z.vref.clone(),
            c,
            delta: z.delta.clone(),
            sigma: z.sigma.clone(),
            aux: aux_warm_start.clone(),
        },
        clamped,
    )
}

pub fn from_c_space(p: &CPoint, mask: &[bool]) -> ZPoint {
    let n = p.c.len();
    ZPoint {
        vref: p.vref.clone(),
        alpha: DVector::from_fn(n, |i, _| if mask[i] { 1.0 / p.c[i] } else { 0.0 }),
        delta: p.delta.clone(),
        sigma: p.sigma.clone(),
    }
}

/// Convex feasible set in (vref, c, delta, sigma, aux):
/// the IEEE 1547 box, the capability coupling `0 <= sigma - delta <= c * qhat`,
/// and the stability rows `c >= lower`, `M aux <= (1-eps) 1`, `aux * c >= 1`,
/// where M is X (single phase) or |X|^T (multiphase).
#[derive(Debug, Clone)]
pub struct FeasibleSetSpec {
    pub epsilon: f64,
    qhat: DVector<f64>,
    mask: Vec<bool>,
    /// Coupling matrix applied to the auxiliary vector.
    stab_matrix: DMatrix<f64>,
    /// Per-node lower bound on c from the row-sum restriction.
    c_lower: DVector<f64>,
}

impl FeasibleSetSpec {
    pub fn new(model: &FeederModel, epsilon: f64, qhat: &DVector<f64>, mask: &[bool]) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(VoltVarError::Validation(format!(
                "epsilon must lie in (0,1), got {epsilon}"
            )));
        }
        let n = model.n_nodes();
        if qhat.len() != n || mask.len() != n {
            return Err(VoltVarError::Dimension("qhat/mask length mismatch".into()));
        }
        for i in 0..n {
            if mask[i] && qhat[i] <= 0.0 {
                return Err(VoltVarError::Infeasible(format!(
                    "node {}: a DER with qhat = 0 cannot satisfy sigma - delta <= c*qhat with sigma - delta >= 0.02",
                    i + 1
                )));
            }
        }
        let x = model.reactance_sensitivity();
        let (stab_matrix, row_abs_sum): (DMatrix<f64>, DVector<f64>) = match model.kind() {
            FeederKind::SinglePhase => {
                let sums = DVector::from_fn(n, |i, _| x.row(i).iter().sum());
                (x.clone(), sums)
            }
            FeederKind::Multiphase => {
                let x_abs = x.abs();
                let sums = DVector::from_fn(n, |i, _| x_abs.row(i).iter().sum());
                (x_abs.transpose(), sums)
            }
        };
        let c_lower = row_abs_sum.map(|s| s / (1.0 - epsilon));
        Ok(FeasibleSetSpec {
            epsilon,
            qhat: qhat.clone(),
            mask: mask.to_vec(),
            stab_matrix,
            c_lower,
        })
    }

    fn unmasked(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.mask.len()).filter(|&i| self.mask[i])
    }

    /// Maximum constraint violation at a point; 0 means feasible.
    pub fn residual(&self, p: &CPoint) -> f64 {
        let mut r = 0.0f64;
        let bound = 1.0 - self.epsilon;
        for i in self.unmasked() {
            r = r.max(0.95 - p.vref[i]);
            r = r.max(p.vref[i] - 1.05);
            r = r.max(-p.delta[i]);
            r = r.max(p.delta[i] - 0.03);
            r = r.max(p.delta[i] + 0.02 - p.sigma[i]);
            r = r.max(p.sigma[i] - 0.18);
            r = r.max(p.sigma[i] - p.delta[i] - p.c[i] * self.qhat[i]);
            r = r.max(self.c_lower[i] - p.c[i]);
            r = r.max(1.0 - p.aux[i] * p.c[i]);
        }
        for row in 0..self.stab_matrix.nrows() {
            let mut lhs = 0.0;
            for j in self.unmasked() {
                lhs += self.stab_matrix[(row, j)] * p.aux[j];
            }
            r = r.max(lhs - bound);
        }
        r.max(0.0)
    }

    /// Names of the constraints violated by more than `tol`, for diagnostics.
    pub fn binding_rows(&self, p: &CPoint, tol: f64) -> Vec<String> {
        let mut rows = Vec::new();
        let bound = 1.0 - self.epsilon;
        for i in self.unmasked() {
            let node = i + 1;
            if p.sigma[i] - p.delta[i] - p.c[i] * self.qhat[i] > tol {
                rows.push(format!("node {node}: sigma - delta <= c*qhat"));
            }
            if self.c_lower[i] - p.c[i] > tol {
                rows.push(format!("node {node}: c >= row-sum/(1-eps)"));
            }
            if 1.0 - p.aux[i] * p.c[i] > tol {
                rows.push(format!("node {node}: aux*c >= 1"));
            }
        }
        for row in 0..self.stab_matrix.nrows() {
            let mut lhs = 0.0;
            for j in self.unmasked() {
                lhs += self.stab_matrix[(row, j)] * p.aux[j];
            }
            if lhs - bound > tol {
                rows.push(format!("stability row {}", row + 1));
            }
        }
        rows
    }
}

// Projection onto the per-node polyhedron in (delta, sigma, c):
//   0 <= delta <= 0.03, sigma <= 0.18, sigma - delta >= 0.02,
//   sigma - delta <= c*qhat, c >= c_lower.
// Exact small-QP solve by enumerating active sets.
fn project_node_polyhedron(y0: [f64; 3], qhat: f64, c_lower: f64) -> [f64; 3] {
    // rows of A y <= b over y = (delta, sigma, c)
    let rows: [([f64; 3], f64); 6] = [
        ([-1.0, 0.0, 0.0], 0.0),
        ([1.0, 0.0, 0.0], 0.03),
        ([0.0, 1.0, 0.0], 0.18),
        ([1.0, -1.0, 0.0], -0.02),
        ([-1.0, 1.0, -qhat], 0.0),
        ([0.0, 0.0, -1.0], -c_lower),
    ];
    let feasible = |y: &[f64; 3], tol: f64| -> bool {
        rows.iter()
            .all(|(a, b)| a[0] * y[0] + a[1] * y[1] + a[2] * y[2] <= b + tol)
    };
    if feasible(&y0, 0.0) {
        return y0;
    }
    let mut best: Option<([f64; 3], f64)> = None;
    for mask in 1u32..(1 << 6) {
        let active: Vec<usize> = (0..6).filter(|k| mask & (1 << k) != 0).collect();
        let m = active.len();
        if m > 3 {
            continue;
        }
        // KKT: y = y0 - A_S^T lam, A_S y = b_S  =>  (A_S A_S^T) lam = A_S y0 - b_S
        let a_s = DMatrix::from_fn(m, 3, |r, c| rows[active[r]].0[c]);
        let rhs = DVector::from_fn(m, |r, _| {
            let (a, b) = rows[active[r]];
            a[0] * y0[0] + a[1] * y0[1] + a[2] * y0[2] - b
        });
        let gram = &a_s * a_s.transpose();
        let Some(lam) = gram.lu().solve(&rhs) else {
            continue;
        };
        if lam.iter().any(|&l| l < -1e-12) {
            continue;
        }
        let correction = a_s.transpose() * &lam;
        let y = [
            y0[0] - correction[0],
            y0[1] - correction[1],
            y0[2] - correction[2],
        ];
        if !feasible(&y, 1e-10) {
            continue;
        }
        let d = (y[0] - y0[0]).powi(2) + (y[1] - y0[1]).powi(2) + (y[2] - y0[2]).powi(2);
        if best.map(|(_, bd)| d < bd).unwrap_or(true) {
            best = Some((y, d));
        }
    }
    debug_assert!(best.is_some(), "no active set found for {y0:?}, qhat {qhat}, c_lower {c_lower}");
    best.map(|(y, _)| y).unwrap_or(y0)
}

// Projection of (a0, c0) onto {(a, c): a c >= 1, a > 0, c > 0}.
fn project_hyperbola(a0: f64, c0: f64) -> (f64, f64) {
    if a0 > 0.0 && c0 > 0.0 && a0 * c0 >= 1.0 {
        return (a0, c0);
    }
    // nearest point lies on a c = 1; minimize h(a) = (a-a0)^2 + (1/a-c0)^2
    let h = |a: f64| (a - a0).powi(2) + (1.0 / a - c0).powi(2);
    let g = |a: f64| a.powi(4) - a0 * a.powi(3) + c0 * a - 1.0;
    let mut best = (1.0f64, h(1.0));
    let mut prev_a = 1e-6;
    let mut prev_g = g(prev_a);
    for k in 1..=240 {
        let a = 1e-6 * 10f64.powf(k as f64 / 20.0);
        let ga = g(a);
        if prev_g <= 0.0 && ga > 0.0 {
            let (mut lo, mut hi) = (prev_a, a);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(mid) <= 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let root = 0.5 * (lo + hi);
            let val = h(root);
            if val < best.1 {
                best = (root, val);
            }
        }
        prev_a = a;
        prev_g = ga;
    }
    (best.0, 1.0 / best.0)
}

/// Euclidean projection onto the feasible set, by Dykstra's cyclic projections
/// with per-set dual corrections. Exact for this intersection of convex sets;
/// iterated until the feasibility residual is within 1e-8 and the iterates
/// settle.
pub fn project(point: &CPoint, spec: &FeasibleSetSpec) -> Result<CPoint> {
    let free: Vec<usize> = spec.unmasked().collect();
    if free.is_empty() {
        return Ok(point.clone());
    }
    // variable layout: [vref, delta, sigma, c, aux] restricted to free nodes
    let dim = 5 * free.len();
    let pos = |slot: usize, k: usize| slot * free.len() + k;
    let mut x = DVector::zeros(dim);
    for (k, &i) in free.iter().enumerate() {
        x[pos(0, k)] = point.vref[i];
        x[pos(1, k)] = point.delta[i];
        x[pos(2, k)] = point.sigma[i];
        x[pos(3, k)] = point.c[i].min(1e12);
        x[pos(4, k)] = point.aux[i].clamp(-1e12, 1e12);
    }

    // sets: 0 = vref box; 1..=F node polyhedra; then F hyperbolas; then rows
    let n_rows = spec.stab_matrix.nrows();
    let n_sets = 1 + free.len() + free.len() + n_rows;
    let mut corrections: Vec<DVector<f64>> = vec![DVector::zeros(dim); n_sets];
    let bound = 1.0 - spec.epsilon;
    // precompute stability rows restricted to free columns, skipping zero rows
    let stab_rows: Vec<(usize, Vec<f64>, f64)> = (0..n_rows)
        .map(|r| {
            let coeffs: Vec<f64> = free.iter().map(|&j| spec.stab_matrix[(r, j)]).collect();
            let norm2: f64 = coeffs.iter().map(|c| c * c).sum();
            (r, coeffs, norm2)
        })
        .filter(|(_, _, norm2)| *norm2 > 0.0)
        .collect();

    let mut result = x.clone();
    for _cycle in 0..DYKSTRA_MAX_CYCLES {
        let x_before = x.clone();
        let mut set_idx = 0;
        // vref box
        {
            let y = &x + &corrections[set_idx];
            let mut projected = y.clone();
            for k in 0..free.len() {
                projected[pos(0, k)] = y[pos(0, k)].clamp(0.95, 1.05);
            }
            corrections[set_idx] = y - &projected;
            x = projected;
            set_idx += 1;
        }
        // per-node polyhedra in (delta, sigma, c)
        for (k, &i) in free.iter().enumerate() {
            let y = &x + &corrections[set_idx];
            let mut projected = y.clone();
            let sol = project_node_polyhedron(
                [y[pos(1, k)], y[pos(2, k)], y[pos(3, k)]],
                spec.qhat[i],
                spec.c_lower[i],
            );
            projected[pos(1, k)] = sol[0];
            projected[pos(2, k)] = sol[1];
            projected[pos(3, k)] = sol[2];
            corrections[set_idx] = y - &projected;
            x = projected;
            set_idx += 1;
        }
        // per-node hyperbolas in (aux, c)
        for k in 0..free.len() {
            let y = &x + &corrections[set_idx];
            let mut projected = y.clone();
            let (a, c) = project_hyperbola(y[pos(4, k)], y[pos(3, k)]);
            projected[pos(4, k)] = a;
            projected[pos(3, k)] = c;
            corrections[set_idx] = y - &projected;
            x = projected;
            set_idx += 1;
        }
        // stability halfspaces over aux
        for (_, coeffs, norm2) in &stab_rows {
            let y = &x + &corrections[set_idx];
            let mut projected = y.clone();
            let lhs: f64 = coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c * y[pos(4, k)])
                .sum();
            if lhs > bound {
                let scale = (lhs - bound) / norm2;
                for (k, c) in coeffs.iter().enumerate() {
                    projected[pos(4, k)] = y[pos(4, k)] - scale * c;
                }
            }
            corrections[set_idx] = y - &projected;
            x = projected;
            set_idx += 1;
        }
        debug_assert_eq!(set_idx, n_sets);

        let change = (&x - &x_before).abs().max();
        result = x.clone();
        // A small change alone is not convergence: Dykstra plateaus while the
        // corrections keep accumulating, then moves again. Stop only once the
        // iterate is also feasible.
        if change < DYKSTRA_TOL {
            let mut probe = point.clone();
            for (k, &i) in free.iter().enumerate() {
                probe.vref[i] = x[pos(0, k)];
                probe.delta[i] = x[pos(1, k)];
                probe.sigma[i] = x[pos(2, k)];
                probe.c[i] = x[pos(3, k)];
                probe.aux[i] = x[pos(4, k)];
            }
            if spec.residual(&probe) <= DYKSTRA_RESIDUAL_TOL {
                break;
            }
        }
    }

    let mut out = point.clone();
    for (k, &i) in free.iter().enumerate() {
        out.vref[i] = result[pos(0, k)];
        out.delta[i] = result[pos(1, k)];
        out.sigma[i] = result[pos(2, k)];
        out.c[i] = result[pos(3, k)];
        out.aux[i] = result[pos(4, k)];
    }
    let residual = spec.residual(&out);
    if residual > PROJ_FEAS_TOL {
        return Err(VoltVarError::Infeasible(format!(
            "projection stalled at residual {residual:.3e}; binding rows: {}",
            spec.binding_rows(&out, PROJ_FEAS_TOL).join("; ")
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub loss_per_epoch: Vec<f64>,
    pub projection_displacement: Vec<f64>,
    #[serde(skip)]
    pub final_params_full: Option<RuleParams>,
    pub final_params: FinalParams,
    pub certificate: StabilityCertificate,
    pub alpha_clamp_events: usize,
    pub optimizer: OptimizerMode,
    pub beta1: f64,
    pub beta2: f64,
    /// Not serialized: varies across runs, which would break report determinism.
    #[serde(skip)]
    pub wall_clock_per_epoch: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalParams {
    pub vref: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub qbar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub qhat: Vec<f64>,
    pub der_mask: Vec<bool>,
}

fn z_to_rules(z: &ZPoint, qhat: &DVector<f64>, mask: &[bool]) -> Result<RuleParams> {
    let n = z.vref.len();
    let slope = DVector::from_fn(n, |i, _| if mask[i] { z.alpha[i] } else { 1.0 });
    RuleParams::from_parameterization(
        Parameterization::VAlphaDeltaSigma,
        z.vref.clone(),
        z.delta.clone(),
        Some(z.sigma.clone()),
        None,
        Some(slope),
        qhat.clone(),
        mask.to_vec(),
    )
}

/// First/second-moment accumulators for the adaptive-moment optimizer.
pub struct MomentState {
    m: DVector<f64>,
    v: DVector<f64>,
    t: usize,
}

fn flatten(g: &Gradient) -> DVector<f64> {
    let n = g.vref.len();
    let mut out = DVector::zeros(4 * n);
    for i in 0..n {
        out[i] = g.vref[i];
        out[n + i] = g.alpha[i];
        out[2 * n + i] = g.delta[i];
        out[3 * n + i] = g.sigma[i];
    }
    out
}

fn z_as_vector(z: &ZPoint) -> DVector<f64> {
    let n = z.vref.len();
    let mut out = DVector::zeros(4 * n);
    for i in 0..n {
        out[i] = z.vref[i];
        out[n + i] = z.alpha[i];
        out[2 * n + i] = z.delta[i];
        out[3 * n + i] = z.sigma[i];
    }
    out
}

fn vector_as_z(v: &DVector<f64>, n: usize) -> ZPoint {
    ZPoint {
        vref: DVector::from_fn(n, |i, _| v[i]),
        alpha: DVector::from_fn(n, |i, _| v[n + i]),
        delta: DVector::from_fn(n, |i, _| v[2 * n + i]),
        sigma: DVector::from_fn(n, |i, _| v[3 * n + i]),
    }
}

/// One PSGD half-step: the gradient move in (vref, alpha, delta, sigma) space,
/// before the transform-project-transform completion.
pub fn sgd_step(
    z: &ZPoint,
    grad: &Gradient,
    config: &TrainConfig,
    moments: &mut Option<MomentState>,
) -> ZPoint {
    let n = z.vref.len();
    let g = flatten(grad);
    let x = z_as_vector(z);
    let stepped = match config.optimizer {
        OptimizerMode::Plain => x - config.step_size * g,
        OptimizerMode::AdaptiveMoment => {
            let state = moments.get_or_insert_with(|| MomentState {
                m: DVector::zeros(4 * n),
                v: DVector::zeros(4 * n),
                t: 0,
            });
            state.t += 1;
            state.m = &state.m * config.beta1 + &g * (1.0 - config.beta1);
            state.v = &state.v * config.beta2 + g.component_mul(&g) * (1.0 - config.beta2);
            let m_hat = &state.m / (1.0 - config.beta1.powi(state.t as i32));
            let v_hat = &state.v / (1.0 - config.beta2.powi(state.t as i32));
            let mut update = DVector::zeros(4 * n);
            for i in 0..4 * n {
                update[i] = config.step_size * m_hat[i] / (v_hat[i].sqrt() + config.moment_floor);
            }
            x - update
        }
    };
    vector_as_z(&stepped, n)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub objective: f64,
    /// Scenario indices that failed to converge and were excluded.
    pub excluded: Vec<usize>,
}

/// Average squared voltage deviation from unity at the converged equilibria,
/// `(1/2S) sum_s ||v*_s - 1||^2`, using the dynamics (not the truncated twin).
pub fn evaluate(model: &FeederModel, params: &RuleParams, scenarios: &[Scenario]) -> Result<EvalResult> {
    if scenarios.is_empty() {
        return Err(VoltVarError::Validation("empty scenario set".into()));
    }
    let results: Vec<(usize, Option<f64>)> = scenarios
        .par_iter()
        .enumerate()
        .map(|(idx, s)| {
            match crate::dynamics::equilibrium_fixed_point(model, params, s, crate::dynamics::DEFAULT_TOL) {
                Ok(r) => {
                    let d = &r.v_star - DVector::from_element(r.v_star.len(), 1.0);
                    (idx, Some(0.5 * d.norm_squared()))
                }
                Err(_) => (idx, None),
            }
        })
        .collect();
    let mut excluded = Vec::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for (idx, value) in results {
        match value {
            Some(v) => {
                total += v;
                count += 1;
            }
            None => excluded.push(idx),
        }
    }
    if count == 0 {
        return Err(VoltVarError::Convergence(
            "no scenario converged during evaluation".into(),
        ));
    }
    Ok(EvalResult {
        objective: total / count as f64,
        excluded,
    })
}

/// Full training loop: epochs of shuffle, batch gradient, optimizer step,
/// transform to c-space, projection, and transform back.
pub fn train(model: &FeederModel, scenarios: &[Scenario], qhat: &DVector<f64>, mask: &[bool], config: &TrainConfig) -> Result<TrainReport> {
    if scenarios.is_empty() {
        return Err(VoltVarError::Validation("no scenarios given".into()));
    }
    if config.step_size < 0.0 {
        return Err(VoltVarError::Validation("step size must be nonnegative".into()));
    }
    if config.batch_size == 0 || config.batch_size > scenarios.len() {
        return Err(VoltVarError::Validation(format!(
            "batch size must lie in 1..={}, got {}",
            scenarios.len(),
            config.batch_size
        )));
    }
    let n = model.n_nodes();
    let spec = FeasibleSetSpec::new(model, config.epsilon, qhat, mask)?;

    // starting point, projected to feasibility before epoch 1
    let mut z = ZPoint {
        vref: DVector::from_element(n, config.init.vref),
        alpha: DVector::from_fn(n, |i, _| if mask[i] { config.init.alpha } else { 0.0 }),
        delta: DVector::from_element(n, config.init.delta),
        sigma: DVector::from_element(n, config.init.sigma),
    };
    let mut aux = DVector::from_fn(n, |i, _| if mask[i] { z.alpha[i] } else { 0.0 });
    let (c0, _) = to_c_space(&z, mask, &aux);
    let projected = project(&c0, &spec)?;
    aux = projected.aux.clone();
    z = from_c_space(&projected, mask);

    let x_norm = spectral_norm(model.reactance_sensitivity());
    let base_depth = min_depth_from_norms(x_norm, qhat.norm(), config.epsilon, config.adaptive_tol)
        .unwrap_or(100)
        .max(5);
    let twin_config = TwinConfig::adaptive(config.adaptive_tol, 10 * base_depth);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut moments: Option<MomentState> = None;
    let mut loss_per_epoch = Vec::with_capacity(config.epochs);
    let mut projection_displacement = Vec::with_capacity(config.epochs);
    let mut wall_clock = Vec::with_capacity(config.epochs);
    let mut clamp_events = 0usize;

    let mut order: Vec<usize> = (0..scenarios.len()).collect();
    for _epoch in 0..config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut displacement = 0.0f64;
        for batch_ids in order.chunks(config.batch_size) {
            let batch: Vec<Scenario> = batch_ids.iter().map(|&i| scenarios[i].clone()).collect();
            let params = z_to_rules(&z, qhat, mask)?;
            let grad = twin::backward(model, &twin_config, &params, &batch)?;
            let stepped = sgd_step(&z, &grad, config, &mut moments);
            let (x_tilde, clamped) = to_c_space(&stepped, mask, &aux);
            if clamped {
                clamp_events += 1;
            }
            let z_tilde = project(&x_tilde, &spec)?;
            let mut moved = 0.0f64;
            for i in 0..n {
                if !mask[i] {
                    continue;
                }
                moved += (x_tilde.vref[i] - z_tilde.vref[i]).powi(2)
                    + (x_tilde.delta[i] - z_tilde.delta[i]).powi(2)
                    + (x_tilde.sigma[i] - z_tilde.sigma[i]).powi(2)
                    + (x_tilde.c[i].min(1e12) - z_tilde.c[i]).powi(2);
            }
            displacement = displacement.max(moved.sqrt());
            debug_assert!(spec.residual(&z_tilde) <= PROJ_FEAS_TOL);
            aux = z_tilde.aux.clone();
            z = from_c_space(&z_tilde, mask);
        }
        // full-set loss at the post-projection iterate
        let params = z_to_rules(&z, qhat, mask)?;
        let outputs: Vec<_> = scenarios
            .par_iter()
            .map(|s| twin::forward(model, &twin_config, &params, s))
            .collect::<Result<_>>()?;
        loss_per_epoch.push(twin::loss(&outputs)?);
        projection_displacement.push(displacement);
        wall_clock.push(started.elapsed().as_secs_f64());
    }

    let final_params = z_to_rules(&z, qhat, mask)?;
    let certificate = spectral_check(
        model.reactance_sensitivity(),
        &final_params.alpha(),
        config.epsilon,
        model.kind(),
    )?;
    let final_summary = FinalParams {
        vref: final_params.vref.iter().copied().collect(),
        delta: final_params.delta.iter().copied().collect(),
        sigma: final_params.sigma.iter().copied().collect(),
        qbar: final_params.qbar.iter().copied().collect(),
        alpha: final_params.alpha().iter().copied().collect(),
        qhat: qhat.iter().copied().collect(),
        der_mask: mask.to_vec(),
    };
    Ok(TrainReport {
        loss_per_epoch,
        projection_displacement,
        final_params_full: Some(final_params),
        final_params: final_summary,
        certificate,
        alpha_clamp_events: clamp_events,
        optimizer: config.optimizer,
        beta1: config.beta1,
        beta2: config.beta2,
        wall_clock_per_epoch: wall_clock,
    })
}
