//! Independent verification: KKT residuals of the inner program, big-M
//! complementarity encodings, exact region-enumeration equilibria for tiny
//! feeders, and an exhaustive grid-search design oracle.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{self, EquilibriumMethod, EquilibriumResult};
use crate::error::{Result, VoltVarError};
use crate::feeder::{FeederKind, FeederModel, Scenario};
use crate::rules::RuleParams;
use crate::stability::{polytopic_check_1p, polytopic_check_3p};

/// Classification tolerance when reading the active region off a setpoint.
const REGION_CLS_TOL: f64 = 1e-9;
/// Boundary-membership tolerance for region-consistency checks.
const BOUNDARY_TOL: f64 = 1e-10;
/// Complementarity activity threshold for the big-M binary assignment.
const ACTIVE_TOL: f64 = 1e-7;

/// Primal/dual point of the differentiable inner program: setpoints q, the
/// absolute-value lift w, and the four dual vectors for the box rows.
#[derive(Debug, Clone, Serialize)]
pub struct KKTPoint {
    pub q: Vec<f64>,
    pub w: Vec<f64>,
    pub lambda_lo: Vec<f64>,
    pub lambda_hi: Vec<f64>,
    pub mu_lo: Vec<f64>,
    pub mu_hi: Vec<f64>,
}

/// Big-M constants for the complementarity encodings: a scalar dual bound M1
/// and per-node primal bounds M2 = 2 qbar.
#[derive(Debug, Clone, Serialize)]
pub struct BigMSpec {
    pub m1: f64,
    pub m2: Vec<f64>,
}

impl BigMSpec {
    pub fn new(m1: f64, params: &RuleParams) -> Self {
        BigMSpec {
            m1,
            m2: params.qbar.iter().map(|&q| 2.0 * q).collect(),
        }
    }

    /// Calibrate M1 by sweeping the scenarios, reading the duals at each
    /// converged equilibrium, and taking twice the maximum plus one.
    pub fn calibrate(
        model: &FeederModel,
        params: &RuleParams,
        scenarios: &[Scenario],
    ) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(VoltVarError::Validation("empty calibration sweep".into()));
        }
        let mut max_dual = 0.0f64;
        for s in scenarios {
            let eq = dynamics::equilibrium_fixed_point(model, params, s, dynamics::DEFAULT_TOL)?;
            let (_, point) = kkt_residual(model, params, s, &eq.q_star)?;
            for v in point
                .lambda_lo
                .iter()
                .chain(&point.lambda_hi)
                .chain(&point.mu_lo)
                .chain(&point.mu_hi)
            {
                max_dual = max_dual.max(*v);
            }
        }
        Ok(BigMSpec::new(2.0 * (max_dual + 1.0), params))
    }
}

/// Evaluate the optimality conditions of the inner program at `q`: duals are
/// reconstructed analytically from the active region of each coordinate, and
/// the returned scalar is the max-norm violation over all condition rows.
/// A large residual is a verdict, not an error.
pub fn kkt_residual(
    model: &FeederModel,
    params: &RuleParams,
    scenario: &Scenario,
    q: &DVector<f64>,
) -> Result<(f64, KKTPoint)> {
    if model.kind() != FeederKind::SinglePhase {
        return Err(VoltVarError::Kind(
            "the inner program and its KKT system exist only for single-phase feeders".into(),
        ));
    }
    let n = model.n_nodes();
    if q.len() != n || params.n_nodes() != n || scenario.vtilde.len() != n {
        return Err(VoltVarError::Dimension(
            "q, rules, and scenario must all match the model size".into(),
        ));
    }
    let x = model.reactance_sensitivity();
    let c = params.c()?;
    // gradient of the smooth part: (X + diag(c)) q + vtilde - vref
    let mut grad = x * q + (&scenario.vtilde - &params.vref);
    for i in 0..n {
        if params.der_mask[i] {
            grad[i] += c[i] * q[i];
        }
    }

    let mut residual = 0.0f64;
    let mut lambda_lo = vec![0.0; n];
    let mut lambda_hi = vec![0.0; n];
    let mut mu_lo = vec![0.0; n];
    let mut mu_hi = vec![0.0; n];
    let mut w = vec![0.0; n];

    for i in 0..n {
        if !params.der_mask[i] {
            // DER-less node: q must be 0 and carries no condition rows
            residual = residual.max(q[i].abs());
            continue;
        }
        let g = grad[i];
        let d = params.delta[i];
        let qb = params.qbar[i];
        w[i] = q[i].abs();
        residual = residual.max(q[i].abs() - qb); // primal feasibility

        if qb <= REGION_CLS_TOL {
            // both saturation rows active; mu_lo - mu_hi absorbs any gradient
            let net = -g - d;
            if net >= 0.0 {
                mu_hi[i] = net;
            } else {
                mu_lo[i] = -g + d;
                mu_hi[i] = d + d; // keeps delta = lambda_lo + lambda_hi with lambda_hi = d
            }
            lambda_hi[i] = d;
            continue;
        }
        if q[i] >= qb - REGION_CLS_TOL {
            // saturated high: q = qbar > 0, w = q, lambda_hi = delta
            lambda_hi[i] = d;
            let mu = -g - d;
            mu_hi[i] = mu.max(0.0);
            residual = residual.max(-mu); // dual feasibility violation if mu < 0
        } else if q[i] <= -qb + REGION_CLS_TOL {
            lambda_lo[i] = d;
            let mu = g - d;
            mu_lo[i] = mu.max(0.0);
            residual = residual.max(-mu);
        } else if q[i] > REGION_CLS_TOL {
            // positive affine segment: stationarity requires g + delta = 0
            lambda_hi[i] = d;
            residual = residual.max((g + d).abs());
        } else if q[i] < -REGION_CLS_TOL {
            lambda_lo[i] = d;
            residual = residual.max((g - d).abs());
        } else {
            // deadband: both |q| rows active, duals split the gradient
            let lo = 0.5 * (d + g);
            let hi = 0.5 * (d - g);
            lambda_lo[i] = lo.max(0.0);
            lambda_hi[i] = hi.max(0.0);
            residual = residual.max((-lo).max(-hi)); // requires |g| <= delta
        }
    }

    Ok((
        residual.max(0.0),
        KKTPoint {
            q: q.iter().copied().collect(),
            w,
            lambda_lo,
            lambda_hi,
            mu_lo,
            mu_hi,
        },
    ))
}

/// Per-node region assignment of the piecewise-linear rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    /// v <= vref - sigma, q = +qbar
    SaturatedHigh,
    /// vref - sigma <= v <= vref - delta
    AffineLow,
    /// |v - vref| <= delta, q = 0
    Deadband,
    /// vref + delta <= v <= vref + sigma
    AffineHigh,
    /// v >= vref + sigma, q = -qbar
    SaturatedLow,
}

const REGIONS: [Region; 5] = [
    Region::SaturatedHigh,
    Region::AffineLow,
    Region::Deadband,
    Region::AffineHigh,
    Region::SaturatedLow,
];

fn region_consistent(region: Region, v: f64, vref: f64, delta: f64, sigma: f64) -> bool {
    let t = BOUNDARY_TOL;
    match region {
        Region::SaturatedHigh => v <= vref - sigma + t,
        Region::AffineLow => (vref - sigma - t..=vref - delta + t).contains(&v),
        Region::Deadband => (v - vref).abs() <= delta + t,
        Region::AffineHigh => (vref + delta - t..=vref + sigma + t).contains(&v),
        Region::SaturatedLow => v >= vref + sigma - t,
    }
}

/// Solve the linear system induced by one region assignment; `None` when the
/// assignment is inconsistent with its own solution.
fn solve_assignment(
    model: &FeederModel,
    params: &RuleParams,
    scenario: &Scenario,
    ders: &[usize],
    assignment: &[Region],
) -> Option<DVector<f64>> {
    let n = model.n_nodes();
    let x = model.reactance_sensitivity();
    let alpha = params.alpha();

    // fixed setpoints from saturated/deadband regions (DER-less nodes stay 0)
    let mut q = DVector::zeros(n);
    let mut affine: Vec<usize> = Vec::new();
    for (k, &i) in ders.iter().enumerate() {
        match assignment[k] {
            Region::SaturatedHigh => q[i] = params.qbar[i],
            Region::SaturatedLow => q[i] = -params.qbar[i],
            Region::Deadband => q[i] = 0.0,
            Region::AffineLow | Region::AffineHigh => affine.push(k),
        }
    }
    if !affine.is_empty() {
        // q_A = -diag(alpha_A) (X_AA q_A + X_AF q_F + vtilde_A - vref_A -/+ delta_A)
        let m = affine.len();
        let mut a_mat = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for (r, &ka) in affine.iter().enumerate() {
            let i = ders[ka];
            let sign = if assignment[ka] == Region::AffineLow { 1.0 } else { -1.0 };
            let mut fixed_term = scenario.vtilde[i] - params.vref[i] + sign * params.delta[i];
            for j in 0..n {
                if !affine.iter().any(|&kb| ders[kb] == j) {
                    fixed_term += x[(i, j)] * q[j];
                }
            }
            rhs[r] = -alpha[i] * fixed_term;
            for (col, &kb) in affine.iter().enumerate() {
                let j = ders[kb];
                a_mat[(r, col)] = alpha[i] * x[(i, j)] + if r == col { 1.0 } else { 0.0 };
            }
        }
        let q_a = a_mat.lu().solve(&rhs)?;
        for (r, &ka) in affine.iter().enumerate() {
            q[ders[ka]] = q_a[r];
        }
    }

    let v = x * &q + &scenario.vtilde;
    for (k, &i) in ders.iter().enumerate() {
        if !region_consistent(
            assignment[k],
            v[i],
            params.vref[i],
            params.delta[i],
            params.sigma[i],
        ) {
            return None;
        }
    }
    Some(q)
}

/// All region-consistent assignments and their setpoints, for uniqueness
/// checks. Assignments touching a boundary can duplicate; the setpoints agree.
pub fn enumerate_assignments(
    model: &FeederModel,
    params: &RuleParams,
    scenario: &Scenario,
) -> Result<Vec<(Vec<Region>, DVector<f64>)>> {
    if model.kind() != FeederKind::SinglePhase {
        return Err(VoltVarError::Kind(
            "region enumeration is defined for single-phase feeders".into(),
        ));
    }
    let ders: Vec<usize> = (0..model.n_nodes())
        .filter(|&i| params.der_mask[i])
        .collect();
    if ders.len() > 6 {
        return Err(VoltVarError::Validation(format!(
            "region enumeration is exponential; {} DERs exceeds the limit of 6",
            ders.len()
        )));
    }
    let total = 5usize.pow(ders.len() as u32);
    let found: Vec<(Vec<Region>, DVector<f64>)> = (0..total)
        .into_par_iter()
        .filter_map(|code| {
            let mut assignment = Vec::with_capacity(ders.len());
            let mut rest = code;
            for _ in 0..ders.len() {
                assignment.push(REGIONS[rest % 5]);
                rest /= 5;
            }
            solve_assignment(model, params, scenario, &ders, &assignment)
                .map(|q| (assignment, q))
        })
        .collect();
    Ok(found)
}

/// Exact equilibrium by enumerating per-node region assignments (N <= 6
/// DERs). All consistent assignments must agree on the setpoints; boundary
/// cases where they disagree are reported as ambiguity.
pub fn enumerate_equilibrium(
    model: &FeederModel,
    params: &RuleParams,
    scenario: &Scenario,
) -> Result<EquilibriumResult> {
    let found = enumerate_assignments(model, params, scenario)?;
    let Some((_, q)) = found.first() else {
        return Err(VoltVarError::Degenerate(
            "no region-consistent assignment found; the equilibrium sits on a region boundary \
             beyond the consistency tolerance"
                .into(),
        ));
    };
    for (assignment, other) in &found[1..] {
        if (other - q).abs().max() > 1e-9 {
            return Err(VoltVarError::Degenerate(format!(
                "boundary ambiguity: assignments disagree on the setpoints \
                 (max gap {:.3e}, second assignment {:?})",
                (other - q).abs().max(),
                assignment
            )));
        }
    }
    let mut result = dynamics::finish(
        model,
        params,
        scenario,
        q.clone(),
        EquilibriumMethod::RegionEnumeration,
        None,
    )?;
    let (res, _) = kkt_residual(model, params, scenario, &result.q_star)?;
    result.kkt_residual = Some(res);
    Ok(result)
}

/// Outcome of the big-M witness search for one complementarity family.
#[derive(Debug, Clone, Serialize)]
pub struct BigMWitness {
    pub pass: bool,
    /// Binary assignments for the four pairs, in order:
    /// (lambda_hi, w - q), (lambda_lo, w + q), (mu_hi, qbar - q), (mu_lo, qbar + q).
    pub binaries: [Vec<bool>; 4],
    pub ieee_box_pass: bool,
    /// Human-readable reasons for a failing verdict.
    pub failures: Vec<String>,
}

/// Check that a binary witness exists for all four big-M encodings of the
/// complementary slackness rows at `point`, and that (c, qbar, delta) satisfy
/// the transformed IEEE constraint `0.02 <= c*qbar <= 0.18 - delta`.
///
/// The primal slack of each pair is written nonnegative (w - q, w + q,
/// qbar - q, qbar + q); the bound `0 <= slack <= M2 (1 - b)` then holds with
/// M2 = 2 qbar.
pub fn check_bigm(
    model: &FeederModel,
    params: &RuleParams,
    _scenario: &Scenario,
    point: &KKTPoint,
    spec: &BigMSpec,
) -> Result<BigMWitness> {
    let n = model.n_nodes();
    if point.q.len() != n {
        return Err(VoltVarError::Dimension("KKT point size mismatch".into()));
    }
    let mut binaries: [Vec<bool>; 4] = [vec![false; n].clone(), vec![false; n], vec![false; n], vec![false; n]];
    let mut failures = Vec::new();

    let pairs: [(&[f64], Box<dyn Fn(usize) -> f64>, &str); 4] = [
        (&point.lambda_hi, Box::new(|i| point.w[i] - point.q[i]), "lambda_hi/(w-q)"),
        (&point.lambda_lo, Box::new(|i| point.w[i] + point.q[i]), "lambda_lo/(w+q)"),
        (&point.mu_hi, Box::new(|i| params.qbar[i] - point.q[i]), "mu_hi/(qbar-q)"),
        (&point.mu_lo, Box::new(|i| params.qbar[i] + point.q[i]), "mu_lo/(qbar+q)"),
    ];
    for (p, (duals, slack, name)) in pairs.iter().enumerate() {
        for i in 0..n {
            if !params.der_mask[i] {
                continue;
            }
            let dual = duals[i];
            let s = slack(i);
            // choose b = 1 when the dual is active, else 0
            let b = dual > ACTIVE_TOL;
            binaries[p][i] = b;
            if dual < -ACTIVE_TOL || s < -ACTIVE_TOL {
                failures.push(format!("node {}: {name} has a negative entry", i + 1));
                continue;
            }
            let dual_cap = if b { spec.m1 } else { 0.0 };
            let slack_cap = if b { 0.0 } else { spec.m2[i] };
            if dual > dual_cap + ACTIVE_TOL {
                failures.push(format!(
                    "node {}: {name} dual {dual:.3e} exceeds M1 bound {dual_cap:.3e}",
                    i + 1
                ));
            }
            if s > slack_cap + ACTIVE_TOL {
                failures.push(format!(
                    "node {}: {name} slack {s:.3e} exceeds M2 bound {slack_cap:.3e}",
                    i + 1
                ));
            }
        }
    }

    let mut ieee_box_pass = true;
    let c = params.c()?;
    for i in 0..n {
        if !params.der_mask[i] {
            continue;
        }
        let cq = c[i] * params.qbar[i];
        if cq < 0.02 - 1e-12 || cq > 0.18 - params.delta[i] + 1e-12 {
            ieee_box_pass = false;
            failures.push(format!(
                "node {}: c*qbar = {cq:.4} outside [0.02, 0.18 - delta]",
                i + 1
            ));
        }
    }

    Ok(BigMWitness {
        pass: failures.is_empty(),
        binaries,
        ieee_box_pass,
        failures,
    })
}

/// Candidate axes for the grid-search oracle; the cartesian product of the
/// four axes is instantiated at every DER node.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub vref: Vec<f64>,
    pub delta: Vec<f64>,
    pub sigma: Vec<f64>,
    /// qbar as a fraction of the node capability qhat.
    pub qbar_frac: Vec<f64>,
}

impl GridSpec {
    /// Evenly spaced axes inside the IEEE box.
    pub fn uniform(n_vref: usize, n_delta: usize, n_sigma: usize, n_qbar: usize) -> Self {
        let lin = |lo: f64, hi: f64, k: usize| -> Vec<f64> {
            if k <= 1 {
                vec![0.5 * (lo + hi)]
            } else {
                (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
            }
        };
        GridSpec {
            vref: lin(0.95, 1.05, n_vref),
            delta: lin(0.0, 0.03, n_delta),
            sigma: lin(0.02, 0.18, n_sigma),
            qbar_frac: lin(0.1, 1.0, n_qbar),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridRecord {
    /// Per-DER (vref, delta, sigma, qbar), flattened in node order.
    pub values: Vec<f64>,
    /// None when the candidate was infeasible or failed to converge.
    pub objective: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best_params: RuleParams,
    pub best_objective: f64,
    pub evaluated: Vec<GridRecord>,
    pub feasible_count: usize,
}

/// Exhaustive design oracle: evaluate the outer objective at every feasible
/// grid candidate via converged equilibria and return the minimizer. Ties are
/// broken by the first candidate in enumeration order (lexicographic in the
/// axis indices).
pub fn grid_search_ord(
    model: &FeederModel,
    scenarios: &[Scenario],
    epsilon: f64,
    qhat: &DVector<f64>,
    mask: &[bool],
    grid: &GridSpec,
) -> Result<GridSearchResult> {
    if scenarios.is_empty() {
        return Err(VoltVarError::Validation("empty scenario set".into()));
    }
    let ders: Vec<usize> = (0..model.n_nodes()).filter(|&i| mask[i]).collect();
    if ders.is_empty() || ders.len() > 2 {
        return Err(VoltVarError::Validation(format!(
            "grid search covers 1 or 2 DERs, got {}",
            ders.len()
        )));
    }
    let per_node = grid.vref.len() * grid.delta.len() * grid.sigma.len() * grid.qbar_frac.len();
    let total = per_node.pow(ders.len() as u32);
    if total == 0 || total > 1_000_000 {
        return Err(VoltVarError::Validation(format!(
            "grid has {total} candidates; the oracle handles 1..=1_000_000"
        )));
    }

    let decode = |mut code: usize| -> Vec<(f64, f64, f64, f64)> {
        let mut out = Vec::with_capacity(ders.len());
        for _ in 0..ders.len() {
            let node_code = code % per_node;
            code /= per_node;
            let iv = node_code % grid.vref.len();
            let rest = node_code / grid.vref.len();
            let id = rest % grid.delta.len();
            let rest = rest / grid.delta.len();
            let is = rest % grid.sigma.len();
            let iq = rest / grid.sigma.len();
            out.push((grid.vref[iv], grid.delta[id], grid.sigma[is], grid.qbar_frac[iq]));
        }
        out
    };

    let build = |choice: &[(f64, f64, f64, f64)]| -> Option<RuleParams> {
        let n = model.n_nodes();
        let mut vref = DVector::from_element(n, 1.0);
        let mut delta = DVector::from_element(n, 0.02);
        let mut sigma = DVector::from_element(n, 0.08);
        let mut qbar = DVector::zeros(n);
        for (k, &i) in ders.iter().enumerate() {
            let (v, d, s, f) = choice[k];
            vref[i] = v;
            delta[i] = d;
            sigma[i] = s;
            qbar[i] = f * qhat[i];
        }
        let params = RuleParams::new(vref, delta, sigma, qbar, qhat.clone(), mask.to_vec()).ok()?;
        if !params.is_valid() {
            return None;
        }
        let alpha = params.alpha();
        let stable = match model.kind() {
            FeederKind::SinglePhase => {
                polytopic_check_1p(model.reactance_sensitivity(), &alpha, epsilon).ok()?
            }
            FeederKind::Multiphase => {
                polytopic_check_3p(model.reactance_sensitivity(), &alpha, epsilon)
            }
        };
        stable.then_some(params)
    };

    let evaluated: Vec<GridRecord> = (0..total)
        .into_par_iter()
        .map(|code| {
            let choice = decode(code);
            let values: Vec<f64> = choice
                .iter()
                .zip(&ders)
                .flat_map(|(&(v, d, s, f), &i)| [v, d, s, f * qhat[i]])
                .collect();
            let objective = build(&choice).and_then(|params| {
                let mut total_obj = 0.0;
                for s in scenarios {
                    let eq = dynamics::equilibrium_fixed_point(
                        model,
                        &params,
                        s,
                        dynamics::DEFAULT_TOL,
                    )
                    .ok()?;
                    let d = &eq.v_star - DVector::from_element(eq.v_star.len(), 1.0);
                    total_obj += 0.5 * d.norm_squared();
                }
                Some(total_obj / scenarios.len() as f64)
            });
            GridRecord { values, objective }
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    let mut feasible_count = 0;
    for (code, rec) in evaluated.iter().enumerate() {
        if let Some(obj) = rec.objective {
            feasible_count += 1;
            if best.map(|(_, b)| obj < b).unwrap_or(true) {
                best = Some((code, obj));
            }
        }
    }
    let Some((best_code, best_objective)) = best else {
        return Err(VoltVarError::Infeasible(
            "every grid candidate violates the parameter box or the polytopic stability rows; \
             widen the grid or lower epsilon"
                .into(),
        ));
    };
    let best_params = build(&decode(best_code)).expect("winning candidate rebuilds");
    Ok(GridSearchResult {
        best_params,
        best_objective,
        evaluated,
        feasible_count,
    })
}

/// Plain-text algebraic listing of the MINLP instance (variables, bounds,
/// bilinear terms, binaries) for optional external solving.
pub fn export_minlp(
    model: &FeederModel,
    scenarios: &[Scenario],
    qhat: &DVector<f64>,
    mask: &[bool],
    epsilon: f64,
    bigm: &BigMSpec,
) -> String {
    let n = model.n_nodes();
    let x = model.reactance_sensitivity();
    let mut out = String::new();
    let mut push = |line: &str| {
        out.push_str(line);
        out.push('\n');
    };
    push("# optimal rule design as a mixed-integer nonlinear program");
    push(&format!("# nodes: {n}, scenarios: {}, epsilon: {epsilon}", scenarios.len()));
    push("");
    push("variables:");
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let node = i + 1;
        push(&format!("  vref_{node} in [0.95, 1.05]"));
        push(&format!("  c_{node} >= 0"));
        push(&format!("  delta_{node} in [0, 0.03]"));
        push(&format!("  qbar_{node} in [0, {}]", qhat[i]));
    }
    for s in 0..scenarios.len() {
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let node = i + 1;
            push(&format!("  q_{node}_s{s} free, w_{node}_s{s} >= 0"));
            push(&format!(
                "  lamlo_{node}_s{s}, lamhi_{node}_s{s}, mulo_{node}_s{s}, muhi_{node}_s{s} >= 0"
            ));
            push(&format!(
                "  b1_{node}_s{s}, b2_{node}_s{s}, b3_{node}_s{s}, b4_{node}_s{s} binary"
            ));
        }
    }
    push("");
    push("minimize:");
    push(&format!(
        "  (1/(2*{S})) * sum_s || X q_s + vtilde_s - 1 ||^2",
        S = scenarios.len()
    ));
    push("");
    push("subject to:");
    push("  # transformed IEEE box (bilinear in c and qbar)");
    for i in 0..n {
        if mask[i] {
            let node = i + 1;
            push(&format!(
                "  0.02 <= c_{node} * qbar_{node} <= 0.18 - delta_{node}"
            ));
        }
    }
    push("  # polytopic stability rows in c");
    for i in 0..n {
        if mask[i] {
            let row_sum: f64 = x.row(i).iter().map(|e| e.abs()).sum();
            push(&format!(
                "  c_{node} >= {lb}",
                node = i + 1,
                lb = row_sum / (1.0 - epsilon)
            ));
        }
    }
    push("  # per-scenario KKT stationarity (bilinear in c and q)");
    push("  (X + diag(c)) q_s + vtilde_s - vref - lamlo_s + lamhi_s - mulo_s + muhi_s = 0");
    push("  delta - lamlo_s - lamhi_s = 0");
    push("  -w_s <= q_s <= w_s,  -qbar <= q_s <= qbar");
    push("  # complementarity via big-M (slacks written nonnegative)");
    push(&format!("  0 <= lamhi_s <= {m1} * b1_s,  0 <= w_s - q_s <= M2 * (1 - b1_s)", m1 = bigm.m1));
    push(&format!("  0 <= lamlo_s <= {m1} * b2_s,  0 <= w_s + q_s <= M2 * (1 - b2_s)", m1 = bigm.m1));
    push(&format!("  0 <= muhi_s <= {m1} * b3_s,  0 <= qbar - q_s <= M2 * (1 - b3_s)", m1 = bigm.m1));
    push(&format!("  0 <= mulo_s <= {m1} * b4_s,  0 <= qbar + q_s <= M2 * (1 - b4_s)", m1 = bigm.m1));
    push(&format!("  # with per-node M2 = 2 qbar: {:?}", bigm.m2));
    out
}
