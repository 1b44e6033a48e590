//! Digital twin of the Volt/VAR dynamics: an unrolled, weight-shared network
//! of four-ReLU building blocks. A forward pass of depth T reproduces T
//! iterations of the dynamics; the backward pass yields exact analytic
//! gradients of the training loss with respect to (vref, alpha, delta, sigma).

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Result, VoltVarError};
use crate::feeder::{FeederModel, Scenario};
use crate::rules::RuleParams;

#[derive(Debug, Clone, Copy)]
pub enum DepthMode {
    Fixed(usize),
    /// Stop once the per-scenario objective changes by less than `tol`
    /// between consecutive layers, capped at `max_depth`.
    Adaptive { tol: f64, max_depth: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct TwinConfig {
    pub depth: DepthMode,
}

impl TwinConfig {
    pub fn fixed(depth: usize) -> Self {
        TwinConfig {
            depth: DepthMode::Fixed(depth),
        }
    }

    pub fn adaptive(tol: f64, max_depth: usize) -> Self {
        TwinConfig {
            depth: DepthMode::Adaptive { tol, max_depth },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwinOutput {
    pub v_out: DVector<f64>,
    pub q_out: DVector<f64>,
    pub layers_used: usize,
    /// Layer inputs v^0..v^{L-1}, kept for the backward pass.
    layer_inputs: Vec<DVector<f64>>,
}

/// Gradient of the loss with respect to the trainable parameterization
/// (vref, alpha, delta, sigma); 4N components.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub vref: DVector<f64>,
    pub alpha: DVector<f64>,
    pub delta: DVector<f64>,
    pub sigma: DVector<f64>,
}

impl Gradient {
    fn zeros(n: usize) -> Self {
        Gradient {
            vref: DVector::zeros(n),
            alpha: DVector::zeros(n),
            delta: DVector::zeros(n),
            sigma: DVector::zeros(n),
        }
    }

    fn add_assign(&mut self, other: &Gradient) {
        self.vref += &other.vref;
        self.alpha += &other.alpha;
        self.delta += &other.delta;
        self.sigma += &other.sigma;
    }

    fn scale(&mut self, s: f64) {
        self.vref *= s;
        self.alpha *= s;
        self.delta *= s;
        self.sigma *= s;
    }

    pub fn max_abs(&self) -> f64 {
        self.vref
            .abs()
            .max()
            .max(self.alpha.abs().max())
            .max(self.delta.abs().max())
            .max(self.sigma.abs().max())
    }
}

fn ramp(x: f64) -> f64 {
    x.max(0.0)
}

/// Derivative convention: the ReLU subgradient at exactly zero input is 0.
fn active(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// One building block: the Volt/VAR curve as a superposition of four ReLUs
/// with hidden weights [1, 1, -1, -1], trainable biases
/// [-(vref+delta), -(vref+sigma), vref-delta, vref-sigma], and output weights
/// [-alpha, alpha, alpha, -alpha].
pub fn block_forward(vref: f64, alpha: f64, delta: f64, sigma: f64, v: f64) -> f64 {
    -alpha * ramp(v - (vref + delta)) + alpha * ramp(v - (vref + sigma))
        + alpha * ramp((vref - delta) - v)
        - alpha * ramp((vref - sigma) - v)
}

struct BlockGrads {
    dq_dv: f64,
    dq_dvref: f64,
    dq_dalpha: f64,
    dq_ddelta: f64,
    dq_dsigma: f64,
}

fn block_grads(vref: f64, alpha: f64, delta: f64, sigma: f64, v: f64) -> BlockGrads {
    let a1 = v - (vref + delta);
    let a2 = v - (vref + sigma);
    let a3 = (vref - delta) - v;
    let a4 = (vref - sigma) - v;
    let (s1, s2, s3, s4) = (active(a1), active(a2), active(a3), active(a4));
    let dq_dv = alpha * (-s1 + s2 - s3 + s4);
    BlockGrads {
        dq_dv,
        dq_dvref: -dq_dv,
        dq_dalpha: -ramp(a1) + ramp(a2) + ramp(a3) - ramp(a4),
        dq_ddelta: alpha * (s1 - s3),
        dq_dsigma: alpha * (-s2 + s4),
    }
}

fn layer_objective(v: &DVector<f64>) -> f64 {
    let mut sum = 0.0;
    for &vi in v.iter() {
        let d = vi - 1.0;
        sum += d * d;
    }
    0.5 * sum
}

/// Forward pass: layer t applies the building blocks to v^t and the skip
/// connection v^{t+1} = X q^{t+1} + vtilde.
pub fn forward(
    model: &FeederModel,
    config: &TwinConfig,
    params: &RuleParams,
    scenario: &Scenario,
) -> Result<TwinOutput> {
    let n = model.n_nodes();
    if params.n_nodes() != n || scenario.vtilde.len() != n {
        return Err(VoltVarError::Dimension(format!(
            "model has {n} nodes, rules {} and scenario {}",
            params.n_nodes(),
            scenario.vtilde.len()
        )));
    }
    let alpha = params.alpha();
    let (max_layers, adaptive_tol) = match config.depth {
        DepthMode::Fixed(t) => {
            if t == 0 {
                return Err(VoltVarError::Validation("twin depth must be >= 1".into()));
            }
            (t, None)
        }
        DepthMode::Adaptive { tol, max_depth } => {
            if tol <= 0.0 {
                return Err(VoltVarError::Validation(
                    "adaptive depth requires a positive tolerance".into(),
                ));
            }
            (max_depth.max(1), Some(tol))
        }
    };

    let mut v = scenario.vtilde.clone();
    let mut q = DVector::zeros(n);
    let mut layer_inputs = Vec::with_capacity(max_layers.min(1024));
    let mut objective = layer_objective(&v);
    let mut layers_used = 0;
    for _ in 0..max_layers {
        layer_inputs.push(v.clone());
        for i in 0..n {
            q[i] = if params.der_mask[i] {
                block_forward(params.vref[i], alpha[i], params.delta[i], params.sigma[i], v[i])
            } else {
                0.0
            };
        }
        v = model.reactance_sensitivity() * &q + &scenario.vtilde;
        layers_used += 1;
        if let Some(tol) = adaptive_tol {
            let next_objective = layer_objective(&v);
            let settled = (next_objective - objective).abs() < tol;
            objective = next_objective;
            if settled {
                break;
            }
        }
    }
    Ok(TwinOutput {
        v_out: v,
        q_out: q,
        layers_used,
        layer_inputs,
    })
}

/// Training loss: mean over scenarios of half the squared distance of the
/// output voltages from the all-ones vector.
pub fn loss(outputs: &[TwinOutput]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(VoltVarError::Validation("empty scenario set".into()));
    }
    let total: f64 = outputs.iter().map(|o| layer_objective(&o.v_out)).sum();
    Ok(total / outputs.len() as f64)
}

fn backward_single(
    model: &FeederModel,
    params: &RuleParams,
    alpha: &DVector<f64>,
    output: &TwinOutput,
) -> Gradient {
    let n = model.n_nodes();
    let x = model.reactance_sensitivity();
    let mut grad = Gradient::zeros(n);
    // d(loss)/d(v^L)
    let mut g = &output.v_out - DVector::from_element(n, 1.0);
    for v in output.layer_inputs.iter().rev() {
        // d(loss)/d(q^{t+1}) through the skip-connected layer output
        let u = x.transpose() * &g;
        let mut gv = DVector::zeros(n);
        for i in 0..n {
            if !params.der_mask[i] {
                continue;
            }
            let b = block_grads(params.vref[i], alpha[i], params.delta[i], params.sigma[i], v[i]);
            grad.vref[i] += u[i] * b.dq_dvref;
            grad.alpha[i] += u[i] * b.dq_dalpha;
            grad.delta[i] += u[i] * b.dq_ddelta;
            grad.sigma[i] += u[i] * b.dq_dsigma;
            gv[i] = b.dq_dv * u[i];
        }
        g = gv;
    }
    grad
}

/// Gradient of the batch loss `(1/2B) sum_s ||v_out_s - 1||^2` with respect to
/// the shared parameters. Per-scenario passes run in parallel; the reduction
/// order is fixed for reproducibility.
pub fn backward(
    model: &FeederModel,
    config: &TwinConfig,
    params: &RuleParams,
    batch: &[Scenario],
) -> Result<Gradient> {
    if batch.is_empty() {
        return Err(VoltVarError::Validation("empty batch".into()));
    }
    let alpha = params.alpha();
    let per_scenario: Vec<Gradient> = batch
        .par_iter()
        .map(|s| {
            let out = forward(model, config, params, s)?;
            Ok(backward_single(model, params, &alpha, &out))
        })
        .collect::<Result<_>>()?;
    let mut grad = Gradient::zeros(model.n_nodes());
    for g in &per_scenario {
        grad.add_assign(g);
    }
    grad.scale(1.0 / batch.len() as f64);
    Ok(grad)
}
