//! IEEE 1547 Volt/VAR curves: evaluation, standard-bound validation, and the
//! equivalent four-degree-of-freedom parameterizations.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltVarError};

/// Which four of the five quantities (vref, delta, sigma, qbar, alpha/c) are
/// treated as the primary degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    /// (vref, delta, sigma, qbar)
    #[serde(rename = "vref-delta-sigma-qbar")]
    VDeltaSigmaQbar,
    /// (vref, alpha, delta, qbar)
    #[serde(rename = "vref-alpha-delta-qbar")]
    VAlphaDeltaQbar,
    /// (vref, alpha, delta, sigma)
    #[serde(rename = "vref-alpha-delta-sigma")]
    VAlphaDeltaSigma,
    /// (vref, c, delta, sigma) with c = 1/alpha
    #[serde(rename = "vref-c-delta-sigma")]
    VCDeltaSigma,
    /// (vref, c, delta, qbar)
    #[serde(rename = "vref-c-delta-qbar")]
    VCDeltaQbar,
}

/// Per-node Volt/VAR curve parameters. Quantities are stored canonically as
/// (vref, delta, sigma, qbar) plus capability qhat and the DER mask; slope
/// alpha = qbar / (sigma - delta) and c = 1/alpha are derived.
#[derive(Debug, Clone)]
pub struct RuleParams {
    pub vref: DVector<f64>,
    pub delta: DVector<f64>,
    pub sigma: DVector<f64>,
    pub qbar: DVector<f64>,
    pub qhat: DVector<f64>,
    /// true where a DER provides reactive control; other nodes always emit 0
    pub der_mask: Vec<bool>,
    pub parameterization: Parameterization,
}

/// One violated bound of the IEEE 1547 parameter box.
#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub node: usize,
    pub constraint: String,
    pub margin: f64,
}

#[derive(Serialize, Deserialize)]
struct RuleFile {
    parameterization: Parameterization,
    vref: Vec<f64>,
    #[serde(default)]
    delta: Vec<f64>,
    #[serde(default)]
    sigma: Option<Vec<f64>>,
    #[serde(default)]
    qbar: Option<Vec<f64>>,
    #[serde(default)]
    alpha: Option<Vec<f64>>,
    #[serde(default)]
    c: Option<Vec<f64>>,
    qhat: Vec<f64>,
    #[serde(default)]
    der_mask: Option<Vec<bool>>,
}

impl RuleParams {
    /// Construct from the canonical parameterization (vref, delta, sigma, qbar).
    pub fn new(
        vref: DVector<f64>,
        delta: DVector<f64>,
        sigma: DVector<f64>,
        qbar: DVector<f64>,
        qhat: DVector<f64>,
        der_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = vref.len();
        for (name, len) in [
            ("delta", delta.len()),
            ("sigma", sigma.len()),
            ("qbar", qbar.len()),
            ("qhat", qhat.len()),
            ("der_mask", der_mask.len()),
        ] {
            if len != n {
                return Err(VoltVarError::Dimension(format!(
                    "{name} has length {len}, expected {n}"
                )));
            }
        }
        for i in 0..n {
            if der_mask[i] && sigma[i] <= delta[i] {
                return Err(VoltVarError::Degenerate(format!(
                    "node {}: sigma ({}) must exceed delta ({})",
                    i + 1,
                    sigma[i],
                    delta[i]
                )));
            }
        }
        Ok(RuleParams {
            vref,
            delta,
            sigma,
            qbar,
            qhat,
            der_mask,
            parameterization: Parameterization::VDeltaSigmaQbar,
        })
    }

    /// Construct from any of the equivalent parameterizations, deriving the
    /// missing quantity via alpha = qbar / (sigma - delta).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parameterization(
        parameterization: Parameterization,
        vref: DVector<f64>,
        delta: DVector<f64>,
        sigma: Option<DVector<f64>>,
        qbar: Option<DVector<f64>>,
        slope: Option<DVector<f64>>,
        qhat: DVector<f64>,
        der_mask: Vec<bool>,
    ) -> Result<Self> {
        let missing = |what: &str| VoltVarError::Validation(format!("missing field {what}"));
        let (sigma, qbar) = match parameterization {
            Parameterization::VDeltaSigmaQbar => {
                (sigma.ok_or_else(|| missing("sigma"))?, qbar.ok_or_else(|| missing("qbar"))?)
            }
            Parameterization::VAlphaDeltaQbar | Parameterization::VCDeltaQbar => {
                let alpha = resolve_alpha(parameterization, slope.ok_or_else(|| missing("alpha/c"))?)?;
                let qbar = qbar.ok_or_else(|| missing("qbar"))?;
                // invert Eq of slope: sigma = delta + qbar / alpha
                let sigma = DVector::from_fn(delta.len(), |i, _| delta[i] + qbar[i] / alpha[i]);
                (sigma, qbar)
            }
            Parameterization::VAlphaDeltaSigma | Parameterization::VCDeltaSigma => {
                let alpha = resolve_alpha(parameterization, slope.ok_or_else(|| missing("alpha/c"))?)?;
                let sigma = sigma.ok_or_else(|| missing("sigma"))?;
                let qbar = DVector::from_fn(delta.len(), |i, _| alpha[i] * (sigma[i] - delta[i]));
                (sigma, qbar)
            }
        };
        let mut params = RuleParams::new(vref, delta, sigma, qbar, qhat, der_mask)?;
        params.parameterization = parameterization;
        Ok(params)
    }

    pub fn n_nodes(&self) -> usize {
        self.vref.len()
    }

    /// Slope of the affine segment, alpha_n = qbar_n / (sigma_n - delta_n).
    /// Masked nodes report 0.
    pub fn alpha(&self) -> DVector<f64> {
        DVector::from_fn(self.n_nodes(), |i, _| {
            if self.der_mask[i] {
                self.qbar[i] / (self.sigma[i] - self.delta[i])
            } else {
                0.0
            }
        })
    }

    /// Reciprocal slope c_n = 1/alpha_n on DER nodes.
    pub fn c(&self) -> Result<DVector<f64>> {
        let alpha = self.alpha();
        for i in 0..self.n_nodes() {
            if self.der_mask[i] && alpha[i] <= 0.0 {
                return Err(VoltVarError::Degenerate(format!(
                    "node {}: alpha = {} is not positive",
                    i + 1,
                    alpha[i]
                )));
            }
        }
        Ok(DVector::from_fn(self.n_nodes(), |i, _| {
            if self.der_mask[i] {
                1.0 / alpha[i]
            } else {
                f64::INFINITY
            }
        }))
    }

    /// Re-express the parameters in another of the equivalent forms. The curve
    /// is unchanged; only which quantities are primary differs.
    pub fn convert(&self, target: Parameterization) -> Result<RuleParams> {
        let needs_slope = !matches!(target, Parameterization::VDeltaSigmaQbar);
        if needs_slope {
            for i in 0..self.n_nodes() {
                if self.der_mask[i] && self.sigma[i] == self.delta[i] {
                    return Err(VoltVarError::Degenerate(format!(
                        "node {}: sigma equals delta, slope is unbounded",
                        i + 1
                    )));
                }
            }
        }
        let slope = match target {
            Parameterization::VDeltaSigmaQbar => None,
            Parameterization::VAlphaDeltaQbar | Parameterization::VAlphaDeltaSigma => {
                Some(self.alpha())
            }
            Parameterization::VCDeltaSigma | Parameterization::VCDeltaQbar => Some(self.c()?),
        };
        let sigma = matches!(
            target,
            Parameterization::VDeltaSigmaQbar
                | Parameterization::VAlphaDeltaSigma
                | Parameterization::VCDeltaSigma
        )
        .then(|| self.sigma.clone());
        let qbar = matches!(
            target,
            Parameterization::VDeltaSigmaQbar
                | Parameterization::VAlphaDeltaQbar
                | Parameterization::VCDeltaQbar
        )
        .then(|| self.qbar.clone());
        RuleParams::from_parameterization(
            target,
            self.vref.clone(),
            self.delta.clone(),
            sigma,
            qbar,
            slope,
            self.qhat.clone(),
            self.der_mask.clone(),
        )
    }

    /// Check the IEEE 1547 parameter box. Violations are data, not errors.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |node: usize, constraint: &str, margin: f64| {
            if margin > 0.0 {
                out.push(Violation {
                    node: node + 1,
                    constraint: constraint.to_string(),
                    margin,
                });
            }
        };
        for i in 0..self.n_nodes() {
            if !self.der_mask[i] {
                continue;
            }
            push(i, "vref >= 0.95", 0.95 - self.vref[i]);
            push(i, "vref <= 1.05", self.vref[i] - 1.05);
            push(i, "delta >= 0", -self.delta[i]);
            push(i, "delta <= 0.03", self.delta[i] - 0.03);
            push(i, "sigma >= delta + 0.02", self.delta[i] + 0.02 - self.sigma[i]);
            push(i, "sigma <= 0.18", self.sigma[i] - 0.18);
            push(i, "qbar >= 0", -self.qbar[i]);
            push(i, "qbar <= qhat", self.qbar[i] - self.qhat[i]);
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }
}

fn resolve_alpha(parameterization: Parameterization, slope: DVector<f64>) -> Result<DVector<f64>> {
    let reciprocal = matches!(
        parameterization,
        Parameterization::VCDeltaSigma | Parameterization::VCDeltaQbar
    );
    for (i, &s) in slope.iter().enumerate() {
        if s <= 0.0 {
            return Err(VoltVarError::Degenerate(format!(
                "node {}: slope entry {s} must be positive",
                i + 1
            )));
        }
    }
    Ok(if reciprocal { slope.map(|c| 1.0 / c) } else { slope })
}

/// The IEEE 1547.8 default settings (vref, delta, sigma, qbar) = (1, 0.02, 0.08, qhat).
pub fn default_rule(qhat: DVector<f64>, der_mask: Vec<bool>) -> Result<RuleParams> {
    let n = qhat.len();
    RuleParams::new(
        DVector::from_element(n, 1.0),
        DVector::from_element(n, 0.02),
        DVector::from_element(n, 0.08),
        qhat.clone(),
        qhat,
        der_mask,
    )
}

/// Evaluate the piecewise-linear curve of node `n` at voltage `v`.
pub fn eval_rule(params: &RuleParams, n: usize, v: f64) -> f64 {
    if !params.der_mask[n] {
        return 0.0;
    }
    let vref = params.vref[n];
    let delta = params.delta[n];
    let sigma = params.sigma[n];
    let qbar = params.qbar[n];
    let alpha = qbar / (sigma - delta);
    if v <= vref - sigma {
        qbar
    } else if v < vref - delta {
        -alpha * (v - (vref - delta))
    } else if v <= vref + delta {
        0.0
    } else if v < vref + sigma {
        -alpha * (v - (vref + delta))
    } else {
        -qbar
    }
}

/// Componentwise rule evaluation, `q = f_z(v)`.
pub fn eval_rule_vector(params: &RuleParams, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != params.n_nodes() {
        return Err(VoltVarError::Dimension(format!(
            "voltage vector has length {}, rules cover {} nodes",
            v.len(),
            params.n_nodes()
        )));
    }
    Ok(DVector::from_fn(v.len(), |i, _| eval_rule(params, i, v[i])))
}

/// Read a rule file:
/// `{"parameterization", "vref", "delta", "sigma"/"qbar"/"alpha"/"c", "qhat", "der_mask"}`.
pub fn load_rules(path: impl AsRef<Path>) -> Result<RuleParams> {
    let text = std::fs::read_to_string(&path)?;
    let file: RuleFile = serde_json::from_str(&text)
        .map_err(|e| VoltVarError::Parse(format!("{}: {e}", path.as_ref().display())))?;
    let n = file.vref.len();
    let der_mask = file.der_mask.unwrap_or_else(|| vec![true; n]);
    let slope = match file.parameterization {
        Parameterization::VAlphaDeltaQbar | Parameterization::VAlphaDeltaSigma => file.alpha,
        Parameterization::VCDeltaSigma | Parameterization::VCDeltaQbar => file.c,
        Parameterization::VDeltaSigmaQbar => None,
    };
    RuleParams::from_parameterization(
        file.parameterization,
        DVector::from_vec(file.vref),
        DVector::from_vec(file.delta),
        file.sigma.map(DVector::from_vec),
        file.qbar.map(DVector::from_vec),
        slope.map(DVector::from_vec),
        DVector::from_vec(file.qhat),
        der_mask,
    )
}

/// Write a rule file in the canonical parameterization.
pub fn save_rules(path: impl AsRef<Path>, params: &RuleParams) -> Result<()> {
    let file = RuleFile {
        parameterization: Parameterization::VDeltaSigmaQbar,
        vref: params.vref.iter().copied().collect(),
        delta: params.delta.iter().copied().collect(),
        sigma: Some(params.sigma.iter().copied().collect()),
        qbar: Some(params.qbar.iter().copied().collect()),
        alpha: None,
        c: None,
        qhat: params.qhat.iter().copied().collect(),
        der_mask: Some(params.der_mask.clone()),
    };
    let mut text = serde_json::to_string_pretty(&file)
        .map_err(|e| VoltVarError::Parse(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar_rule(vref: f64, delta: f64, sigma: f64, qbar: f64) -> RuleParams {
        RuleParams::new(
            DVector::from_element(1, vref),
            DVector::from_element(1, delta),
            DVector::from_element(1, sigma),
            DVector::from_element(1, qbar),
            DVector::from_element(1, qbar.max(0.2)),
            vec![true],
        )
        .unwrap()
    }

    #[test]
    fn deadband_center_gives_zero() {
        let p = scalar_rule(1.0, 0.02, 0.08, 0.2);
        assert_eq!(eval_rule(&p, 0, 1.0), 0.0);
    }

    #[test]
    fn default_rule_affine_region() {
        // qhat = 0.2, v = 1.05: -alpha (0.05 - 0.02) with alpha = 0.2/0.06
        let p = default_rule(DVector::from_element(1, 0.2), vec![true]).unwrap();
        assert_abs_diff_eq!(eval_rule(&p, 0, 1.05), -0.1, epsilon = 1e-12);
    }

    #[test]
    fn saturation_region() {
        let p = scalar_rule(1.0, 0.02, 0.08, 0.2);
        assert_eq!(eval_rule(&p, 0, 1.0 + 0.08 + 0.1), -0.2);
        assert_eq!(eval_rule(&p, 0, 1.0 - 0.08 - 0.1), 0.2);
    }

    #[test]
    fn vector_eval_matches_scalar_and_masks() {
        let p = RuleParams::new(
            DVector::from_element(3, 1.0),
            DVector::from_element(3, 0.02),
            DVector::from_element(3, 0.08),
            DVector::from_element(3, 0.2),
            DVector::from_element(3, 0.2),
            vec![true, false, true],
        )
        .unwrap();
        let v = DVector::from_vec(vec![1.05, 1.05, 0.9]);
        let q = eval_rule_vector(&p, &v).unwrap();
        assert_abs_diff_eq!(q[0], eval_rule(&p, 0, 1.05), epsilon = 1e-15);
        assert_eq!(q[1], 0.0);
        assert_abs_diff_eq!(q[2], 0.2, epsilon = 1e-15);
        let at_ref = eval_rule_vector(&p, &DVector::from_element(3, 1.0)).unwrap();
        assert_eq!(at_ref.abs().max(), 0.0);
    }

    #[test]
    fn default_rule_validates_clean() {
        let p = default_rule(DVector::from_element(4, 0.2), vec![true; 4]).unwrap();
        assert!(p.validate().is_empty());
    }

    #[test]
    fn delta_violation_has_margin() {
        let p = scalar_rule(1.0, 0.05, 0.1, 0.2);
        let violations = p.validate();
        let v = violations
            .iter()
            .find(|v| v.constraint == "delta <= 0.03")
            .unwrap();
        assert_abs_diff_eq!(v.margin, 0.02, epsilon = 1e-12);
    }

    #[test]
    fn sigma_gap_violation() {
        let p = scalar_rule(1.0, 0.02, 0.03, 0.2);
        assert!(p
            .validate()
            .iter()
            .any(|v| v.constraint == "sigma >= delta + 0.02"));
    }

    #[test]
    fn conversion_examples() {
        // (delta, sigma, qbar) = (0.02, 0.08, 0.2) -> alpha = 10/3
        let p = scalar_rule(1.0, 0.02, 0.08, 0.2);
        assert_abs_diff_eq!(p.alpha()[0], 10.0 / 3.0, epsilon = 1e-12);
        // alpha -> c -> alpha roundtrip
        let in_c = p.convert(Parameterization::VCDeltaQbar).unwrap();
        assert_abs_diff_eq!(in_c.c().unwrap()[0], 0.3, epsilon = 1e-12);
        let back = in_c.convert(Parameterization::VAlphaDeltaSigma).unwrap();
        assert_abs_diff_eq!(back.alpha()[0], 10.0 / 3.0, epsilon = 1e-12);
        // (alpha, delta, qbar) = (10/3, 0.02, 0.2) -> sigma = 0.08
        let q = RuleParams::from_parameterization(
            Parameterization::VAlphaDeltaQbar,
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.02),
            None,
            Some(DVector::from_element(1, 0.2)),
            Some(DVector::from_element(1, 10.0 / 3.0)),
            DVector::from_element(1, 0.2),
            vec![true],
        )
        .unwrap();
        assert_abs_diff_eq!(q.sigma[0], 0.08, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_sigma_equals_delta_rejected() {
        let err = RuleParams::new(
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.03),
            DVector::from_element(1, 0.03),
            DVector::from_element(1, 0.2),
            DVector::from_element(1, 0.2),
            vec![true],
        )
        .unwrap_err();
        assert!(matches!(err, VoltVarError::Degenerate(_)));
    }

    prop_compose! {
        fn valid_params()(
            vref in 0.95f64..1.05,
            delta in 0.0f64..0.03,
            gap in 0.02f64..0.15,
            qbar in 0.01f64..0.3,
        ) -> RuleParams {
            scalar_rule(vref, delta, (delta + gap).min(0.18), qbar)
        }
    }

    proptest! {
        #[test]
        fn continuous_at_breakpoints(p in valid_params()) {
            let vref = p.vref[0];
            let h = 1e-9;
            for bp in [
                vref - p.sigma[0],
                vref - p.delta[0],
                vref + p.delta[0],
                vref + p.sigma[0],
            ] {
                let left = eval_rule(&p, 0, bp - h);
                let right = eval_rule(&p, 0, bp + h);
                prop_assert!((left - right).abs() < 1e-7);
            }
        }

        #[test]
        fn monotone_nonincreasing_and_bounded(p in valid_params(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut points: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.5..1.5)).collect();
            points.sort_by(f64::total_cmp);
            let mut prev = f64::INFINITY;
            for v in points {
                let q = eval_rule(&p, 0, v);
                prop_assert!(q <= prev + 1e-12);
                prop_assert!(q.abs() <= p.qbar[0] + 1e-12);
                prev = q;
            }
        }

        #[test]
        fn odd_symmetry_about_center(p in valid_params(), u in 0.0f64..0.5) {
            let vref = p.vref[0];
            let plus = eval_rule(&p, 0, vref + u);
            let minus = eval_rule(&p, 0, vref - u);
            prop_assert!((plus + minus).abs() < 1e-12);
        }

        #[test]
        fn conversions_preserve_eval(p in valid_params(), v in 0.7f64..1.3) {
            for target in [
                Parameterization::VAlphaDeltaQbar,
                Parameterization::VAlphaDeltaSigma,
                Parameterization::VCDeltaSigma,
                Parameterization::VCDeltaQbar,
            ] {
                let converted = p.convert(target).unwrap();
                prop_assert!((eval_rule(&converted, 0, v) - eval_rule(&p, 0, v)).abs() < 1e-12);
                let back = converted.convert(Parameterization::VDeltaSigmaQbar).unwrap();
                prop_assert!((back.sigma[0] - p.sigma[0]).abs() < 1e-12);
                prop_assert!((back.qbar[0] - p.qbar[0]).abs() < 1e-12);
            }
        }
    }
}
