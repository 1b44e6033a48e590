//! Linearized grid model: sensitivity matrices, grid-condition scenarios, and
//! the voltage map `v = X q + vtilde`.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltVarError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeederKind {
    #[serde(rename = "single-phase", alias = "single")]
    SinglePhase,
    Multiphase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
    #[serde(rename = "single", alias = "S")]
    Single,
}

/// Linearized model of a feeder: voltage sensitivities to active and reactive
/// injections at the non-substation nodes, indexed 1..N (substation excluded).
#[derive(Debug, Clone)]
pub struct FeederModel {
    n_nodes: usize,
    r: DMatrix<f64>,
    x: DMatrix<f64>,
    v0: f64,
    phases: Vec<Phase>,
    kind: FeederKind,
}

/// One line segment of a radial feeder, impedances in pu.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Line {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
}

#[derive(Deserialize)]
struct TopologyFile {
    root: u32,
    lines: Vec<Line>,
    v0: f64,
}

#[derive(Deserialize)]
struct ExplicitFile {
    kind: FeederKind,
    v0: f64,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    phases: Option<Vec<Phase>>,
}

const PD_TOL: f64 = 1e-10;

fn rows_to_matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(VoltVarError::Parse(format!("{name} is empty")));
    }
    for row in rows {
        if row.len() != n {
            return Err(VoltVarError::Parse(format!(
                "{name} is not square: {n} rows but a row of length {}",
                row.len()
            )));
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Minimum eigenvalue of the symmetric part (X + X^T)/2.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.min()
}

impl FeederModel {
    pub fn new(
        r: DMatrix<f64>,
        x: DMatrix<f64>,
        v0: f64,
        phases: Vec<Phase>,
        kind: FeederKind,
    ) -> Result<Self> {
        let n = x.nrows();
        if x.ncols() != n || r.nrows() != n || r.ncols() != n {
            return Err(VoltVarError::Dimension(format!(
                "R is {}x{}, X is {}x{}; both must be NxN with the same N",
                r.nrows(),
                r.ncols(),
                x.nrows(),
                x.ncols()
            )));
        }
        if phases.len() != n {
            return Err(VoltVarError::Dimension(format!(
                "{} phase tags for {n} nodes",
                phases.len()
            )));
        }
        if kind == FeederKind::SinglePhase {
            let asym = (&x - x.transpose()).abs().max();
            if asym > 1e-9 {
                return Err(VoltVarError::ModelRejected(format!(
                    "single-phase X must be symmetric (max asymmetry {asym:.3e})"
                )));
            }
        }
        let min_eig = min_symmetric_eigenvalue(&x);
        if min_eig <= PD_TOL {
            return Err(VoltVarError::ModelRejected(format!(
                "X is not positive definite: min eigenvalue of symmetric part is {min_eig:.3e}"
            )));
        }
        Ok(FeederModel {
            n_nodes: n,
            r,
            x,
            v0,
            phases,
            kind,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn resistance_sensitivity(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn reactance_sensitivity(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn kind(&self) -> FeederKind {
        self.kind
    }

    /// Voltage profile for reactive injections `q` under grid conditions
    /// `scenario`: `v = X q + vtilde`.
    pub fn voltage(&self, q: &DVector<f64>, scenario: &Scenario) -> Result<DVector<f64>> {
        if q.len() != self.n_nodes || scenario.vtilde.len() != self.n_nodes {
            return Err(VoltVarError::Dimension(format!(
                "expected vectors of length {}, got q of {} and vtilde of {}",
                self.n_nodes,
                q.len(),
                scenario.vtilde.len()
            )));
        }
        Ok(&self.x * q + &scenario.vtilde)
    }
}

/// Build single-phase sensitivity matrices for a radial feeder.
///
/// Entry (n, m) is twice the sum of impedances on the path shared between
/// root-to-n and root-to-m.
pub fn build_radial_sensitivities(lines: &[Line], root: u32, v0: f64) -> Result<FeederModel> {
    if lines.is_empty() {
        return Err(VoltVarError::Topology("no lines given".into()));
    }
    for l in lines {
        if l.r < 0.0 || l.x < 0.0 {
            return Err(VoltVarError::Validation(format!(
                "negative impedance on line {}-{}: r={}, x={}",
                l.from, l.to, l.r, l.x
            )));
        }
    }
    // Collect non-root node ids in ascending order; they map to indices 0..N-1.
    let mut ids: Vec<u32> = lines
        .iter()
        .flat_map(|l| [l.from, l.to])
        .filter(|&id| id != root)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    let n = ids.len();
    if lines.len() != n {
        return Err(VoltVarError::Topology(format!(
            "{} lines for {n} non-root nodes; a tree needs exactly one line per node",
            lines.len()
        )));
    }
    let index: HashMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut adjacency: HashMap<u32, Vec<(u32, f64, f64)>> = HashMap::new();
    for l in lines {
        adjacency.entry(l.from).or_default().push((l.to, l.r, l.x));
        adjacency.entry(l.to).or_default().push((l.from, l.r, l.x));
    }
    if !adjacency.contains_key(&root) {
        return Err(VoltVarError::Topology(format!(
            "root node {root} does not appear in any line"
        )));
    }

    // BFS from root, accumulating path sums and parent pointers.
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut cum_r = vec![0.0f64; n];
    let mut cum_x = vec![0.0f64; n];
    let mut depth = vec![0usize; n];
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::new();
    queue.push_back((root, None::<u32>));
    while let Some((u, prev)) = queue.pop_front() {
        for &(w, lr, lx) in adjacency.get(&u).into_iter().flatten() {
            if Some(w) == prev {
                continue;
            }
            if w == root {
                return Err(VoltVarError::Topology("cycle through the root".into()));
            }
            let wi = index[&w];
            if seen[wi] {
                return Err(VoltVarError::Topology(format!("cycle detected at node {w}")));
            }
            seen[wi] = true;
            if u == root {
                parent[wi] = None;
                depth[wi] = 1;
                cum_r[wi] = lr;
                cum_x[wi] = lx;
            } else {
                let ui = index[&u];
                parent[wi] = Some(ui);
                depth[wi] = depth[ui] + 1;
                cum_r[wi] = cum_r[ui] + lr;
                cum_x[wi] = cum_x[ui] + lx;
            }
            queue.push_back((w, Some(u)));
        }
    }
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(VoltVarError::Topology(format!(
            "node {} is not connected to the root",
            ids[i]
        )));
    }

    // Lowest common ancestor by walking parents; N is small here.
    let lca = |mut a: usize, mut b: usize| -> Option<usize> {
        while depth[a] > depth[b] {
            a = match parent[a] {
                Some(p) => p,
                None => return None,
            };
        }
        while depth[b] > depth[a] {
            b = match parent[b] {
                Some(p) => p,
                None => return None,
            };
        }
        while a != b {
            match (parent[a], parent[b]) {
                (Some(pa), Some(pb)) => {
                    a = pa;
                    b = pb;
                }
                _ => return None,
            }
        }
        Some(a)
    };

    let mut r_mat = DMatrix::zeros(n, n);
    let mut x_mat = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let (cr, cx) = match lca(i, j) {
                Some(k) => (cum_r[k], cum_x[k]),
                None => (0.0, 0.0),
            };
            r_mat[(i, j)] = 2.0 * cr;
            r_mat[(j, i)] = 2.0 * cr;
            x_mat[(i, j)] = 2.0 * cx;
            x_mat[(j, i)] = 2.0 * cx;
        }
    }
    FeederModel::new(r_mat, x_mat, v0, vec![Phase::Single; n], FeederKind::SinglePhase)
}

/// Parse a feeder topology file: `{"root", "lines":[{"from","to","r","x"}], "v0"}`.
pub fn load_topology(path: impl AsRef<Path>) -> Result<FeederModel> {
    let text = std::fs::read_to_string(&path)?;
    let file: TopologyFile = serde_json::from_str(&text)
        .map_err(|e| VoltVarError::Parse(format!("{}: {e}", path.as_ref().display())))?;
    build_radial_sensitivities(&file.lines, file.root, file.v0)
}

/// Parse an explicit-model file: `{"kind", "v0", "R":[[...]], "X":[[...]], "phases":[...]}`.
pub fn load_explicit_model(path: impl AsRef<Path>) -> Result<FeederModel> {
    let text = std::fs::read_to_string(&path)?;
    let file: ExplicitFile = serde_json::from_str(&text)
        .map_err(|e| VoltVarError::Parse(format!("{}: {e}", path.as_ref().display())))?;
    let r = rows_to_matrix(&file.r, "R")?;
    let x = rows_to_matrix(&file.x, "X")?;
    let phases = file.phases.unwrap_or_else(|| {
        let p = match file.kind {
            FeederKind::SinglePhase => Phase::Single,
            FeederKind::Multiphase => Phase::A,
        };
        vec![p; x.nrows()]
    });
    FeederModel::new(r, x, file.v0, phases, file.kind)
}

/// One grid condition: the voltage profile the feeder would see with zero
/// inverter reactive injection, plus optionally the raw injections behind it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub vtilde: DVector<f64>,
    pub injections: Option<Injections>,
}

#[derive(Debug, Clone)]
pub struct Injections {
    pub p_g: DVector<f64>,
    pub p_l: DVector<f64>,
    pub q_l: DVector<f64>,
}

impl Scenario {
    pub fn from_vtilde(vtilde: DVector<f64>) -> Self {
        Scenario {
            vtilde,
            injections: None,
        }
    }
}

/// Grid condition from raw injections: `vtilde = R(p_g - p_l) - X q_l + v0 1`.
pub fn make_scenario(
    model: &FeederModel,
    p_g: DVector<f64>,
    p_l: DVector<f64>,
    q_l: DVector<f64>,
) -> Result<Scenario> {
    let n = model.n_nodes();
    for (name, v) in [("p_g", &p_g), ("p_l", &p_l), ("q_l", &q_l)] {
        if v.len() != n {
            return Err(VoltVarError::Dimension(format!(
                "{name} has length {}, expected {n}",
                v.len()
            )));
        }
    }
    let vtilde = model.resistance_sensitivity() * (&p_g - &p_l) - model.reactance_sensitivity() * &q_l
        + DVector::from_element(n, model.v0());
    Ok(Scenario {
        vtilde,
        injections: Some(Injections { p_g, p_l, q_l }),
    })
}

#[derive(Debug, Clone)]
pub struct ScenarioSet {
    pub scenarios: Vec<Scenario>,
    pub source: String,
}

impl ScenarioSet {
    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

/// Read scenarios from CSV. Columns are either `vtilde_1..vtilde_N` or the
/// raw-injection triple `p_g_1..p_g_N, p_l_1..p_l_N, q_l_1..q_l_N`.
pub fn load_scenarios(path: impl AsRef<Path>, model: &FeederModel) -> Result<ScenarioSet> {
    let n = model.n_nodes();
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| VoltVarError::Parse(format!("{}: {e}", path.as_ref().display())))?;
    let headers = reader
        .headers()
        .map_err(|e| VoltVarError::Parse(e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_vtilde = cols.first().map(|c| c.starts_with("vtilde_")).unwrap_or(false);
    let expected = if has_vtilde { n } else { 3 * n };
    if cols.len() != expected {
        return Err(VoltVarError::Parse(format!(
            "{}: expected {expected} columns, found {}",
            path.as_ref().display(),
            cols.len()
        )));
    }
    let mut scenarios = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| VoltVarError::Parse(e.to_string()))?;
        let values: Vec<f64> = record
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| {
                    VoltVarError::Parse(format!("row {}: bad number {f:?}: {e}", row_idx + 2))
                })
            })
            .collect::<Result<_>>()?;
        if has_vtilde {
            scenarios.push(Scenario::from_vtilde(DVector::from_vec(values)));
        } else {
            let p_g = DVector::from_column_slice(&values[0..n]);
            let p_l = DVector::from_column_slice(&values[n..2 * n]);
            let q_l = DVector::from_column_slice(&values[2 * n..3 * n]);
            scenarios.push(make_scenario(model, p_g, p_l, q_l)?);
        }
    }
    Ok(ScenarioSet {
        scenarios,
        source: path.as_ref().display().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line(from: u32, to: u32, r: f64, x: f64) -> Line {
        Line { from, to, r, x }
    }

    #[test]
    fn two_node_chain_matches_hand_evaluation() {
        // root-1-2 with x = 0.1 each, r small but positive to keep R nonsingular.
        let model = build_radial_sensitivities(
            &[line(0, 1, 0.05, 0.1), line(1, 2, 0.05, 0.1)],
            0,
            1.0,
        )
        .unwrap();
        let x = model.reactance_sensitivity();
        assert_abs_diff_eq!(x[(0, 0)], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(x[(0, 1)], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(x[(1, 0)], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(x[(1, 1)], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn single_node_doubles_reactance() {
        let model = build_radial_sensitivities(&[line(0, 1, 0.01, 0.05)], 0, 1.0).unwrap();
        assert_abs_diff_eq!(model.reactance_sensitivity()[(0, 0)], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn star_of_leaves_has_zero_off_diagonals() {
        let model = build_radial_sensitivities(
            &[line(0, 1, 0.01, 0.1), line(0, 2, 0.01, 0.2), line(0, 3, 0.01, 0.3)],
            0,
            1.0,
        )
        .unwrap();
        let x = model.reactance_sensitivity();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(x[(i, j)], 0.0);
                }
            }
        }
        assert_abs_diff_eq!(x[(0, 0)], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(x[(2, 2)], 0.6, epsilon = 1e-15);
    }

    // Brute-force oracle: explicit path intersection instead of LCA cumsum.
    #[test]
    fn radial_matrix_matches_brute_force_path_intersection() {
        let lines = vec![
            line(0, 1, 0.02, 0.08),
            line(1, 2, 0.01, 0.05),
            line(1, 3, 0.03, 0.11),
            line(3, 4, 0.02, 0.04),
            line(0, 5, 0.01, 0.07),
        ];
        let model = build_radial_sensitivities(&lines, 0, 1.0).unwrap();
        // Paths from root, hand-listed as edge index sets.
        let paths: Vec<Vec<usize>> = vec![
            vec![0],
            vec![0, 1],
            vec![0, 2],
            vec![0, 2, 3],
            vec![4],
        ];
        for i in 0..5 {
            for j in 0..5 {
                let shared: f64 = paths[i]
                    .iter()
                    .filter(|e| paths[j].contains(e))
                    .map(|&e| lines[e].x)
                    .sum();
                assert_abs_diff_eq!(
                    model.reactance_sensitivity()[(i, j)],
                    2.0 * shared,
                    epsilon = 1e-15
                );
            }
        }
    }

    #[test]
    fn cycle_is_rejected() {
        let err = build_radial_sensitivities(
            &[line(0, 1, 0.0, 0.1), line(1, 2, 0.0, 0.1), line(2, 1, 0.0, 0.1)],
            0,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, VoltVarError::Topology(_)));
    }

    #[test]
    fn negative_impedance_is_rejected() {
        let err = build_radial_sensitivities(&[line(0, 1, -0.1, 0.1)], 0, 1.0).unwrap_err();
        assert!(matches!(err, VoltVarError::Validation(_)));
    }

    #[test]
    fn explicit_multiphase_accepts_pd_nonsymmetric() {
        let x = DMatrix::from_row_slice(2, 2, &[0.4, -0.1, -0.2, 0.5]);
        let r = DMatrix::identity(2, 2);
        // symmetric part [[0.4,-0.15],[-0.15,0.5]], eigenvalues ~0.247 and ~0.653
        assert!(min_symmetric_eigenvalue(&x) > 0.24);
        let model =
            FeederModel::new(r, x, 1.0, vec![Phase::A, Phase::B], FeederKind::Multiphase).unwrap();
        assert_eq!(model.kind(), FeederKind::Multiphase);
    }

    #[test]
    fn skew_symmetric_is_rejected() {
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let r = DMatrix::identity(2, 2);
        let err = FeederModel::new(r, x, 1.0, vec![Phase::A, Phase::B], FeederKind::Multiphase)
            .unwrap_err();
        assert!(matches!(err, VoltVarError::ModelRejected(_)));
    }

    #[test]
    fn identity_single_phase_accepted() {
        let x = DMatrix::identity(2, 2);
        let r = DMatrix::identity(2, 2);
        FeederModel::new(r, x, 1.0, vec![Phase::Single; 2], FeederKind::SinglePhase).unwrap();
    }

    fn one_node_model(x: f64, r: f64, v0: f64) -> FeederModel {
        FeederModel::new(
            DMatrix::from_element(1, 1, r),
            DMatrix::from_element(1, 1, x),
            v0,
            vec![Phase::Single],
            FeederKind::SinglePhase,
        )
        .unwrap()
    }

    #[test]
    fn scenario_zero_injections_is_flat() {
        let model = one_node_model(0.5, 0.3, 1.0);
        let z = DVector::zeros(1);
        let s = make_scenario(&model, z.clone(), z.clone(), z).unwrap();
        assert_abs_diff_eq!(s.vtilde[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn scenario_active_injection() {
        let model = one_node_model(0.5, 0.3, 1.0);
        let s = make_scenario(
            &model,
            DVector::from_element(1, 0.2),
            DVector::zeros(1),
            DVector::zeros(1),
        )
        .unwrap();
        assert_abs_diff_eq!(s.vtilde[0], 1.06, epsilon = 1e-15);
    }

    #[test]
    fn scenario_reactive_load() {
        let model = one_node_model(0.5, 0.3, 1.0);
        let s = make_scenario(
            &model,
            DVector::zeros(1),
            DVector::zeros(1),
            DVector::from_element(1, 0.1),
        )
        .unwrap();
        assert_abs_diff_eq!(s.vtilde[0], 0.95, epsilon = 1e-15);
    }

    #[test]
    fn voltage_examples() {
        let model = one_node_model(0.5, 0.3, 1.0);
        let s = Scenario::from_vtilde(DVector::from_element(1, 1.06));
        let v = model.voltage(&DVector::from_element(1, -0.04), &s).unwrap();
        assert_abs_diff_eq!(v[0], 1.04, epsilon = 1e-15);
        let v0 = model.voltage(&DVector::zeros(1), &s).unwrap();
        assert_abs_diff_eq!(v0[0], 1.06, epsilon = 1e-15);
    }

    #[test]
    fn voltage_is_affine() {
        let model = build_radial_sensitivities(
            &[line(0, 1, 0.02, 0.08), line(1, 2, 0.01, 0.05), line(1, 3, 0.03, 0.1)],
            0,
            1.0,
        )
        .unwrap();
        let s = Scenario::from_vtilde(DVector::from_vec(vec![1.02, 1.03, 1.05]));
        let q1 = DVector::from_vec(vec![0.1, -0.2, 0.05]);
        let q2 = DVector::from_vec(vec![-0.05, 0.07, 0.3]);
        let lhs = model.voltage(&q1, &s).unwrap() + model.voltage(&q2, &s).unwrap()
            - model.voltage(&DVector::zeros(3), &s).unwrap();
        let rhs = model.voltage(&(q1 + q2), &s).unwrap();
        assert!((lhs - rhs).abs().max() < 1e-12);
    }

    #[test]
    fn scenario_then_voltage_reproduces_full_linear_model() {
        let model = build_radial_sensitivities(
            &[line(0, 1, 0.02, 0.08), line(1, 2, 0.01, 0.05)],
            0,
            1.0,
        )
        .unwrap();
        let p_g = DVector::from_vec(vec![0.3, 0.1]);
        let p_l = DVector::from_vec(vec![0.1, 0.2]);
        let q_l = DVector::from_vec(vec![0.05, 0.02]);
        let q_g = DVector::from_vec(vec![-0.03, 0.01]);
        let s = make_scenario(&model, p_g.clone(), p_l.clone(), q_l.clone()).unwrap();
        let v = model.voltage(&q_g, &s).unwrap();
        // Direct evaluation of v = R p + X q + v0 1 with p = p_g - p_l, q = q_g - q_l.
        let direct = model.resistance_sensitivity() * (p_g - p_l)
            + model.reactance_sensitivity() * (q_g - q_l)
            + DVector::from_element(2, 1.0);
        assert!((v - direct).abs().max() < 1e-12);
    }
}
