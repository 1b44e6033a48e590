//! Command-line front-end for Volt/VAR rule design, simulation, and
//! verification. Subcommands map one-to-one onto the library modules; every
//! file-writing command also emits a `.manifest.json` with input digests so
//! runs are reproducible, while the primary outputs stay byte-deterministic.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::json;
use sha2::{Digest, Sha256};

use voltvar::benchmark::{self, BigMSpec, GridSpec};
use voltvar::dynamics;
use voltvar::feeder::{self, FeederModel};
use voltvar::rules;
use voltvar::stability;
use voltvar::trainer::{self, OptimizerMode, TrainConfig};
use voltvar::{Result, VoltVarError};

#[derive(Parser)]
#[command(name = "voltvar", version, about = "Volt/VAR rule design and verification")]
struct Cli {
    /// Cap the rayon worker pool (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a feeder file and report its model invariants.
    FeederValidate(FeederValidateArgs),
    /// Certify a rule's closed-loop stability and required unrolling depth.
    Stability(StabilityArgs),
    /// Iterate the closed-loop dynamics and write the trajectory.
    Simulate(SimulateArgs),
    /// Solve for the closed-loop equilibrium of each scenario.
    Equilibrium(EquilibriumArgs),
    /// Train rule parameters by projected stochastic gradient descent.
    Design(DesignArgs),
    /// Mean squared voltage deviation of a rule over a scenario set.
    Evaluate(EvaluateArgs),
    /// Check optimality conditions and big-M witnesses at the equilibria.
    Verify(VerifyArgs),
    /// Exhaustive grid-search design oracle (1-2 inverters).
    Oracle(OracleArgs),
    /// Per-bus voltage profiles: no compensation vs default vs optimized rule.
    Profile(ProfileArgs),
}

#[derive(Args)]
struct FeederValidateArgs {
    #[arg(long)]
    feeder: PathBuf,
    /// Optional JSON output path (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    rules: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    /// Equilibrium-voltage accuracy used for the depth bound.
    #[arg(long, default_value_t = 1e-4)]
    eps1: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    rules: PathBuf,
    #[arg(long)]
    scenarios: PathBuf,
    /// Which scenario row to simulate (0-based).
    #[arg(long, default_value_t = 0)]
    scenario_index: usize,
    #[arg(long, default_value_t = 10_000)]
    t_max: usize,
    #[arg(long, default_value_t = dynamics::DEFAULT_TOL)]
    tol: f64,
    /// Output stem: writes <out>.trace.csv and <out>.summary.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    FixedPoint,
    CoordinateDescent,
    RegionEnumeration,
}

#[derive(Args)]
struct EquilibriumArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    rules: PathBuf,
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::FixedPoint)]
    method: MethodArg,
    #[arg(long, default_value_t = dynamics::DEFAULT_TOL)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Plain,
    AdaptiveMoment,
}

#[derive(Args)]
struct DesignArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    scenarios: PathBuf,
    /// Reactive capability per node: a single value for all nodes or a
    /// comma-separated list. Nodes with 0 carry no inverter.
    #[arg(long)]
    qhat: String,
    /// Restrict inverters to these 1-based nodes (default: all with qhat > 0).
    #[arg(long)]
    der: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::AdaptiveMoment)]
    optimizer: OptimizerArg,
    /// Output stem: writes <out>.rules.json, <out>.report.json, <out>.manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    rules: PathBuf,
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    rules: PathBuf,
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long, default_value_t = dynamics::DEFAULT_TOL)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long)]
    qhat: String,
    #[arg(long)]
    der: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,
    /// Grid points per axis: vref,delta,sigma,qbar.
    #[arg(long, default_value = "5,3,5,4")]
    grid: String,
    /// Output stem: writes <out>.best.json, <out>.grid.csv, <out>.manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    feeder: PathBuf,
    /// The optimized rule; the default-rule column is derived from its
    /// capabilities.
    #[arg(long)]
    rules: PathBuf,
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long, default_value_t = dynamics::DEFAULT_TOL)]
    tol: f64,
    /// Output stem: writes <out>.profile.csv and <out>.manifest.json.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 input error, 3 infeasibility, 4 non-convergence where convergence is required.
fn exit_code(e: &VoltVarError) -> u8 {
    match e {
        VoltVarError::Infeasible(_) => 3,
        VoltVarError::Convergence(_) => 4,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::FeederValidate(a) => cmd_feeder_validate(a),
        Command::Stability(a) => cmd_stability(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Equilibrium(a) => cmd_equilibrium(a),
        Command::Design(a) => cmd_design(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Profile(a) => cmd_profile(a),
    }
}

/// Load either feeder format: a topology file (with a "lines" array) or an
/// explicit sensitivity-matrix file.
fn load_feeder(path: &Path) -> Result<FeederModel> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| VoltVarError::Parse(format!("{}: {e}", path.display())))?;
    if value.get("lines").is_some() {
        feeder::load_topology(path)
    } else {
        feeder::load_explicit_model(path)
    }
}

/// Parse "--qhat 0.1" (broadcast) or "--qhat 0.1,0,0.2" plus an optional
/// 1-based "--der 1,3" node list into (qhat, mask).
fn parse_capability(
    spec: &str,
    der: Option<&str>,
    n: usize,
) -> Result<(DVector<f64>, Vec<bool>)> {
    let values: Vec<f64> = spec
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| VoltVarError::Parse(format!("bad qhat entry {t:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    let qhat = match values.len() {
        1 => DVector::from_element(n, values[0]),
        k if k == n => DVector::from_vec(values),
        k => {
            return Err(VoltVarError::Dimension(format!(
                "qhat has {k} entries, expected 1 or {n}"
            )))
        }
    };
    let mut mask: Vec<bool> = qhat.iter().map(|&q| q > 0.0).collect();
    if let Some(list) = der {
        let mut chosen = vec![false; n];
        for t in list.split(',') {
            let idx: usize = t
                .trim()
                .parse()
                .map_err(|e| VoltVarError::Parse(format!("bad node index {t:?}: {e}")))?;
            if idx == 0 || idx > n {
                return Err(VoltVarError::Validation(format!(
                    "node index {idx} out of range 1..={n}"
                )));
            }
            chosen[idx - 1] = true;
        }
        for i in 0..n {
            mask[i] = mask[i] && chosen[i];
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(VoltVarError::Validation(
            "no inverter nodes: every masked-in node needs qhat > 0".into(),
        ));
    }
    Ok((qhat, mask))
}

fn print_and_maybe_write(value: &serde_json::Value, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| VoltVarError::Parse(e.to_string()))?;
    text.push('\n');
    print!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(())
}

fn sha256_of(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Write `<stem>.manifest.json` describing one run. Kept out of the primary
/// outputs so those stay byte-identical across reruns with the same seed.
fn write_manifest(
    stem: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: &[&Path],
    seed: Option<u64>,
) -> Result<()> {
    let digests: Vec<serde_json::Value> = inputs
        .iter()
        .map(|p| Ok(json!({"path": p.display().to_string(), "sha256": sha256_of(p)?})))
        .collect::<Result<_>>()?;
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let manifest = json!({
        "command": command,
        "config": config,
        "inputs": digests,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "timestamp_unix": timestamp,
    });
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| VoltVarError::Parse(e.to_string()))?;
    text.push('\n');
    std::fs::write(with_suffix(stem, ".manifest.json"), text)?;
    Ok(())
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_feeder_validate(a: FeederValidateArgs) -> Result<()> {
    let model = load_feeder(&a.feeder)?;
    let x = model.reactance_sensitivity();
    let report = json!({
        "n_nodes": model.n_nodes(),
        "kind": model.kind(),
        "v0": model.v0(),
        "x_spectral_norm": stability::spectral_norm(x),
        "x_min_symmetric_eigenvalue": feeder::min_symmetric_eigenvalue(x),
        "r_min_symmetric_eigenvalue":
            feeder::min_symmetric_eigenvalue(model.resistance_sensitivity()),
    });
    print_and_maybe_write(&report, a.out.as_deref())
}

fn cmd_stability(a: StabilityArgs) -> Result<()> {
    let model = load_feeder(&a.feeder)?;
    let params = rules::load_rules(&a.rules)?;
    let cert = stability::spectral_check(
        model.reactance_sensitivity(),
        &params.alpha(),
        a.epsilon,
        model.kind(),
    )?;
    let depth = stability::min_depth(
        model.reactance_sensitivity(),
        &params.qhat,
        a.epsilon,
        a.eps1,
    )?;
    let report = json!({
        "epsilon": cert.epsilon,
        "spectral_norm": cert.spectral_norm,
        "spectral_pass": cert.spectral_pass,
        "polytopic_pass": cert.polytopic_pass,
        "min_depth_for": {"eps1": a.eps1, "T": depth},
    });
    print_and_maybe_write(&report, a.out.as_deref())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let model = load_feeder(&a.feeder)?;
    let params = rules::load_rules(&a.rules)?;
    let set = feeder::load_scenarios(&a.scenarios, &model)?;
    let scenario = set.scenarios.get(a.scenario_index).ok_or_else(|| {
        VoltVarError::Validation(format!(
            "scenario index {} out of range; {} has {} rows",
            a.scenario_index,
            a.scenarios.display(),
            set.len()
        ))
    })?;
    let trace = dynamics::simulate(&model, &params, scenario, a.t_max, a.tol)?;

    let n = model.n_nodes();
    let mut csv = String::from("t");
    for i in 1..=n {
        write!(csv, ",q_{i}").unwrap();
    }
    for i in 1..=n {
        write!(csv, ",v_{i}").unwrap();
    }
    csv.push('\n');
    for (t, (q, v)) in trace.setpoints.iter().zip(&trace.voltages).enumerate() {
        write!(csv, "{t}").unwrap();
        for x in q.iter().chain(v.iter()) {
            write!(csv, ",{x}").unwrap();
        }
        csv.push('\n');
    }
    std::fs::write(with_suffix(&a.out, ".trace.csv"), csv)?;

    let summary = json!({
        "converged": trace.converged,
        "settle_steps": trace.settle_steps,
        "final_gap": trace.final_gap,
    });
    print_and_maybe_write(&summary, Some(&with_suffix(&a.out, ".summary.json")))?;
    write_manifest(
        &a.out,
        "simulate",
        json!({"scenario_index": a.scenario_index, "t_max": a.t_max, "tol": a.tol}),
        &[&a.feeder, &a.rules, &a.scenarios],
        None,
    )
}

fn cmd_equilibrium(a: EquilibriumArgs) -> Result<()> {
    let model = load_feeder(&a.feeder)?;
    let params = rules::load_rules(&a.rules)?;
    let set = feeder::load_scenarios(&a.scenarios, &model)?;
    let mut rows = Vec::new();
    for (idx, s) in set.scenarios.iter().enumerate() {
        let eq = match a.method {
            MethodArg::FixedPoint => dynamics::equilibrium_fixed_point(&model, &params, s, a.tol)?,
            MethodArg::CoordinateDescent => {
                dynamics::equilibrium_coordinate_descent(&model, &params, s, a.tol)?
            }
            MethodArg::RegionEnumeration => benchmark::enumerate_equilibrium(&model, &params, s)?,
        };
        rows.push(json!({
            "scenario": idx,
            "q_star": eq.q_star.iter().copied().collect::<Vec<f64>>(),
            "v_star": eq.v_star.iter().copied().collect::<Vec<f64>>(),
            "objective": eq.objective,
            "fixed_point_residual": eq.fixed_point_residual,
            "kkt_residual": eq.kkt_residual,
            "stability_warning": eq.stability_warning,
        }));
    }
    print_and_maybe_write(&serde_json::Value::Array(rows), a.out.as_deref())
}

fn cmd_design(a: DesignArgs) -> Result<()> {
    let model = load_feeder(&a.feeder)?;
    let set = feeder::load_scenarios(&a.scenarios, &model)?;
    let (qhat, mask) = parse_capability(&a.qhat, a.der.as_deref(), model.n_nodes())?;
    let mut config = TrainConfig::new(a.epsilon, a.epochs, a.step_size, a.batch_size, a.seed);
    config.optimizer = match a.optimizer {
        OptimizerArg::Plain => OptimizerMode::Plain,
        OptimizerArg::AdaptiveMoment => OptimizerMode::AdaptiveMoment,
    };
    let report = trainer::train(&model, &set.scenarios, &qhat, &mask, &config)?;

    let params = report
        .final_params_full
        .clone()
        .expect("training always returns the full parameter struct");
    rules::save_rules(with_suffix(&a.out, ".rules.json"), &params)?;
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| VoltVarError::Parse(e.to_string()))?;
    text.push('\n');
    std::fs::write(with_suffix(&a.out, ".report.json"), text)?;
    write_manifest(
        &a.out,
        "design",
        json!({
            "epsilon": a.epsilon, "epochs": a.epochs, "step_size": a.step_size,
            "batch_size": a.batch_size, "qhat": a.qhat, "der": a.der,
            "optimizer": config.optimizer,
        }),
        &[&a.feeder, &a.scenarios],
        Some(a.seed),
    )?;
    let last = report.loss_per_epoch.last().copied();
    println!(
        "designed rules for {} inverters; final loss {:?}; certificate pass {}",
        mask.iter().filter(|&&m| m).count(),
        last,
        report.certificate.spectral_pass && report.certificate.polytopic_pass,
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let model = load_feeder(&a.feeder)?;
    let params = rules::load_rules(&a.rules)?;
    let set = feeder::load_scenarios(&a.scenarios, &model)?;
    let eval = trainer::evaluate(&model, &params, &set.scenarios)?;
    let report = json!({
        "objective": eval.objective,
        "scenarios": set.len(),
        "excluded_non_convergent": eval.excluded,
    });
    print_and_maybe_write(&report, a.out.as_deref())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let model = load_feeder(&a.feeder)?;
    let params = rules::load_rules(&a.rules)?;
    let set = feeder::load_scenarios(&a.scenarios, &model)?;
    let bigm = BigMSpec::calibrate(&model, &params, &set.scenarios)?;
    let mut rows = Vec::new();
    for (idx, s) in set.scenarios.iter().enumerate() {
        let eq = dynamics::equilibrium_fixed_point(&model, &params, s, a.tol)?;
        let (residual, point) = benchmark::kkt_residual(&model, &params, s, &eq.q_star)?;
        let witness = benchmark::check_bigm(&model, &params, s, &point, &bigm)?;
        rows.push(json!({
            "scenario": idx,
            "kkt_residual": residual,
            "fixed_point_residual": eq.fixed_point_residual,
            "bigm_pass": witness.pass,
            "ieee_box_pass": witness.ieee_box_pass,
            "failures": witness.failures,
        }));
    }
    let report = json!({"m1": bigm.m1, "m2": bigm.m2, "scenarios": rows});
    print_and_maybe_write(&report, a.out.as_deref())
}

fn cmd_oracle(a: OracleArgs) -> Result<()> {
    let model = load_feeder(&a.feeder)?;
    let set = feeder::load_scenarios(&a.scenarios, &model)?;
    let (qhat, mask) = parse_capability(&a.qhat, a.der.as_deref(), model.n_nodes())?;
    let counts: Vec<usize> = a
        .grid
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| VoltVarError::Parse(format!("bad grid count {t:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    let [nv, nd, ns, nq] = counts[..] else {
        return Err(VoltVarError::Validation(
            "--grid takes four comma-separated counts: vref,delta,sigma,qbar".into(),
        ));
    };
    let grid = GridSpec::uniform(nv, nd, ns, nq);
    let result =
        benchmark::grid_search_ord(&model, &set.scenarios, a.epsilon, &qhat, &mask, &grid)?;

    rules::save_rules(with_suffix(&a.out, ".best.json"), &result.best_params)?;
    let mut csv = String::new();
    let ders: Vec<usize> = (0..model.n_nodes()).filter(|&i| mask[i]).collect();
    for &i in &ders {
        write!(
            csv,
            "vref_{n},delta_{n},sigma_{n},qbar_{n},",
            n = i + 1
        )
        .unwrap();
    }
    csv.push_str("objective\n");
    for rec in &result.evaluated {
        for v in &rec.values {
            write!(csv, "{v},").unwrap();
        }
        match rec.objective {
            Some(obj) => writeln!(csv, "{obj}").unwrap(),
            None => csv.push_str("infeasible\n"),
        }
    }
    std::fs::write(with_suffix(&a.out, ".grid.csv"), csv)?;
    write_manifest(
        &a.out,
        "oracle",
        json!({"epsilon": a.epsilon, "grid": a.grid, "qhat": a.qhat, "der": a.der}),
        &[&a.feeder, &a.scenarios],
        None,
    )?;
    println!(
        "grid search over {} candidates ({} feasible); best objective {}",
        result.evaluated.len(),
        result.feasible_count,
        result.best_objective,
    );
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    let model = load_feeder(&a.feeder)?;
    let optimized = rules::load_rules(&a.rules)?;
    let default = rules::default_rule(optimized.qhat.clone(), optimized.der_mask.clone())?;
    let set = feeder::load_scenarios(&a.scenarios, &model)?;

    let mut csv = String::from("scenario,node,no_compensation,default_rule,optimized_rule,note\n");
    let zero = DVector::zeros(model.n_nodes());
    for (s_idx, s) in set.scenarios.iter().enumerate() {
        let v_none = model.voltage(&zero, s)?;
        // a rule that fails to settle leaves its column empty for the row
        let v_default = dynamics::equilibrium_fixed_point(&model, &default, s, a.tol)
            .ok()
            .map(|eq| eq.v_star);
        let v_opt = dynamics::equilibrium_fixed_point(&model, &optimized, s, a.tol)
            .ok()
            .map(|eq| eq.v_star);
        let note = match (&v_default, &v_opt) {
            (Some(_), Some(_)) => "",
            (None, _) => "default rule did not converge",
            (_, None) => "optimized rule did not converge",
        };
        for i in 0..model.n_nodes() {
            let cell = |v: &Option<DVector<f64>>| {
                v.as_ref().map(|v| v[i].to_string()).unwrap_or_default()
            };
            writeln!(
                csv,
                "{},{},{},{},{},{note}",
                s_idx,
                i + 1,
                v_none[i],
                cell(&v_default),
                cell(&v_opt),
            )
            .unwrap();
        }
    }
    std::fs::write(with_suffix(&a.out, ".profile.csv"), csv)?;
    write_manifest(
        &a.out,
        "profile",
        json!({"tol": a.tol}),
        &[&a.feeder, &a.rules, &a.scenarios],
        None,
    )?;
    println!(
        "wrote voltage profiles for {} scenarios x {} nodes",
        set.len(),
        model.n_nodes()
    );
    Ok(())
}
