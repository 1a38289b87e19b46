//! Command-line front end: JSON run configurations, the `run` /
//! `graph-info` commands, and the named verification suites.
//!
//! Exit-code contract (enforced by `main`): 0 success, 1 invalid
//! configuration (the message names the offending key), 2 runtime failure,
//! 3 verification-suite failure.

use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decnet::{
    average_barycenter, write_barycenters_csv, write_trajectory_csv, BatchRule, Mode, NetworkRun,
    RunSettings,
};
use crate::dual_oracle::{dual_radius_bound, lipschitz_constant};
use crate::graph::{build_laplacian, generate_graph, GraphKind, GraphTopology};
use crate::metrics::{dual_objective_exact, sup_norm_diff};
use crate::pdasgd::{iterations_case_a, iterations_case_b, variance_bound, Case};
use crate::problem::{
    BarycenterProblem, CostKind, CostOracle, Domain, Measure, OmegaSpec, SupportGrid,
};
use crate::rng::{self, substream, Purpose};
use crate::verify::{
    equivalence_max_deviation, estimator_statistics, gradient_check, point_mass_lp_value,
    reference_barycenter,
};
use crate::{dual_oracle::DualPotential, Error, Result};

/// Environment variable naming the default output root for `run`.
pub const OUTPUT_ROOT_ENV: &str = "BARYNET_OUT";

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

/// Top-level run configuration (JSON). Unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub graph: GraphConfig,
    pub problem: ProblemConfig,
    /// Step-size regime: `"a"` (deterministic certificate) or `"b"`
    /// (noise-adapted).
    pub scheme: SchemeName,
    /// `"auto"` for the increasing schedule, or `{"m1": …, "m2": …}`.
    pub batches: BatchConfig,
    /// Communication rounds; omitted means the theory-derived count.
    #[serde(default)]
    pub iterations: Option<usize>,
    pub mode: ModeName,
    pub seed: u64,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_stride() -> usize {
    1
}

fn default_eval_samples() -> usize {
    256
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub kind: GraphKindName,
    pub m: usize,
    /// Edge probability; `erdos_renyi` only.
    #[serde(default)]
    pub p: Option<f64>,
    /// Even degree; `expander` only.
    #[serde(default)]
    pub degree: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKindName {
    Path,
    Cycle,
    Star,
    Complete,
    ErdosRenyi,
    Expander,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub support: SupportConfig,
    #[serde(default = "default_true")]
    pub normalize_cost: bool,
    #[serde(default = "default_cost")]
    pub cost: CostKind,
    pub measures: MeasuresConfig,
    pub epsilon: f64,
    /// Explicit `Ω`; conflicts with `ln_omega`.
    #[serde(default)]
    pub omega: Option<f64>,
    /// Explicit `ln Ω` (e.g. exactly 1 for integer sample accounting).
    #[serde(default)]
    pub ln_omega: Option<f64>,
    /// Direct regularization override; bypasses the `ε/(4 ln Ω)` rule.
    #[serde(default)]
    pub gamma: Option<f64>,
}

fn default_true() -> bool {
    true
}

fn default_cost() -> CostKind {
    CostKind::SqEuclidean
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SupportConfig {
    /// `n` evenly spaced points on `[lo, hi]`; sampling domain `[lo, hi]`.
    #[serde(rename = "regular_1d")]
    Regular1d { n: usize, lo: f64, hi: f64 },
    /// Explicit points; sampling domain `[0, 1]^dim`.
    Points { points: Vec<[f64; 2]>, dim: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasuresConfig {
    /// `count` isotropic Gaussians with means and stds drawn uniformly from
    /// the given ranges, deterministically from `seed`.
    GaussianRandom {
        count: usize,
        mean_range: [f64; 2],
        std_range: [f64; 2],
        seed: u64,
    },
    /// Explicit per-agent measures.
    List { measures: Vec<MeasureConfig> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureConfig {
    Finite { atoms: Vec<[f64; 2]>, probs: Vec<f64> },
    Gaussian { mean: [f64; 2], std: f64 },
    Mixture { components: Vec<MixtureComponent>, weights: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub mean: [f64; 2],
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    A,
    B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Quantized,
    Sampled,
    Exact,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchConfig {
    /// Must be the string `"auto"`.
    Named(String),
    Fixed(FixedBatches),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedBatches {
    pub m1: usize,
    pub m2: usize,
}

// ---------------------------------------------------------------------------
// Config loading and resolution
// ---------------------------------------------------------------------------

/// Reads and parses a run configuration, mapping every failure to an
/// invalid-configuration error whose message names the offending key.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::invalid("config", e.to_string()))
}

/// Builds the topology described by a graph section.
pub fn build_graph(cfg: &GraphConfig) -> Result<GraphTopology> {
    let kind = match cfg.kind {
        GraphKindName::Path => GraphKind::Path,
        GraphKindName::Cycle => GraphKind::Cycle,
        GraphKindName::Star => GraphKind::Star,
        GraphKindName::Complete => GraphKind::Complete,
        GraphKindName::ErdosRenyi => {
            let p = cfg
                .p
                .ok_or_else(|| Error::invalid("graph.p", "erdos_renyi needs an edge probability"))?;
            GraphKind::ErdosRenyi { p }
        }
        GraphKindName::Expander => {
            let degree = cfg
                .degree
                .ok_or_else(|| Error::invalid("graph.degree", "expander needs an even degree"))?;
            GraphKind::Expander { degree }
        }
    };
    if cfg.p.is_some() && cfg.kind != GraphKindName::ErdosRenyi {
        return Err(Error::invalid("graph.p", "only erdos_renyi takes an edge probability"));
    }
    if cfg.degree.is_some() && cfg.kind != GraphKindName::Expander {
        return Err(Error::invalid("graph.degree", "only expander takes a degree"));
    }
    generate_graph(kind, cfg.m, cfg.seed)
}

fn build_support(cfg: &SupportConfig) -> Result<(SupportGrid, Domain)> {
    match cfg {
        SupportConfig::Regular1d { n, lo, hi } => {
            let grid = SupportGrid::regular_1d(*n, *lo, *hi)?;
            Ok((grid, Domain::interval(*lo, *hi)))
        }
        SupportConfig::Points { points, dim } => {
            let grid = SupportGrid::new(points.clone(), *dim)?;
            Ok((grid, Domain::unit(*dim)))
        }
    }
}

fn build_measures(cfg: &MeasuresConfig, m: usize, dim: usize) -> Result<Vec<Measure>> {
    match cfg {
        MeasuresConfig::GaussianRandom { count, mean_range, std_range, seed } => {
            if *count != m {
                return Err(Error::invalid(
                    "measures.count",
                    format!("{count} measures for {m} graph nodes"),
                ));
            }
            if !(mean_range[0] <= mean_range[1]) {
                return Err(Error::invalid("measures.mean_range", "need lo ≤ hi"));
            }
            if !(std_range[0] > 0.0 && std_range[0] <= std_range[1]) {
                return Err(Error::invalid("measures.std_range", "need 0 < lo ≤ hi"));
            }
            Ok((0..m)
                .map(|i| {
                    let mut s = substream(*seed, i as u64, Purpose::GraphGen);
                    let span = mean_range[1] - mean_range[0];
                    let mut mean = [0.0, 0.0];
                    for c in mean.iter_mut().take(dim) {
                        *c = mean_range[0] + span * rng::uniform(&mut s);
                    }
                    let std = std_range[0]
                        + (std_range[1] - std_range[0]) * rng::uniform(&mut s);
                    Measure::Gaussian { mean, std }
                })
                .collect())
        }
        MeasuresConfig::List { measures } => {
            if measures.len() != m {
                return Err(Error::invalid(
                    "measures",
                    format!("{} measures for {m} graph nodes", measures.len()),
                ));
            }
            measures
                .iter()
                .map(|mc| {
                    Ok(match mc {
                        MeasureConfig::Finite { atoms, probs } => Measure::FiniteSupport {
                            atoms: atoms.clone(),
                            probs: probs.clone(),
                        },
                        MeasureConfig::Gaussian { mean, std } => {
                            Measure::Gaussian { mean: *mean, std: *std }
                        }
                        MeasureConfig::Mixture { components, weights } => {
                            Measure::GaussianMixture {
                                components: components.iter().map(|c| (c.mean, c.std)).collect(),
                                weights: weights.clone(),
                            }
                        }
                    })
                })
                .collect()
        }
    }
}

/// Builds the problem instance described by a problem section.
pub fn build_problem(cfg: &ProblemConfig, m: usize) -> Result<BarycenterProblem> {
    let (grid, domain) = build_support(&cfg.support)?;
    let cost = CostOracle::new(cfg.cost, cfg.normalize_cost, &grid, &domain);
    let measures = build_measures(&cfg.measures, m, grid.dim())?;
    let omega = match (cfg.omega, cfg.ln_omega) {
        (Some(_), Some(_)) => {
            return Err(Error::invalid("omega", "give either omega or ln_omega, not both"))
        }
        (Some(w), None) => OmegaSpec::Omega(w),
        (None, Some(l)) => OmegaSpec::LnOmega(l),
        (None, None) => OmegaSpec::Auto,
    };
    BarycenterProblem::new(grid, cost, measures, cfg.epsilon, omega, &domain, cfg.gamma)
}

/// Translates config-level knobs (plus CLI overrides) into run settings.
pub fn build_settings(
    cfg: &RunConfig,
    seed_override: Option<u64>,
    iters_override: Option<usize>,
) -> Result<RunSettings> {
    let batches = match &cfg.batches {
        BatchConfig::Named(s) if s == "auto" => BatchRule::Auto,
        BatchConfig::Named(s) => {
            return Err(Error::invalid(
                "batches",
                format!("expected \"auto\" or {{\"m1\": …, \"m2\": …}}, got \"{s}\""),
            ))
        }
        BatchConfig::Fixed(f) => BatchRule::Fixed { m1: f.m1, m2: f.m2 },
    };
    Ok(RunSettings {
        mode: match cfg.mode {
            ModeName::Quantized => Mode::Quantized,
            ModeName::Sampled => Mode::SampledOnly,
            ModeName::Exact => Mode::Exact,
        },
        case: match cfg.scheme {
            SchemeName::A => Case::A,
            SchemeName::B => Case::B,
        },
        batches,
        iterations: iters_override.or(cfg.iterations),
        record_stride: cfg.record_stride,
        eval_samples: cfg.eval_samples,
        seed: seed_override.unwrap_or(cfg.seed),
    })
}

/// Output directory precedence: `--out`, then the config's `output_dir`,
/// then `<root>/<config stem>` where `root` is the environment override or
/// `./runs`.
pub fn resolve_out_dir(
    config_path: &Path,
    cli_out: Option<&Path>,
    cfg_out: Option<&Path>,
    env_root: Option<&Path>,
) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    if let Some(p) = cfg_out {
        return p.to_path_buf();
    }
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let root = env_root.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(stem)
}

/// Maps an error to the process exit code contract.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidParameter { .. } | Error::Graph(_) | Error::Json(_) => 1,
        _ => 2,
    }
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

pub struct RunArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub iters: Option<usize>,
}

/// Executes a configured run and writes `trajectory.csv`,
/// `barycenters.csv`, and `resolved_config.json` into the output directory.
pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let graph = build_graph(&cfg.graph)?;
    let problem = build_problem(&cfg.problem, cfg.graph.m)?;
    let settings = build_settings(&cfg, args.seed, args.iters)?;
    let env_root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    let out_dir = resolve_out_dir(
        &args.config,
        args.out.as_deref(),
        cfg.output_dir.as_deref(),
        env_root.as_deref(),
    );

    let mut net = NetworkRun::new(problem, graph, settings)?;

    std::fs::create_dir_all(&out_dir)?;
    let resolved = resolved_config_json(&cfg, &net);
    let resolved_path = out_dir.join("resolved_config.json");
    std::fs::write(&resolved_path, serde_json::to_string_pretty(&resolved)? + "\n")?;

    let output = net.run()?;

    let traj_path = out_dir.join("trajectory.csv");
    let mut traj = BufWriter::new(File::create(&traj_path)?);
    write_trajectory_csv(&mut traj, &output.logs)?;
    traj.flush()?;

    let bary_path = out_dir.join("barycenters.csv");
    let mut bary = BufWriter::new(File::create(&bary_path)?);
    write_barycenters_csv(&mut bary, net.problem().grid(), &output.p_hats)?;
    bary.flush()?;

    let d = net.derived();
    println!("gamma = {:.6e}", d.gamma);
    println!("lipschitz = {:.6e}", d.lipschitz);
    match d.radius {
        Some(r) => println!("radius = {:.6e}", r),
        None => println!("radius = n/a"),
    }
    match d.sigma_bound {
        Some(s) => println!("sigma = {:.6e}", s),
        None => println!("sigma = n/a"),
    }
    println!("iterations = {}", d.iterations);
    let last = output.logs.last().expect("a run always logs at least round 0");
    println!("final_consensus_gap_w = {:.6e}", last.gap.gap_w);
    println!("final_consensus_gap_max = {:.6e}", last.gap.gap_max);
    println!("final_dual_estimate = {:.6e}", last.dual_estimate);
    let c = &output.cumulative;
    println!(
        "totals: samples = {}, messages = {}, coords = {}, bits = {}",
        c.samples, c.messages, c.coords, c.bits
    );
    for path in [&resolved_path, &traj_path, &bary_path] {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn resolved_config_json(cfg: &RunConfig, net: &NetworkRun) -> serde_json::Value {
    let d = net.derived();
    let lap = net.laplacian();
    serde_json::json!({
        "config": cfg,
        "effective_seed": net.settings().seed,
        "derived": {
            "gamma": d.gamma,
            "ln_omega": d.ln_omega,
            "lambda_max": d.lambda_max,
            "lambda_min_plus": d.lambda_min_plus,
            "chi": lap.chi,
            "kappa": lap.kappa,
            "edge_count": net.graph().edge_count(),
            "lipschitz": d.lipschitz,
            "radius": d.radius,
            "sigma_bound": d.sigma_bound,
            "iterations": d.iterations,
        },
    })
}

// ---------------------------------------------------------------------------
// graph-info
// ---------------------------------------------------------------------------

/// Renders the spectral and complexity table for a configuration.
pub fn graph_info_text(cfg: &RunConfig) -> Result<String> {
    let graph = build_graph(&cfg.graph)?;
    let lap = build_laplacian(&graph)?;
    let problem = build_problem(&cfg.problem, cfg.graph.m)?;

    let m = graph.m();
    let lipschitz = lipschitz_constant(m, lap.lambda_max, problem.gamma());
    let radius = if lap.lambda_min_plus > 0.0 {
        Some(dual_radius_bound(problem.n(), m, lap.lambda_min_plus)?)
    } else {
        None
    };

    let mut out = String::new();
    out.push_str(&format!("m = {m}\n"));
    out.push_str(&format!("edges = {}\n", graph.edge_count()));
    out.push_str(&format!("lambda_max = {:.12e}\n", lap.lambda_max));
    out.push_str(&format!("lambda_min_plus = {:.12e}\n", lap.lambda_min_plus));
    out.push_str(&format!("chi = {:.12e}\n", lap.chi));
    out.push_str(&format!("kappa = {}\n", lap.kappa));
    out.push_str(&format!("gamma = {:.12e}\n", problem.gamma()));
    out.push_str(&format!("lipschitz = {:.12e}\n", lipschitz));
    match radius {
        Some(r) => out.push_str(&format!("radius = {:.12e}\n", r)),
        None => out.push_str("radius = n/a\n"),
    }
    match radius {
        Some(r) => {
            let n_a = iterations_case_a(lipschitz, r, problem.epsilon())?;
            out.push_str(&format!("scheme_a_iterations = {n_a}\n"));
            match &cfg.batches {
                BatchConfig::Fixed(f) => {
                    let m1s = vec![f.m1; m];
                    let m2s = vec![f.m2; m];
                    let sigma = variance_bound(lap.lambda_max, &m1s, &m2s).sqrt();
                    let n_b = iterations_case_b(lipschitz, r, problem.epsilon(), sigma)?;
                    out.push_str(&format!("scheme_b_sigma = {sigma:.12e}\n"));
                    out.push_str(&format!("scheme_b_iterations = {n_b}\n"));
                }
                BatchConfig::Named(_) => {
                    out.push_str("scheme_b_sigma = n/a (auto batches)\n");
                    out.push_str("scheme_b_iterations = n/a (auto batches)\n");
                }
            }
        }
        None => {
            out.push_str("scheme_a_iterations = n/a\n");
            out.push_str("scheme_b_iterations = n/a\n");
        }
    }
    Ok(out)
}

pub fn cmd_graph_info(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    print!("{}", graph_info_text(&cfg)?);
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub label: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Pass/fail table for terminal output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self.checks.iter().map(|c| c.label.len()).max().unwrap_or(0);
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("[{status}] {:width$}  {}\n", c.label, c.detail));
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        out.push_str(&format!(
            "suite {}: {passed}/{} checks passed\n",
            self.name,
            self.checks.len()
        ));
        out
    }
}

fn check(label: impl Into<String>, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult { label: label.into(), passed, detail: detail.into() }
}

/// Runs one named suite: `gradients`, `estimator`, `equivalence`, or
/// `convergence`.
pub fn run_suite(name: &str) -> Result<SuiteReport> {
    match name {
        "gradients" => suite_gradients(),
        "estimator" => suite_estimator(),
        "equivalence" => suite_equivalence(),
        "convergence" => suite_convergence(),
        other => Err(Error::invalid(
            "suite",
            format!("unknown suite `{other}`; expected gradients, estimator, equivalence, or convergence"),
        )),
    }
}

pub fn cmd_verify(name: &str) -> Result<bool> {
    let report = run_suite(name)?;
    print!("{}", report.render());
    Ok(report.all_passed())
}

fn suite_gradients() -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for &gamma in &[1.0, 0.1, 0.01] {
        for seed in 0..6u64 {
            let rel = gradient_check(seed, gamma)?;
            checks.push(check(
                format!("fd-vs-exact gamma={gamma} seed={seed}"),
                rel <= 1e-5,
                format!("relative error {rel:.3e} (tolerance 1e-5)"),
            ));
        }
    }
    Ok(SuiteReport { name: "gradients".into(), checks })
}

/// Point masses at `i/(m-1)` on a 3-point grid; the workhorse small instance.
fn point_mass_problem(m: usize, gamma: f64) -> Result<BarycenterProblem> {
    let grid = SupportGrid::regular_1d(3, 0.0, 1.0)?;
    let domain = Domain::unit(1);
    let cost = CostOracle::new(CostKind::SqEuclidean, true, &grid, &domain);
    let measures = (0..m)
        .map(|i| Measure::FiniteSupport {
            atoms: vec![[i as f64 / (m - 1).max(1) as f64, 0.0]],
            probs: vec![1.0],
        })
        .collect();
    BarycenterProblem::new(grid, cost, measures, 1.0, OmegaSpec::Auto, &domain, Some(gamma))
}

fn suite_estimator() -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let cases = [
        ("k2", generate_graph(GraphKind::Complete, 2, 0)?),
        ("path3", generate_graph(GraphKind::Path, 3, 0)?),
    ];
    for (gname, graph) in &cases {
        let problem = point_mass_problem(graph.m(), 0.5)?;
        let lams: Vec<DualPotential> =
            (0..graph.m()).map(|_| DualPotential::zeros(problem.n())).collect();
        for &(m1, m2) in &[(1usize, 1usize), (1, 10), (10, 1)] {
            let stats =
                estimator_statistics(&problem, graph, &lams, Some(m1), Some(m2), 2000, 99)?;
            let worst = stats
                .mean_error
                .iter()
                .zip(&stats.per_coord_se)
                .map(|(mean, se)| if *se > 0.0 { mean.abs() / se } else { 0.0 })
                .fold(0.0f64, f64::max);
            checks.push(check(
                format!("{gname} ({m1},{m2}) unbiased"),
                worst <= 5.0,
                format!("worst |mean|/se = {worst:.2} (limit 5)"),
            ));
            checks.push(check(
                format!("{gname} ({m1},{m2}) variance"),
                stats.empirical_variance <= stats.bound,
                format!("empirical {:.4} ≤ bound {:.4}", stats.empirical_variance, stats.bound),
            ));
        }
    }
    Ok(SuiteReport { name: "estimator".into(), checks })
}

fn suite_equivalence() -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let cases = [
        ("k2", generate_graph(GraphKind::Complete, 2, 0)?),
        ("path3", generate_graph(GraphKind::Path, 3, 0)?),
    ];
    for (gname, graph) in &cases {
        let problem = point_mass_problem(graph.m(), 0.5)?;
        let dev = equivalence_max_deviation(&problem, graph, 10, 7)?;
        checks.push(check(
            format!("{gname} exact-mode trajectory"),
            dev <= 1e-10,
            format!("max deviation {dev:.3e} over 10 rounds (tolerance 1e-10)"),
        ));
    }
    Ok(SuiteReport { name: "equivalence".into(), checks })
}

fn suite_convergence() -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let graph = generate_graph(GraphKind::Complete, 2, 0)?;

    // Two point masses at the interval ends, gamma 0.1 via ε = 0.4, ln Ω = 1.
    let make_problem = |epsilon: f64| -> Result<BarycenterProblem> {
        let grid = SupportGrid::regular_1d(3, 0.0, 1.0)?;
        let domain = Domain::unit(1);
        let cost = CostOracle::new(CostKind::SqEuclidean, true, &grid, &domain);
        let measures = vec![
            Measure::FiniteSupport { atoms: vec![[0.0, 0.0]], probs: vec![1.0] },
            Measure::FiniteSupport { atoms: vec![[1.0, 0.0]], probs: vec![1.0] },
        ];
        BarycenterProblem::new(
            grid,
            cost,
            measures,
            epsilon,
            OmegaSpec::LnOmega(1.0),
            &domain,
            None,
        )
    };

    let problem = make_problem(0.4)?; // gamma = 0.1
    let reference = reference_barycenter(&problem, &graph, 1e-8, 11)?;
    let p_ref = &reference.p_star[0];

    let quantized = |case: Case, batches: BatchRule, iterations: usize, seed: u64| -> Result<(f64, f64)> {
        let mut net = NetworkRun::new(
            problem.clone(),
            graph.clone(),
            RunSettings {
                mode: Mode::Quantized,
                case,
                batches,
                iterations: Some(iterations),
                record_stride: iterations,
                eval_samples: 64,
                seed,
            },
        )?;
        let output = net.run()?;
        let gap_w = output.logs.last().unwrap().gap.gap_w;
        let avg = average_barycenter(&output.p_hats);
        Ok((gap_w, sup_norm_diff(&avg, p_ref)))
    };

    let (gap_auto, diff_auto) = quantized(Case::A, BatchRule::Auto, 200, 21)?;
    checks.push(check(
        "k2 quantized auto gap",
        gap_auto <= 1e-2,
        format!("consensus gap_w {gap_auto:.3e} (tolerance 1e-2)"),
    ));
    checks.push(check(
        "k2 quantized auto barycenter",
        diff_auto <= 2e-2,
        format!("sup-norm vs reference {diff_auto:.3e} (tolerance 2e-2)"),
    ));

    // The constant-batch schedule's β grows with the noise term, so its
    // consensus gap needs far more rounds than the increasing-batch run.
    let (gap_b, diff_b) = quantized(Case::B, BatchRule::Fixed { m1: 32, m2: 32 }, 5000, 5)?;
    checks.push(check(
        "k2 quantized m=32 gap",
        gap_b <= 1e-2,
        format!("consensus gap_w {gap_b:.3e} (tolerance 1e-2)"),
    ));
    checks.push(check(
        "k2 quantized m=32 barycenter",
        diff_b <= 2e-2,
        format!("sup-norm vs reference {diff_b:.3e} (tolerance 2e-2)"),
    ));

    // Halving ε (which halves γ and doubles the derived round count): the
    // final dual value's gap to the fixed unregularized optimum shrinks by
    // ≥ 1.5× per step. Point-mass measures make that optimum available in
    // closed form.
    let mut gaps = Vec::new();
    for &eps in &[0.4, 0.2] {
        let p = make_problem(eps)?;
        let lp = point_mass_lp_value(&p)?;
        let mut net = NetworkRun::new(
            p.clone(),
            graph.clone(),
            RunSettings {
                mode: Mode::Exact,
                case: Case::A,
                batches: BatchRule::Fixed { m1: 1, m2: 1 },
                iterations: None,
                record_stride: usize::MAX,
                eval_samples: 1,
                seed: 0,
            },
        )?;
        net.run()?;
        let etas: Vec<DualPotential> =
            net.etas().into_iter().map(|values| DualPotential { values }).collect();
        let value = dual_objective_exact(&etas, &p)?;
        gaps.push(value + lp);
    }
    let ratio = gaps[0] / gaps[1].max(f64::MIN_POSITIVE);
    checks.push(check(
        "k2 exact epsilon halving",
        gaps.iter().all(|&g| g > 0.0) && ratio >= 1.5,
        format!("dual gap {:.3e} → {:.3e}, ratio {ratio:.2} (≥ 1.5)", gaps[0], gaps[1]),
    ));

    Ok(SuiteReport { name: "convergence".into(), checks })
}
