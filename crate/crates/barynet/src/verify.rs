//! Independent verification oracles: central finite differences, a
//! high-precision reference solve of the stacked dual problem, and the
//! statistical harness for the double-sampling unbiasedness/variance claims.
//!
//! This module is the only place where the stacked dual variable
//! `λ ∈ ℝ^{mn}` and the matrix square root `√W` are materialized; the
//! network simulator works purely with Laplacian rows. Reference solves use
//! exact gradients, so they are restricted to finite-support measures.

use nalgebra::DMatrix;

use crate::dual_oracle::{
    dual_local_value_exact, exact_gradient_finite, quantize_gradient, sampled_gradient,
    DualPotential,
};
use crate::graph::{build_laplacian, sqrt_laplacian, GraphTopology};
use crate::pdasgd::{OracleSample, PdasgdSolver, Schedule, StochasticDualOracle};
use crate::problem::{BarycenterProblem, CostKind, CostOracle, Domain, Measure, SupportGrid};
use crate::rng::{self, substream, Purpose, Stream};
use crate::{Error, Result};

/// Central finite differences `(f(x + h e_l) − f(x − h e_l)) / (2h)`.
pub fn finite_diff_gradient<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0);
    let mut grad = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for l in 0..point.len() {
        let orig = x[l];
        x[l] = orig + h;
        let up = f(&x);
        x[l] = orig - h;
        let down = f(&x);
        x[l] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// The stacked dual problem: `φ(λ) = (1/m) Σ_i value_i(λ̄_i)` with
/// `λ̄_i = m[√W λ]_i`, exact gradients, and the primal candidate stack.
pub struct StackedDualOracle<'a> {
    problem: &'a BarycenterProblem,
    sqrt_w: DMatrix<f64>,
    m: usize,
    n: usize,
}

impl<'a> StackedDualOracle<'a> {
    pub fn new(problem: &'a BarycenterProblem, graph: &GraphTopology) -> Result<Self> {
        if !problem.all_finite_support() {
            return Err(Error::invalid(
                "measures",
                "the stacked oracle needs finite-support measures",
            ));
        }
        if graph.m() != problem.m() {
            return Err(Error::invalid(
                "graph",
                format!("{} nodes for {} measures", graph.m(), problem.m()),
            ));
        }
        let laplacian = build_laplacian(graph)?;
        Ok(StackedDualOracle {
            problem,
            sqrt_w: sqrt_laplacian(&laplacian),
            m: graph.m(),
            n: problem.n(),
        })
    }

    /// Transformed per-agent potentials `λ̄_i = m[√W λ]_i`.
    pub fn eta_bars(&self, lam: &[f64]) -> Vec<Vec<f64>> {
        let m_f = self.m as f64;
        (0..self.m)
            .map(|i| {
                let mut block = vec![0.0; self.n];
                for j in 0..self.m {
                    let w = self.sqrt_w[(i, j)];
                    if w != 0.0 {
                        let src = &lam[j * self.n..(j + 1) * self.n];
                        for (b, v) in block.iter_mut().zip(src) {
                            *b += m_f * w * v;
                        }
                    }
                }
                block
            })
            .collect()
    }

    fn local_gradients(&self, lam: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.eta_bars(lam)
            .into_iter()
            .zip(self.problem.measures())
            .map(|(bar, mu)| {
                let lam_bar = DualPotential { values: bar };
                Ok(exact_gradient_finite(
                    &lam_bar,
                    mu,
                    self.problem.grid(),
                    self.problem.cost(),
                    self.problem.gamma(),
                )?
                .into_vec())
            })
            .collect()
    }

    /// Stacks per-agent blocks through `√W`: `out_i = Σ_j √W_ij·blocks_j`.
    fn assemble(&self, blocks: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.m * self.n];
        for i in 0..self.m {
            let dst = &mut out[i * self.n..(i + 1) * self.n];
            for j in 0..self.m {
                let w = self.sqrt_w[(i, j)];
                if w != 0.0 {
                    for (d, v) in dst.iter_mut().zip(&blocks[j]) {
                        *d += w * v;
                    }
                }
            }
        }
        out
    }

    /// Exact dual value `φ(λ)` (constant-free convention).
    pub fn dual_value(&self, lam: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (bar, mu) in self.eta_bars(lam).into_iter().zip(self.problem.measures()) {
            total += dual_local_value_exact(
                &DualPotential { values: bar },
                mu,
                self.problem.grid(),
                self.problem.cost(),
                self.problem.gamma(),
            )?;
        }
        Ok(total / self.m as f64)
    }

    pub fn sqrt_w(&self) -> &DMatrix<f64> {
        &self.sqrt_w
    }
}

impl StochasticDualOracle for StackedDualOracle<'_> {
    fn dual_dim(&self) -> usize {
        self.m * self.n
    }

    fn primal_dim(&self) -> usize {
        self.m * self.n
    }

    fn sample(&mut self, lam: &[f64], _stream: &mut Stream) -> OracleSample {
        let locals = self
            .local_gradients(lam)
            .expect("finite-support gradients cannot fail after construction");
        let grad = self.assemble(&locals);
        let primal = locals.concat();
        OracleSample { grad, primal }
    }
}

/// Output of a reference solve.
#[derive(Clone, Debug)]
pub struct Reference {
    /// Per-agent barycenter blocks (all equal up to the tolerance).
    pub p_star: Vec<Vec<f64>>,
    /// The stacked dual point the solve ended at.
    pub lambda_star: Vec<f64>,
    /// Dual optimum `φ*` (constant-free convention).
    pub dual_value: f64,
    /// Rounds the solve used.
    pub iterations: usize,
}

/// Iteration cap for reference solves.
pub const REFERENCE_ITERATION_CAP: usize = 1_000_000;
const REFERENCE_CHECK_STRIDE: usize = 50;
const REFERENCE_PERTURBATION: f64 = 1e-3;

/// High-precision barycenter via the accelerated method on the stacked dual
/// with exact gradients, run until both the consensus residual of the primal
/// average and the dual-value change per check window fall below `tol`.
/// `perturb_seed` drives a small random prox-center offset, so independent
/// solves take different paths to the same optimum.
pub fn reference_barycenter(
    problem: &BarycenterProblem,
    graph: &GraphTopology,
    tol: f64,
    perturb_seed: u64,
) -> Result<Reference> {
    if !(tol >= 1e-10) {
        return Err(Error::invalid("tol", "reference solves support tol ≥ 1e-10"));
    }
    let m = graph.m();
    let n = problem.n();
    if m * n > 10_000 {
        return Err(Error::invalid("problem", "reference solves need m·n ≤ 10⁴"));
    }
    let laplacian = build_laplacian(graph)?;
    let lipschitz = m as f64 * laplacian.lambda_max / problem.gamma();
    let schedule = Schedule::case_a(lipschitz)?;
    let mut oracle = StackedDualOracle::new(problem, graph)?;

    let mut perturb_stream = substream(perturb_seed, 0, Purpose::Perturb);
    let z0: Vec<f64> = (0..m * n)
        .map(|_| REFERENCE_PERTURBATION * (2.0 * rng::uniform(&mut perturb_stream) - 1.0))
        .collect();

    let mut stream = substream(perturb_seed, 1, Purpose::Trial);
    let mut solver = PdasgdSolver::with_prox_center(schedule, z0, &mut oracle, &mut stream);

    let edges = graph.edges().to_vec();
    let residual = |xhat: &[f64]| -> f64 {
        let mut sum = 0.0;
        for &(i, j) in &edges {
            let a = &xhat[i * n..(i + 1) * n];
            let b = &xhat[j * n..(j + 1) * n];
            sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        sum.max(0.0).sqrt()
    };

    let mut prev_value = oracle.dual_value(solver.eta())?;
    let mut last_residual = f64::INFINITY;
    let mut last_change = f64::INFINITY;
    for iter in 1..=REFERENCE_ITERATION_CAP {
        solver.step(&mut oracle, &mut stream);
        if iter % REFERENCE_CHECK_STRIDE == 0 {
            let value = oracle.dual_value(solver.eta())?;
            last_residual = residual(solver.xhat());
            last_change = (value - prev_value).abs();
            prev_value = value;
            if last_residual < tol && last_change < tol {
                let p_star = solver
                    .xhat()
                    .chunks(n)
                    .map(|c| c.to_vec())
                    .collect();
                return Ok(Reference {
                    p_star,
                    lambda_star: solver.eta().to_vec(),
                    dual_value: value,
                    iterations: iter,
                });
            }
        }
    }
    Err(Error::NoConvergence(format!(
        "reference solve hit the {REFERENCE_ITERATION_CAP}-iteration cap: \
         residual {last_residual:.3e}, dual change {last_change:.3e}, tol {tol:.1e}"
    )))
}

/// Monte-Carlo statistics of the double-sampled stacked gradient error.
#[derive(Clone, Debug)]
pub struct EstimatorStats {
    /// Mean of each stacked error coordinate over the trials.
    pub mean_error: Vec<f64>,
    /// Standard error of each mean estimate.
    pub per_coord_se: Vec<f64>,
    /// Mean of `‖√W(g̃ − ḡ)‖²` over the trials.
    pub empirical_variance: f64,
    /// `2·λmax(W)·Σ_i (1/M₁ + 1/M₂)` with absent batches contributing zero.
    pub bound: f64,
    pub trials: usize,
}

/// Runs `trials` independent double-sampling draws at the given per-agent
/// potentials and compares the `√W`-assembled stochastic gradient against the
/// exact one. `None` batch sizes mean the exact surrogate (no sampling or no
/// quantization).
pub fn estimator_statistics(
    problem: &BarycenterProblem,
    graph: &GraphTopology,
    lam_bars: &[DualPotential],
    m1: Option<usize>,
    m2: Option<usize>,
    trials: usize,
    seed: u64,
) -> Result<EstimatorStats> {
    if !problem.all_finite_support() {
        return Err(Error::invalid("measures", "the harness needs finite-support measures"));
    }
    let m = problem.m();
    if graph.m() != m || lam_bars.len() != m {
        return Err(Error::invalid("lam_bars", "need one potential per agent"));
    }
    if trials == 0 {
        return Err(Error::invalid("trials", "must be at least 1"));
    }
    if m1 == Some(0) || m2 == Some(0) {
        return Err(Error::invalid("batches", "batch sizes must be at least 1"));
    }
    let n = problem.n();
    let laplacian = build_laplacian(graph)?;
    let sqrt_w = sqrt_laplacian(&laplacian);

    let exact: Vec<Vec<f64>> = lam_bars
        .iter()
        .zip(problem.measures())
        .map(|(lam, mu)| {
            Ok(exact_gradient_finite(lam, mu, problem.grid(), problem.cost(), problem.gamma())?
                .into_vec())
        })
        .collect::<Result<_>>()?;

    let inv = |b: Option<usize>| b.map_or(0.0, |v| 1.0 / v as f64);
    let bound = 2.0 * laplacian.lambda_max * m as f64 * (inv(m1) + inv(m2));

    let dim = m * n;
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    let mut sum_norm_sq = 0.0;
    let mut diffs = vec![vec![0.0; n]; m];
    for trial in 0..trials {
        let mut stream = substream(seed, trial as u64, Purpose::Trial);
        for i in 0..m {
            let p_bar = match m1 {
                Some(batch) => sampled_gradient(
                    &lam_bars[i],
                    &problem.measures()[i],
                    problem.grid(),
                    problem.cost(),
                    batch,
                    problem.gamma(),
                    &mut stream,
                ),
                None => crate::dual_oracle::SimplexVector::new(exact[i].clone())?,
            };
            let g_tilde = match m2 {
                Some(batch) => quantize_gradient(&p_bar, batch, &mut stream),
                None => p_bar,
            };
            for (d, (g, e)) in diffs[i]
                .iter_mut()
                .zip(g_tilde.probs().iter().zip(&exact[i]))
            {
                *d = g - e;
            }
        }
        for i in 0..m {
            for l in 0..n {
                let mut err = 0.0;
                for j in 0..m {
                    let w = sqrt_w[(i, j)];
                    if w != 0.0 {
                        err += w * diffs[j][l];
                    }
                }
                let idx = i * n + l;
                sum[idx] += err;
                sum_sq[idx] += err * err;
                sum_norm_sq += err * err;
            }
        }
    }

    let t = trials as f64;
    let mean_error: Vec<f64> = sum.iter().map(|s| s / t).collect();
    let per_coord_se: Vec<f64> = sum_sq
        .iter()
        .zip(&mean_error)
        .map(|(&sq, &mean)| {
            if trials < 2 {
                return f64::INFINITY;
            }
            let var = ((sq - t * mean * mean) / (t - 1.0)).max(0.0);
            (var / t).sqrt()
        })
        .collect();

    Ok(EstimatorStats {
        mean_error,
        per_coord_se,
        empirical_variance: sum_norm_sq / t,
        bound,
        trials,
    })
}

/// Exact optimal value of the *unregularized* barycenter problem when every
/// source measure is a single point mass.
///
/// With `μ_i = δ_{y_i}`, the transport cost from the barycenter `p` to `μ_i`
/// is linear: `Σ_l p_l·c_l(y_i)`. The average over agents is then minimized
/// by putting all mass on the cheapest support point, so the optimum is
/// `min_l (1/m)·Σ_i c_l(y_i)` — a closed form that serves as an independent
/// reference for the small-`γ` limit of the dual value (which approaches the
/// negated primal optimum under the constant-free convention).
pub fn point_mass_lp_value(problem: &BarycenterProblem) -> Result<f64> {
    let mut atoms = Vec::with_capacity(problem.m());
    for mu in problem.measures() {
        match mu {
            Measure::FiniteSupport { atoms: a, .. } if a.len() == 1 => atoms.push(a[0]),
            _ => {
                return Err(Error::invalid(
                    "measures",
                    "the closed form needs single-atom measures",
                ))
            }
        }
    }
    let m = problem.m() as f64;
    let best = problem
        .grid()
        .points()
        .iter()
        .map(|&z| atoms.iter().map(|&y| problem.cost().cost(z, y)).sum::<f64>() / m)
        .fold(f64::INFINITY, f64::min);
    Ok(best)
}

/// Relative L2 error between the central-finite-difference gradient of the
/// exact local dual value and the closed-form gradient, on the random
/// instance drawn from `seed` at regularization `gamma`.
pub fn gradient_check(seed: u64, gamma: f64) -> Result<f64> {
    let inst = random_gradient_instance(seed);
    let f = |lam: &[f64]| {
        dual_local_value_exact(
            &DualPotential { values: lam.to_vec() },
            &inst.measure,
            &inst.grid,
            &inst.cost,
            gamma,
        )
        .expect("finite-support dual value")
    };
    // Scale the step with γ: the value varies on the γ-scale, so too small a
    // step loses significance while too large a step leaves truncation error.
    let h = (1e-5 * gamma).clamp(1e-8, 1e-5);
    let fd = finite_diff_gradient(f, &inst.lam.values, h);
    let exact =
        exact_gradient_finite(&inst.lam, &inst.measure, &inst.grid, &inst.cost, gamma)?;
    let num: f64 = fd
        .iter()
        .zip(exact.probs())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = exact.probs().iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(num / den)
}

/// Runs the network in exact mode next to the accelerated method on the
/// stacked dual and returns the largest sup-norm deviation seen across the
/// transformed iterates (`λ̄`, `η̄`) and the primal averages over `rounds`
/// rounds.
pub fn equivalence_max_deviation(
    problem: &BarycenterProblem,
    graph: &GraphTopology,
    rounds: usize,
    seed: u64,
) -> Result<f64> {
    use crate::decnet::{BatchRule, Mode, NetworkRun, RunSettings};
    use crate::pdasgd::Case;

    let mut net = NetworkRun::new(
        problem.clone(),
        graph.clone(),
        RunSettings {
            mode: Mode::Exact,
            case: Case::A,
            batches: BatchRule::Fixed { m1: 1, m2: 1 },
            iterations: Some(rounds),
            record_stride: rounds.max(1),
            eval_samples: 1,
            seed,
        },
    )?;
    net.initialize()?;

    let laplacian = build_laplacian(graph)?;
    let lipschitz = graph.m() as f64 * laplacian.lambda_max / problem.gamma();
    let schedule = Schedule::case_a(lipschitz)?;
    let mut oracle = StackedDualOracle::new(problem, graph)?;
    let mut stream = substream(seed, 0, Purpose::Trial);
    let mut solver = PdasgdSolver::new(schedule, &mut oracle, &mut stream);

    let n = problem.n();
    let mut worst = 0.0f64;
    let mut track = |net: &NetworkRun, oracle: &StackedDualOracle, solver: &PdasgdSolver| {
        let central_lam = oracle.eta_bars(solver.last_lambda());
        for (mine, theirs) in net.lam_bars().iter().zip(&central_lam) {
            worst = worst.max(crate::metrics::sup_norm_diff(mine, theirs));
        }
        let central_eta = oracle.eta_bars(solver.eta());
        for (mine, theirs) in net.etas().iter().zip(&central_eta) {
            worst = worst.max(crate::metrics::sup_norm_diff(mine, theirs));
        }
        for (i, mine) in net.p_hats().iter().enumerate() {
            let theirs = &solver.xhat()[i * n..(i + 1) * n];
            worst = worst.max(crate::metrics::sup_norm_diff(mine, theirs));
        }
    };
    track(&net, &oracle, &solver);
    for _ in 0..rounds {
        net.step_round()?;
        solver.step(&mut oracle, &mut stream);
        track(&net, &oracle, &solver);
    }
    Ok(worst)
}

/// A randomly generated local-gradient test instance.
pub struct GradientInstance {
    pub grid: SupportGrid,
    pub cost: CostOracle,
    pub measure: Measure,
    pub lam: DualPotential,
}

/// Draws a random finite-support instance: `n ∈ [2, 10]` grid points in the
/// unit interval, up to 5 atoms, random weights, and a random potential in
/// `[−1, 1]^n`.
pub fn random_gradient_instance(seed: u64) -> GradientInstance {
    let mut stream = substream(seed, 0, Purpose::Trial);
    let n = 2 + (rng::uniform(&mut stream) * 9.0) as usize; // 2..=10
    let atoms_count = 1 + (rng::uniform(&mut stream) * 5.0) as usize; // 1..=5

    // Distinct, sorted grid points with a minimum spacing.
    let mut xs: Vec<f64> = (0..n)
        .map(|l| (l as f64 + rng::uniform(&mut stream) * 0.8) / n as f64)
        .collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let grid = SupportGrid::new(xs.into_iter().map(|x| [x, 0.0]).collect(), 1).unwrap();

    let domain = Domain::unit(1);
    let cost = CostOracle::new(CostKind::SqEuclidean, true, &grid, &domain);

    let atoms: Vec<[f64; 2]> = (0..atoms_count)
        .map(|a| [(a as f64 + rng::uniform(&mut stream)) / atoms_count as f64, 0.0])
        .collect();
    let mut probs: Vec<f64> = (0..atoms_count)
        .map(|_| 0.2 + rng::uniform(&mut stream))
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    let measure = Measure::FiniteSupport { atoms, probs };

    let lam = DualPotential::new(
        (0..n).map(|_| 2.0 * rng::uniform(&mut stream) - 1.0).collect(),
    )
    .unwrap();

    GradientInstance { grid, cost, measure, lam }
}
