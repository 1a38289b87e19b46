//! Progress metrics for networked runs: consensus gaps between local
//! barycenter estimates and common-random-number estimates of the dual
//! objective.

use crate::dual_oracle::{self, DualPotential};
use crate::graph::GraphTopology;
use crate::problem::{BarycenterProblem, Point};
use crate::rng::{substream, Purpose};
use crate::{Error, Result};

/// Disagreement between the agents' local vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsensusReport {
    /// `√(p̂ᵀ W p̂)`, evaluated as the edge sum
    /// `√(Σ_{(i,j) ∈ E} ‖p_i − p_j‖²)` — identical for the graph Laplacian
    /// and free of cancellation.
    pub gap_w: f64,
    /// Largest pairwise `‖p_i − p_j‖₂` over *all* agent pairs.
    pub gap_max: f64,
}

/// Computes both consensus gaps for per-agent vectors of equal length.
pub fn consensus_gap(graph: &GraphTopology, locals: &[Vec<f64>]) -> Result<ConsensusReport> {
    if locals.len() != graph.m() {
        return Err(Error::invalid(
            "locals",
            format!("got {} vectors for {} agents", locals.len(), graph.m()),
        ));
    }
    let n = locals.first().map(Vec::len).unwrap_or(0);
    if locals.iter().any(|v| v.len() != n) {
        return Err(Error::invalid("locals", "agent vectors differ in length"));
    }

    let sq_dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    let edge_sum: f64 = graph
        .edges()
        .iter()
        .map(|&(i, j)| sq_dist(&locals[i], &locals[j]))
        .sum();

    let mut max_sq = 0.0f64;
    for i in 0..locals.len() {
        for j in (i + 1)..locals.len() {
            max_sq = max_sq.max(sq_dist(&locals[i], &locals[j]));
        }
    }

    Ok(ConsensusReport { gap_w: edge_sum.max(0.0).sqrt(), gap_max: max_sq.sqrt() })
}

/// Draws one fixed evaluation pool per agent (`pool_size` points from μ_i).
/// Reusing the pool across rounds makes successive dual estimates comparable:
/// the sampling noise is common to every evaluation.
pub fn build_eval_pools(
    problem: &BarycenterProblem,
    pool_size: usize,
    master_seed: u64,
) -> Result<Vec<Vec<Point>>> {
    if pool_size == 0 {
        return Err(Error::invalid("eval_samples", "must be at least 1"));
    }
    let dim = problem.grid().dim();
    Ok(problem
        .measures()
        .iter()
        .enumerate()
        .map(|(i, mu)| {
            let mut stream = substream(master_seed, i as u64, Purpose::Eval);
            (0..pool_size).map(|_| mu.sample(dim, &mut stream)).collect()
        })
        .collect())
}

/// Monte-Carlo estimate of the dual objective `(1/m) Σ_i E[value_i(λ̄_i)]`
/// with `m_samples` fresh draws from each agent's measure.
pub fn dual_objective_estimate(
    lam_bars: &[DualPotential],
    problem: &BarycenterProblem,
    m_samples: usize,
    stream: &mut crate::rng::Stream,
) -> Result<f64> {
    let m = problem.m();
    if lam_bars.len() != m {
        return Err(Error::invalid("lam_bars", "need one potential per agent"));
    }
    if m_samples == 0 {
        return Err(Error::invalid("m_samples", "must be at least 1"));
    }
    let total: f64 = lam_bars
        .iter()
        .zip(problem.measures())
        .map(|(lam, mu)| {
            dual_oracle::dual_local_value(
                lam,
                mu,
                problem.grid(),
                problem.cost(),
                problem.gamma(),
                m_samples,
                stream,
            )
        })
        .sum();
    Ok(total / m as f64)
}

/// Dual-objective estimate over fixed per-agent evaluation pools (common
/// random numbers): successive calls share the sampling noise, so differences
/// between rounds reflect the potentials, not the draws.
pub fn dual_objective_with_pools(
    etas: &[DualPotential],
    problem: &BarycenterProblem,
    pools: &[Vec<Point>],
) -> Result<f64> {
    let m = problem.m();
    if etas.len() != m || pools.len() != m {
        return Err(Error::invalid("etas", "need one potential and one pool per agent"));
    }
    let total: f64 = etas
        .iter()
        .zip(pools)
        .map(|(eta, pool)| {
            dual_oracle::dual_local_value_at_points(
                eta,
                problem.grid(),
                problem.cost(),
                problem.gamma(),
                pool,
            )
        })
        .sum();
    Ok(total / m as f64)
}

/// Exact dual objective for problems whose measures all have finite support.
pub fn dual_objective_exact(etas: &[DualPotential], problem: &BarycenterProblem) -> Result<f64> {
    let m = problem.m();
    if etas.len() != m {
        return Err(Error::invalid("etas", "need one potential per agent"));
    }
    let mut total = 0.0;
    for (eta, mu) in etas.iter().zip(problem.measures()) {
        total += dual_oracle::dual_local_value_exact(
            eta,
            mu,
            problem.grid(),
            problem.cost(),
            problem.gamma(),
        )?;
    }
    Ok(total / m as f64)
}

/// Trailing moving average with window `w`: entry `t` averages
/// `xs[t+1−w ..= t]`, defined for `t ≥ w−1`.
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    assert!(w >= 1);
    if xs.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - w + 1);
    let mut sum: f64 = xs[..w].iter().sum();
    out.push(sum / w as f64);
    for t in w..xs.len() {
        sum += xs[t] - xs[t - w];
        out.push(sum / w as f64);
    }
    out
}

/// `‖a − b‖∞` for equally sized slices.
pub fn sup_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
