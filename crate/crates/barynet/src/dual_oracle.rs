//! The dual machinery of the entropic transport problem: softmax transport
//! plans, sampled and quantized gradients, dual values, the Lipschitz
//! constant, and the dual-radius bound.
//!
//! Agent `i` holds a transformed dual potential `λ̄_i` and sees its local
//! dual term only through samples `Y ~ μ_i`:
//!
//! - value: `E_Y[ γ · log Σ_l exp((λ̄_l − c_l(Y)) / γ) ]`,
//! - gradient: `E_Y[ softmax((λ̄ − c(Y)) / γ) ]`, a point on the simplex.
//!
//! Dual values are reported up to the additive constant `−γ·E[log q(Y)]`
//! (independent of `λ̄`), since sampler-only measures expose no density; the
//! constant cancels in every convergence comparison made here. All softmax /
//! log-sum-exp evaluations subtract the max exponent first — `γ` can be tiny
//! and raw exponentials would overflow.

use crate::problem::{cost_vector, CostOracle, Measure, Point, SupportGrid};
use crate::rng::{self, Stream};
use crate::{Error, Result};

/// Tolerance on simplex-vector mass.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// The transformed dual variable `λ̄_i = m[√W λ]_i` held by one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPotential {
    pub values: Vec<f64>,
}

impl DualPotential {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dual potential entry".into()));
        }
        Ok(DualPotential { values })
    }

    pub fn zeros(n: usize) -> Self {
        DualPotential { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A probability vector on the support: entries nonnegative, mass 1 within
/// [`SIMPLEX_TOL`].
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexVector {
    probs: Vec<f64>,
}

impl SimplexVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("simplex", "empty vector"));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("simplex", "entries must be nonnegative and finite"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid("simplex", format!("mass {sum} differs from 1")));
        }
        Ok(SimplexVector { probs })
    }

    /// Uniform distribution on `n` coordinates.
    pub fn uniform(n: usize) -> Self {
        SimplexVector { probs: vec![1.0 / n as f64; n] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// `γ · log Σ_l exp(x_l / γ)` for `x_l = λ̄_l − c_l`, with max subtraction.
fn scaled_log_sum_exp(lam: &[f64], cvec: &[f64], gamma: f64) -> f64 {
    debug_assert_eq!(lam.len(), cvec.len());
    let mut hi = f64::NEG_INFINITY;
    for (l, c) in lam.iter().zip(cvec) {
        hi = hi.max((l - c) / gamma);
    }
    let sum: f64 = lam
        .iter()
        .zip(cvec)
        .map(|(l, c)| ((l - c) / gamma - hi).exp())
        .sum();
    gamma * (hi + sum.ln())
}

/// The softmax transport plan `softmax((λ̄ − c) / γ)` for one source point.
pub fn softmax_transport_plan(lam: &DualPotential, cvec: &[f64], gamma: f64) -> SimplexVector {
    debug_assert_eq!(lam.len(), cvec.len());
    debug_assert!(gamma > 0.0);
    let mut hi = f64::NEG_INFINITY;
    for (l, c) in lam.values.iter().zip(cvec) {
        hi = hi.max((l - c) / gamma);
    }
    let mut probs: Vec<f64> = lam
        .values
        .iter()
        .zip(cvec)
        .map(|(l, c)| ((l - c) / gamma - hi).exp())
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    SimplexVector { probs }
}

/// The M₁-sampled gradient: the average softmax plan over `m1` i.i.d. draws
/// `Y_r ~ μ` from `stream`.
pub fn sampled_gradient(
    lam: &DualPotential,
    measure: &Measure,
    grid: &SupportGrid,
    cost: &CostOracle,
    m1: usize,
    gamma: f64,
    stream: &mut Stream,
) -> SimplexVector {
    debug_assert!(m1 >= 1);
    let n = grid.n();
    let mut acc = vec![0.0; n];
    for _ in 0..m1 {
        let y = measure.sample(grid.dim(), stream);
        let plan = softmax_transport_plan(lam, &cost_vector(grid, cost, y), gamma);
        for (a, p) in acc.iter_mut().zip(plan.probs()) {
            *a += p;
        }
    }
    for a in &mut acc {
        *a /= m1 as f64;
    }
    SimplexVector { probs: acc }
}

/// Sparse histogram of `m2` categorical draws from `pbar`: sorted
/// `(coordinate, count)` pairs with counts ≥ 1 summing to `m2`. One fresh
/// uniform is consumed per draw (inverse CDF, strict `cumulative > u`).
pub fn quantize_counts(
    pbar: &SimplexVector,
    m2: usize,
    stream: &mut Stream,
) -> Vec<(usize, u32)> {
    quantize_counts_with(pbar, m2, &mut || rng::uniform(stream))
}

/// Core of [`quantize_counts`] with an explicit uniform source, so recorded
/// `u`-sequences can be replayed in tests.
pub fn quantize_counts_with(
    pbar: &SimplexVector,
    m2: usize,
    next_uniform: &mut dyn FnMut() -> f64,
) -> Vec<(usize, u32)> {
    debug_assert!(m2 >= 1);
    let mut counts = vec![0u32; pbar.len()];
    for _ in 0..m2 {
        counts[rng::categorical_index(pbar.probs(), next_uniform())] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c > 0)
        .collect()
}

/// Expands sparse counts into the dense histogram `counts / m2`.
pub fn histogram_from_counts(entries: &[(usize, u32)], n: usize, m2: usize) -> SimplexVector {
    let mut probs = vec![0.0; n];
    for &(idx, c) in entries {
        probs[idx] = c as f64 / m2 as f64;
    }
    SimplexVector { probs }
}

/// The quantized gradient: dense histogram of `m2` categorical draws from
/// `pbar`. Entries are integer multiples of `1/m2`, at most `min(m2, n)` of
/// them nonzero; conditionally unbiased for `pbar`.
pub fn quantize_gradient(pbar: &SimplexVector, m2: usize, stream: &mut Stream) -> SimplexVector {
    histogram_from_counts(&quantize_counts(pbar, m2, stream), pbar.len(), m2)
}

/// The exact local gradient `Σ_s q_s · softmax((λ̄ − c(y_s)) / γ)` for a
/// finite-support measure.
pub fn exact_gradient_finite(
    lam: &DualPotential,
    measure: &Measure,
    grid: &SupportGrid,
    cost: &CostOracle,
    gamma: f64,
) -> Result<SimplexVector> {
    let Measure::FiniteSupport { atoms, probs } = measure else {
        return Err(Error::invalid(
            "measure",
            "exact gradients require a finite-support measure",
        ));
    };
    let mut acc = vec![0.0; grid.n()];
    for (y, &q) in atoms.iter().zip(probs) {
        let plan = softmax_transport_plan(lam, &cost_vector(grid, cost, *y), gamma);
        for (a, p) in acc.iter_mut().zip(plan.probs()) {
            *a += q * p;
        }
    }
    // Compensate accumulated rounding so downstream simplex checks stay exact.
    let sum: f64 = acc.iter().sum();
    for a in &mut acc {
        *a /= sum;
    }
    Ok(SimplexVector { probs: acc })
}

/// Monte-Carlo estimate of the local dual value over `m_samples` draws.
pub fn dual_local_value(
    lam: &DualPotential,
    measure: &Measure,
    grid: &SupportGrid,
    cost: &CostOracle,
    gamma: f64,
    m_samples: usize,
    stream: &mut Stream,
) -> f64 {
    debug_assert!(m_samples >= 1);
    let total: f64 = (0..m_samples)
        .map(|_| {
            let y = measure.sample(grid.dim(), stream);
            scaled_log_sum_exp(&lam.values, &cost_vector(grid, cost, y), gamma)
        })
        .sum();
    total / m_samples as f64
}

/// Local dual value averaged over a fixed evaluation pool of points (common
/// random numbers across evaluations).
pub fn dual_local_value_at_points(
    lam: &DualPotential,
    grid: &SupportGrid,
    cost: &CostOracle,
    gamma: f64,
    points: &[Point],
) -> f64 {
    debug_assert!(!points.is_empty());
    let total: f64 = points
        .iter()
        .map(|&y| scaled_log_sum_exp(&lam.values, &cost_vector(grid, cost, y), gamma))
        .sum();
    total / points.len() as f64
}

/// Exact local dual value for a finite-support measure.
pub fn dual_local_value_exact(
    lam: &DualPotential,
    measure: &Measure,
    grid: &SupportGrid,
    cost: &CostOracle,
    gamma: f64,
) -> Result<f64> {
    let Measure::FiniteSupport { atoms, probs } = measure else {
        return Err(Error::invalid(
            "measure",
            "exact dual values require a finite-support measure",
        ));
    };
    Ok(atoms
        .iter()
        .zip(probs)
        .map(|(y, &q)| q * scaled_log_sum_exp(&lam.values, &cost_vector(grid, cost, *y), gamma))
        .sum())
}

/// Lipschitz constant `L = m·λmax(W)/γ` of the stacked dual gradient.
pub fn lipschitz_constant(m: usize, lambda_max: f64, gamma: f64) -> f64 {
    debug_assert!(gamma > 0.0);
    m as f64 * lambda_max / gamma
}

/// Dual-radius bound `R ≤ √(2n / (m·λmin⁺(W)))`, valid when costs are
/// normalized to `‖C‖∞ ≤ 1`.
pub fn dual_radius_bound(n: usize, m: usize, lambda_min_plus: f64) -> Result<f64> {
    if !(lambda_min_plus > 0.0) {
        return Err(Error::invalid(
            "lambda_min_plus",
            "must be positive (connected graph with m ≥ 2)",
        ));
    }
    Ok((2.0 * n as f64 / (m as f64 * lambda_min_plus)).sqrt())
}
