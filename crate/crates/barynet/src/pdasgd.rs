//! Accelerated primal–dual stochastic gradient method on the dual of the
//! barycenter problem, with two step-size regimes and the derived iteration,
//! batch, and variance bounds.
//!
//! The method minimizes a convex dual function `φ` from stochastic gradients
//! `g_k ≈ ∇φ(λ_k)` while averaging the primal candidates produced by the same
//! randomness. With the weights below it drives the expected dual gap down at
//! `O(1/N²)` in the deterministic regime (case A, constant β) and at the
//! optimal mixed rate in the stochastic regime (case B, growing β).
//!
//! One round maintains (`s_k = Σ_{l≤k} α_l g_l`, prox center `z⁰`):
//!
//! ```text
//! z_k     = z⁰ − s_k / β_k
//! λ_{k+1} = τ_k z_k + (1 − τ_k) η_k,          τ_k = α_{k+1} / A_{k+1}
//! g_{k+1}, x_{k+1}  from one oracle call at λ_{k+1}
//! ζ_{k+1} = z_k − (α_{k+1} / β_k) g_{k+1}
//! η_{k+1} = τ_k ζ_{k+1} + (1 − τ_k) η_k
//! x̂_{k+1} = (α_{k+1} x_{k+1} + A_k x̂_k) / A_{k+1}
//! ```
//!
//! so `x̂_N` is the `α`-weighted average of the primal candidates and `η_N`
//! carries the dual certificate `φ(η_N) − φ* ≤ β_N R² / (2 A_N)` plus a
//! variance term in the stochastic regime.

use crate::rng::Stream;
use crate::{Error, Result};

/// Step-size regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    /// Exact (or low-noise) gradients: `β_k = 2L`, fastest deterministic decay.
    A,
    /// Noisy gradients: `β_k` grows with the round to absorb variance.
    B,
}

/// Weight schedule `(α_k, A_k, β_k)` for one of the two regimes.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    case: Case,
    l: f64,
    sigma: f64,
    r: f64,
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

impl Schedule {
    /// Case A: requires the Lipschitz constant `L ≥ 0`.
    pub fn case_a(l: f64) -> Result<Self> {
        if !(l >= 0.0) || !l.is_finite() {
            return Err(Error::invalid("lipschitz", "must be finite and nonnegative"));
        }
        Ok(Schedule { case: Case::A, l, sigma: 0.0, r: 1.0 })
    }

    /// Case B: requires `L ≥ 0`, a noise level `σ ≥ 0`, and the dual radius
    /// `R > 0` entering the growing part of `β_k`.
    pub fn case_b(l: f64, sigma: f64, r: f64) -> Result<Self> {
        if !(l >= 0.0) || !l.is_finite() {
            return Err(Error::invalid("lipschitz", "must be finite and nonnegative"));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::invalid("sigma", "must be finite and nonnegative"));
        }
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::invalid("radius", "must be finite and positive"));
        }
        Ok(Schedule { case: Case::B, l, sigma, r })
    }

    pub fn case(&self) -> Case {
        self.case
    }

    /// `α_k`: `(k+1)/2` in case A, `(k+1)/(2√2)` in case B.
    pub fn alpha(&self, k: usize) -> f64 {
        let base = (k as f64 + 1.0) / 2.0;
        match self.case {
            Case::A => base,
            Case::B => base / SQRT2,
        }
    }

    /// `A_k = Σ_{l=0}^k α_l` in closed form: `(k+1)(k+2)/4` (case A) or the
    /// same over `√2` (case B).
    pub fn a_big(&self, k: usize) -> f64 {
        let base = (k as f64 + 1.0) * (k as f64 + 2.0) / 4.0;
        match self.case {
            Case::A => base,
            Case::B => base / SQRT2,
        }
    }

    /// `β_k`: constant `2L` in case A; `L + σ(k+2)^{3/2} / (2^{1/4}·√3·R)` in
    /// case B.
    pub fn beta(&self, k: usize) -> f64 {
        match self.case {
            Case::A => 2.0 * self.l,
            Case::B => {
                self.l
                    + self.sigma * (k as f64 + 2.0).powf(1.5)
                        / (2.0f64.powf(0.25) * 3.0f64.sqrt() * self.r)
            }
        }
    }

    /// `τ_k = α_{k+1} / A_{k+1}` (equals `2/(k+3)` in both regimes).
    pub fn tau(&self, k: usize) -> f64 {
        self.alpha(k + 1) / self.a_big(k + 1)
    }
}

/// Gradient and primal candidate from one combined oracle call; both are
/// produced from the same draw of the oracle's randomness.
#[derive(Clone, Debug)]
pub struct OracleSample {
    pub grad: Vec<f64>,
    pub primal: Vec<f64>,
}

/// A stochastic first-order oracle for the dual function, also emitting the
/// primal candidate attached to the same randomness.
pub trait StochasticDualOracle {
    fn dual_dim(&self) -> usize;
    fn primal_dim(&self) -> usize;
    /// One combined call at `lam`.
    fn sample(&mut self, lam: &[f64], stream: &mut Stream) -> OracleSample;
}

/// State of the accelerated primal–dual method after `rounds()` rounds.
#[derive(Clone, Debug)]
pub struct PdasgdSolver {
    schedule: Schedule,
    k: usize,
    s: Vec<f64>,
    eta: Vec<f64>,
    xhat: Vec<f64>,
    z0: Vec<f64>,
    last_lambda: Vec<f64>,
}

impl PdasgdSolver {
    /// Starts at `λ₀ = 0`, performing the initial oracle call that seeds
    /// `s₀ = α₀ g₀` and `x̂₀ = x₀`.
    pub fn new(
        schedule: Schedule,
        oracle: &mut dyn StochasticDualOracle,
        stream: &mut Stream,
    ) -> Self {
        let z0 = vec![0.0; oracle.dual_dim()];
        Self::with_prox_center(schedule, z0, oracle, stream)
    }

    /// Starts at `λ₀ = z⁰` (general prox center, used to probe symmetry).
    pub fn with_prox_center(
        schedule: Schedule,
        z0: Vec<f64>,
        oracle: &mut dyn StochasticDualOracle,
        stream: &mut Stream,
    ) -> Self {
        assert_eq!(z0.len(), oracle.dual_dim());
        let init = oracle.sample(&z0, stream);
        assert_eq!(init.grad.len(), z0.len());
        assert_eq!(init.primal.len(), oracle.primal_dim());
        let alpha0 = schedule.alpha(0);
        let s = init.grad.iter().map(|g| alpha0 * g).collect();
        PdasgdSolver {
            schedule,
            k: 0,
            s,
            eta: z0.clone(),
            xhat: init.primal,
            last_lambda: z0.clone(),
            z0,
        }
    }

    /// `z_k = z⁰ − s_k / β_k`, with the degenerate `β_k = 0` case (zero
    /// Lipschitz constant, hence zero gradients) pinned to `z⁰`.
    pub fn z(&self) -> Vec<f64> {
        let beta = self.schedule.beta(self.k);
        if beta == 0.0 {
            return self.z0.clone();
        }
        self.z0
            .iter()
            .zip(&self.s)
            .map(|(z0, s)| z0 - s / beta)
            .collect()
    }

    /// Runs one round: one oracle call at the fresh `λ_{k+1}`.
    pub fn step(&mut self, oracle: &mut dyn StochasticDualOracle, stream: &mut Stream) {
        let k = self.k;
        let schedule = self.schedule;
        let beta_k = schedule.beta(k);
        let alpha_next = schedule.alpha(k + 1);
        let a_cur = schedule.a_big(k);
        let a_next = schedule.a_big(k + 1);
        let tau = schedule.tau(k);

        let z = self.z();
        let lambda: Vec<f64> = z
            .iter()
            .zip(&self.eta)
            .map(|(z, e)| tau * z + (1.0 - tau) * e)
            .collect();
        let sample = oracle.sample(&lambda, stream);

        let step_scale = if beta_k == 0.0 { 0.0 } else { alpha_next / beta_k };
        for i in 0..self.eta.len() {
            let zeta = z[i] - step_scale * sample.grad[i];
            self.eta[i] = tau * zeta + (1.0 - tau) * self.eta[i];
            self.s[i] += alpha_next * sample.grad[i];
        }
        for (xh, x) in self.xhat.iter_mut().zip(&sample.primal) {
            *xh = (alpha_next * x + a_cur * *xh) / a_next;
        }
        self.last_lambda = lambda;
        self.k += 1;
    }

    /// Completed rounds (oracle calls made: `rounds() + 1`, counting the
    /// initial one).
    pub fn rounds(&self) -> usize {
        self.k
    }

    /// Dual output `η_k`.
    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    /// Primal output `x̂_k` (the `α`-weighted primal average).
    pub fn xhat(&self) -> &[f64] {
        &self.xhat
    }

    /// The `λ` at which the most recent oracle call was made.
    pub fn last_lambda(&self) -> &[f64] {
        &self.last_lambda
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }
}

/// Rounds needed by case A for dual gap `ε`: `⌈√(8LR²/ε)⌉`.
pub fn iterations_case_a(l: f64, r: f64, eps: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::invalid("epsilon", "must be positive"));
    }
    if !(l >= 0.0) || !(r >= 0.0) {
        return Err(Error::invalid("iterations", "need L ≥ 0 and R ≥ 0"));
    }
    Ok((8.0 * l * r * r / eps).sqrt().ceil() as usize)
}

/// Rounds needed by case B: `⌈max{√(4LR²/ε), 9σ²R²/ε²}⌉`.
pub fn iterations_case_b(l: f64, r: f64, eps: f64, sigma: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::invalid("epsilon", "must be positive"));
    }
    if !(l >= 0.0) || !(r >= 0.0) || !(sigma >= 0.0) {
        return Err(Error::invalid("iterations", "need L, R, σ ≥ 0"));
    }
    let deterministic = (4.0 * l * r * r / eps).sqrt();
    let stochastic = 9.0 * sigma * sigma * r * r / (eps * eps);
    Ok(deterministic.max(stochastic).ceil() as usize)
}

/// Variance bound `σ² ≤ 2·λmax(W)·Σ_i (1/M_{i,1} + 1/M_{i,2})` for the
/// double-sampled gradient assembled through `√W`.
pub fn variance_bound(lambda_max: f64, m1: &[usize], m2: &[usize]) -> f64 {
    debug_assert_eq!(m1.len(), m2.len());
    debug_assert!(m1.iter().chain(m2).all(|&b| b >= 1));
    let inv_sum: f64 = m1
        .iter()
        .zip(m2)
        .map(|(&a, &b)| 1.0 / a as f64 + 1.0 / b as f64)
        .sum();
    2.0 * lambda_max * inv_sum
}

/// Batch size for round `k` under the growing schedule of case A:
/// `max(1, ⌈(k+2)/ln Ω⌉)`.
pub fn batch_schedule_a(k: usize, ln_omega: f64) -> usize {
    debug_assert!(ln_omega > 0.0);
    let raw = ((k as f64 + 2.0) / ln_omega).ceil();
    (raw as usize).max(1)
}
