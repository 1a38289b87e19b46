//! Barycenter problem instances: discrete support, transport cost, source
//! measures, and the regularization rule.
//!
//! The barycenter lives on a fixed support of `n` points in `R^d` (`d` is 1
//! or 2). Source measures are either finite-support test measures (exact
//! expectations available) or Gaussian / Gaussian-mixture samplers. Costs are
//! normalized by default so that `‖C‖∞ ≤ 1` over the sampling domain, which
//! is what the dual-radius bound assumes.

use crate::rng::{self, Stream};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// A point in `R^2`; 1-D problems leave the second coordinate at zero.
pub type Point = [f64; 2];

const E: f64 = std::f64::consts::E;

/// Squared Euclidean distance between two points.
fn sq_dist(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

// ---------------------------------------------------------------------------
// Support grid
// ---------------------------------------------------------------------------

/// The fixed, ordered support `z_1..z_n` of the barycenter.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportGrid {
    points: Vec<Point>,
    dim: usize,
}

impl SupportGrid {
    /// Builds a grid from explicit points. Points must be pairwise distinct
    /// and, for `dim = 1`, have zero second coordinate.
    pub fn new(points: Vec<Point>, dim: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::invalid("grid.dim", "dimension must be 1 or 2"));
        }
        if points.is_empty() {
            return Err(Error::invalid("grid.points", "need at least one point"));
        }
        for (i, p) in points.iter().enumerate() {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(Error::invalid("grid.points", format!("point {i} not finite")));
            }
            if dim == 1 && p[1] != 0.0 {
                return Err(Error::invalid(
                    "grid.points",
                    format!("point {i} has nonzero second coordinate in a 1-D grid"),
                ));
            }
        }
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                if points[i] == points[j] {
                    return Err(Error::invalid(
                        "grid.points",
                        format!("points {i} and {j} coincide"),
                    ));
                }
            }
        }
        Ok(SupportGrid { points, dim })
    }

    /// Uniform 1-D grid of `n` points on `[lo, hi]`.
    pub fn regular_1d(n: usize, lo: f64, hi: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("grid.n", "need at least one point"));
        }
        if !(lo < hi) && n > 1 {
            return Err(Error::invalid("grid.support", "need lo < hi"));
        }
        let points = if n == 1 {
            vec![[lo, 0.0]]
        } else {
            (0..n)
                .map(|i| [lo + (hi - lo) * i as f64 / (n - 1) as f64, 0.0])
                .collect()
        };
        SupportGrid::new(points, 1)
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }
}

// ---------------------------------------------------------------------------
// Cost oracle
// ---------------------------------------------------------------------------

/// The base transport cost before normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `c(z, y) = |z - y|²` — the default.
    SqEuclidean,
    /// `c ≡ 0`; degenerate cost used by closed-form tests.
    Zero,
}

/// The sampling domain `𝒴`, an axis-aligned box (default `[0,1]^d`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Domain {
    pub lo: Point,
    pub hi: Point,
    pub dim: usize,
}

impl Domain {
    /// The unit box `[0,1]^d`.
    pub fn unit(dim: usize) -> Self {
        Domain { lo: [0.0; 2], hi: [1.0, if dim == 2 { 1.0 } else { 0.0 }], dim }
    }

    /// A 1-D interval `[lo, hi]`.
    pub fn interval(lo: f64, hi: f64) -> Self {
        Domain { lo: [lo, 0.0], hi: [hi, 0.0], dim: 1 }
    }

    /// Product of side lengths (length for `d=1`, area for `d=2`).
    pub fn volume(&self) -> f64 {
        let mut v = 1.0;
        for c in 0..self.dim {
            v *= self.hi[c] - self.lo[c];
        }
        v
    }

    /// The corner points of the box (2 for `d=1`, 4 for `d=2`).
    fn corners(&self) -> Vec<Point> {
        if self.dim == 1 {
            vec![[self.lo[0], 0.0], [self.hi[0], 0.0]]
        } else {
            vec![
                [self.lo[0], self.lo[1]],
                [self.lo[0], self.hi[1]],
                [self.hi[0], self.lo[1]],
                [self.hi[0], self.hi[1]],
            ]
        }
    }
}

/// Evaluates transport costs `c_l(y) = c(z_l, y)`, optionally rescaled so
/// that costs over `grid × domain` lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostOracle {
    kind: CostKind,
    normalize: bool,
    scale: f64,
}

impl CostOracle {
    /// Builds the oracle, computing the normalization constant as the maximum
    /// raw cost over grid points and domain corners (squared Euclidean cost is
    /// convex in `y`, so the box maximum is attained at a corner).
    pub fn new(kind: CostKind, normalize: bool, grid: &SupportGrid, domain: &Domain) -> Self {
        let mut scale = 0.0f64;
        if normalize {
            for z in grid.points() {
                for y in domain.corners() {
                    scale = scale.max(Self::raw(kind, *z, y));
                }
            }
        }
        if scale <= 0.0 {
            scale = 1.0;
        }
        CostOracle { kind, normalize, scale }
    }

    /// Unnormalized oracle (scale 1).
    pub fn unnormalized(kind: CostKind) -> Self {
        CostOracle { kind, normalize: false, scale: 1.0 }
    }

    fn raw(kind: CostKind, z: Point, y: Point) -> f64 {
        match kind {
            CostKind::SqEuclidean => sq_dist(z, y),
            CostKind::Zero => 0.0,
        }
    }

    /// Cost of transporting a unit from `z` to `y`.
    pub fn cost(&self, z: Point, y: Point) -> f64 {
        let c = Self::raw(self.kind, z, y);
        if self.normalize {
            c / self.scale
        } else {
            c
        }
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn is_normalized(&self) -> bool {
        self.normalize
    }

    /// The divisor applied when normalization is on.
    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// The vector `(c(z_1, y), …, c(z_n, y))` for one source point `y`.
pub fn cost_vector(grid: &SupportGrid, cost: &CostOracle, y: Point) -> Vec<f64> {
    grid.points().iter().map(|&z| cost.cost(z, y)).collect()
}

// ---------------------------------------------------------------------------
// Measures
// ---------------------------------------------------------------------------

/// A source measure: either a finite-support test measure or a continuous
/// sampler.
#[derive(Clone, Debug, PartialEq)]
pub enum Measure {
    /// Atoms `y_s` with probabilities `q_s`; supports exact expectations.
    FiniteSupport { atoms: Vec<Point>, probs: Vec<f64> },
    /// Isotropic Gaussian; sampled on all of `R^d` (no truncation).
    Gaussian { mean: Point, std: f64 },
    /// Mixture of isotropic Gaussians.
    GaussianMixture { components: Vec<(Point, f64)>, weights: Vec<f64> },
}

impl Measure {
    /// Checks the measure's own invariants.
    pub fn validate(&self) -> Result<()> {
        match self {
            Measure::FiniteSupport { atoms, probs } => {
                if atoms.is_empty() || atoms.len() != probs.len() {
                    return Err(Error::invalid(
                        "measure.atoms",
                        "need equally many atoms and probabilities, at least one each",
                    ));
                }
                validate_prob_vector(probs, "measure.probs")
            }
            Measure::Gaussian { mean, std } => {
                if !mean[0].is_finite() || !mean[1].is_finite() || !std.is_finite() || *std < 0.0 {
                    return Err(Error::invalid("measure.gaussian", "mean must be finite, std ≥ 0"));
                }
                Ok(())
            }
            Measure::GaussianMixture { components, weights } => {
                if components.is_empty() || components.len() != weights.len() {
                    return Err(Error::invalid(
                        "measure.components",
                        "need equally many components and weights, at least one each",
                    ));
                }
                for (mean, std) in components {
                    (Measure::Gaussian { mean: *mean, std: *std }).validate()?;
                }
                validate_prob_vector(weights, "measure.weights")
            }
        }
    }

    /// True iff exact expectations over the measure are available.
    pub fn exact_expectation_supported(&self) -> bool {
        matches!(self, Measure::FiniteSupport { .. })
    }

    /// Draws one point.
    ///
    /// Stream consumption: finite support, one uniform (inverse CDF with
    /// strict `cumulative > u`); Gaussian, `dim` normals (two uniforms each);
    /// mixture, one uniform for the component then the Gaussian draws.
    pub fn sample(&self, dim: usize, stream: &mut Stream) -> Point {
        match self {
            Measure::FiniteSupport { atoms, probs } => {
                let u = rng::uniform(stream);
                atoms[rng::categorical_index(probs, u)]
            }
            Measure::Gaussian { mean, std } => {
                let mut y = *mean;
                for c in y.iter_mut().take(dim) {
                    *c += std * rng::standard_normal(stream);
                }
                y
            }
            Measure::GaussianMixture { components, weights } => {
                let u = rng::uniform(stream);
                let (mean, std) = components[rng::categorical_index(weights, u)];
                (Measure::Gaussian { mean, std }).sample(dim, stream)
            }
        }
    }
}

fn validate_prob_vector(probs: &[f64], key: &str) -> Result<()> {
    if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid(key, "probabilities must be nonnegative and finite"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(key, format!("probabilities sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Draws one point from `measure`; see [`Measure::sample`] for the stream
/// consumption contract.
pub fn draw_sample(measure: &Measure, dim: usize, stream: &mut Stream) -> Point {
    measure.sample(dim, stream)
}

// ---------------------------------------------------------------------------
// Regularization rule
// ---------------------------------------------------------------------------

/// The regularization level `γ = ε / (4 ln Ω)` that makes a `γ`-regularized
/// solution an `ε`-solution of the unregularized problem.
pub fn gamma_from_epsilon(epsilon: f64, omega: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon", "must be positive"));
    }
    if !(omega > 1.0) {
        return Err(Error::invalid("omega", "must exceed 1 so that ln Ω > 0"));
    }
    gamma_from_epsilon_ln(epsilon, omega.ln())
}

/// Same rule with `ln Ω` given directly (used when a config pins `ln Ω`
/// exactly, e.g. `ln Ω = 1` for integer sample accounting).
pub fn gamma_from_epsilon_ln(epsilon: f64, ln_omega: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon", "must be positive"));
    }
    if !(ln_omega > 0.0) {
        return Err(Error::invalid("ln_omega", "must be positive"));
    }
    Ok(epsilon / (4.0 * ln_omega))
}

// ---------------------------------------------------------------------------
// Problem instance
// ---------------------------------------------------------------------------

/// How the problem-volume constant `Ω` is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OmegaSpec {
    /// Explicit `Ω > 1`.
    Omega(f64),
    /// Explicit `ln Ω > 0`; lets accounting identities hold exactly.
    LnOmega(f64),
    /// `max(n · volume(𝒴), e)`, so `ln Ω ≥ 1`.
    Auto,
}

/// A complete barycenter problem instance with uniform weights `1/m`.
#[derive(Clone, Debug)]
pub struct BarycenterProblem {
    pub grid: SupportGrid,
    pub cost: CostOracle,
    pub measures: Vec<Measure>,
    pub epsilon: f64,
    pub omega: f64,
    ln_omega: f64,
    gamma: f64,
}

impl BarycenterProblem {
    /// Builds and validates an instance. `gamma_override`, when given,
    /// replaces the `ε / (4 ln Ω)` rule.
    pub fn new(
        grid: SupportGrid,
        cost: CostOracle,
        measures: Vec<Measure>,
        epsilon: f64,
        omega: OmegaSpec,
        domain: &Domain,
        gamma_override: Option<f64>,
    ) -> Result<Self> {
        if measures.is_empty() {
            return Err(Error::invalid("measures", "need at least one measure"));
        }
        for m in &measures {
            m.validate()?;
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        let (omega, ln_omega) = match omega {
            OmegaSpec::Omega(w) => {
                if !(w > 1.0) {
                    return Err(Error::invalid("omega", "must exceed 1 so that ln Ω > 0"));
                }
                (w, w.ln())
            }
            OmegaSpec::LnOmega(l) => {
                if !(l > 0.0) {
                    return Err(Error::invalid("ln_omega", "must be positive"));
                }
                (l.exp(), l)
            }
            OmegaSpec::Auto => {
                let w = (grid.n() as f64 * domain.volume()).max(E);
                (w, w.ln().max(1.0))
            }
        };
        let gamma = match gamma_override {
            Some(g) if g > 0.0 => g,
            Some(_) => return Err(Error::invalid("gamma", "must be positive")),
            None => gamma_from_epsilon_ln(epsilon, ln_omega)?,
        };
        Ok(BarycenterProblem { grid, cost, measures, epsilon, omega, ln_omega, gamma })
    }

    pub fn m(&self) -> usize {
        self.measures.len()
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn ln_omega(&self) -> f64 {
        self.ln_omega
    }

    pub fn grid(&self) -> &SupportGrid {
        &self.grid
    }

    pub fn cost(&self) -> &CostOracle {
        &self.cost
    }

    pub fn measures(&self) -> &[Measure] {
        &self.measures
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// True iff every measure supports exact expectations.
    pub fn all_finite_support(&self) -> bool {
        self.measures.iter().all(Measure::exact_expectation_supported)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Purpose};

    fn grid(points: &[f64]) -> SupportGrid {
        SupportGrid::new(points.iter().map(|&x| [x, 0.0]).collect(), 1).unwrap()
    }

    #[test]
    fn cost_vector_squared_euclidean() {
        let g = grid(&[0.0, 1.0]);
        let c = CostOracle::new(CostKind::SqEuclidean, true, &g, &Domain::unit(1));
        assert_eq!(cost_vector(&g, &c, [0.0, 0.0]), vec![0.0, 1.0]);
        assert_eq!(cost_vector(&g, &c, [1.0, 0.0]), vec![1.0, 0.0]);

        let g3 = grid(&[0.0, 0.5, 1.0]);
        let c3 = CostOracle::new(CostKind::SqEuclidean, true, &g3, &Domain::unit(1));
        assert_eq!(cost_vector(&g3, &c3, [0.25, 0.0]), vec![0.0625, 0.0625, 0.5625]);
    }

    #[test]
    fn cost_vector_is_permutation_equivariant() {
        let g = grid(&[0.1, 0.4, 0.9]);
        let g_rev = grid(&[0.9, 0.4, 0.1]);
        let c = CostOracle::unnormalized(CostKind::SqEuclidean);
        let y = [0.3, 0.0];
        let v: Vec<f64> = cost_vector(&g, &c, y).into_iter().rev().collect();
        assert_eq!(v, cost_vector(&g_rev, &c, y));
    }

    #[test]
    fn normalized_costs_bounded_over_probe_set() {
        let g = grid(&[0.0, 0.3, 0.7, 1.0]);
        let c = CostOracle::new(CostKind::SqEuclidean, true, &g, &Domain::unit(1));
        for i in 0..=1000 {
            let y = [i as f64 / 1000.0, 0.0];
            for v in cost_vector(&g, &c, y) {
                assert!(v <= 1.0 + 1e-12 && v >= 0.0);
            }
        }
    }

    #[test]
    fn gamma_rule_examples() {
        assert!((gamma_from_epsilon(0.4, E).unwrap() - 0.1).abs() < 1e-15);
        assert!((gamma_from_epsilon(4.0 * 10.0f64.ln(), 10.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(gamma_from_epsilon(0.4, 1.0).is_err());
        assert!(gamma_from_epsilon(0.4, 0.5).is_err());
    }

    #[test]
    fn gamma_rule_monotonicity() {
        let epsilons = [0.05, 0.1, 0.2, 0.4, 0.8];
        let omegas = [1.5, 2.0, E, 10.0, 100.0];
        for &w in &omegas {
            for pair in epsilons.windows(2) {
                assert!(
                    gamma_from_epsilon(pair[0], w).unwrap() < gamma_from_epsilon(pair[1], w).unwrap(),
                    "gamma must increase with epsilon"
                );
            }
        }
        for &e in &epsilons {
            for pair in omegas.windows(2) {
                assert!(
                    gamma_from_epsilon(e, pair[0]).unwrap() > gamma_from_epsilon(e, pair[1]).unwrap(),
                    "gamma must decrease with omega"
                );
            }
        }
    }

    #[test]
    fn finite_support_sampling() {
        let single = Measure::FiniteSupport { atoms: vec![[0.3, 0.0]], probs: vec![1.0] };
        let mut s = substream(11, 0, Purpose::Measure);
        for _ in 0..100 {
            assert_eq!(draw_sample(&single, 1, &mut s), [0.3, 0.0]);
        }

        // Empirical frequencies over 1e5 draws match q within 4·sqrt(q(1-q)/K).
        let probs = vec![0.15, 0.25, 0.6];
        let atoms = vec![[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]];
        let mu = Measure::FiniteSupport { atoms: atoms.clone(), probs: probs.clone() };
        let mut s = substream(12, 0, Purpose::Measure);
        let k = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..k {
            let y = draw_sample(&mu, 1, &mut s);
            let idx = atoms.iter().position(|&a| a == y).unwrap();
            counts[idx] += 1;
        }
        for (idx, &q) in probs.iter().enumerate() {
            let freq = counts[idx] as f64 / k as f64;
            let band = 4.0 * (q * (1.0 - q) / k as f64).sqrt();
            assert!((freq - q).abs() <= band, "atom {idx}: freq {freq} vs {q} ± {band}");
        }
    }

    #[test]
    fn gaussian_sampling_mean_band() {
        let mu = Measure::Gaussian { mean: [0.5, 0.0], std: 0.1 };
        let mut s = substream(13, 0, Purpose::Measure);
        let k = 100_000;
        let mean: f64 = (0..k).map(|_| draw_sample(&mu, 1, &mut s)[0]).sum::<f64>() / k as f64;
        let band = 4.0 * 0.1 / (k as f64).sqrt();
        assert!((mean - 0.5).abs() <= band, "mean {mean} outside 0.5 ± {band}");
    }

    #[test]
    fn grid_rejects_duplicates_and_bad_dim() {
        assert!(SupportGrid::new(vec![[0.0, 0.0], [0.0, 0.0]], 1).is_err());
        assert!(SupportGrid::new(vec![[0.0, 0.0]], 3).is_err());
        assert!(SupportGrid::new(vec![[0.0, 0.5]], 1).is_err());
        assert!(SupportGrid::new(vec![], 1).is_err());
    }

    #[test]
    fn problem_validation_and_defaults() {
        let g = SupportGrid::regular_1d(4, 0.0, 1.0).unwrap();
        let dom = Domain::unit(1);
        let c = CostOracle::new(CostKind::SqEuclidean, true, &g, &dom);
        let mu = Measure::Gaussian { mean: [0.5, 0.0], std: 0.1 };
        let p = BarycenterProblem::new(
            g.clone(), c.clone(), vec![mu.clone()], 0.4, OmegaSpec::Auto, &dom, None,
        )
        .unwrap();
        // Auto omega: max(n · volume, e) = max(4, e) = 4.
        assert_eq!(p.omega, 4.0);
        assert!((p.gamma() - 0.4 / (4.0 * 4.0f64.ln())).abs() < 1e-15);

        let p1 = BarycenterProblem::new(
            g.clone(), c.clone(), vec![mu.clone()], 0.4, OmegaSpec::LnOmega(1.0), &dom, None,
        )
        .unwrap();
        assert_eq!(p1.ln_omega(), 1.0);
        assert_eq!(p1.gamma(), 0.1);

        assert!(BarycenterProblem::new(
            g.clone(), c.clone(), vec![], 0.4, OmegaSpec::Auto, &dom, None
        )
        .is_err());
        assert!(BarycenterProblem::new(
            g, c, vec![mu], 0.4, OmegaSpec::Omega(1.0), &dom, None
        )
        .is_err());
    }

    #[test]
    fn invalid_measures_rejected() {
        let bad = Measure::FiniteSupport { atoms: vec![[0.0, 0.0]], probs: vec![0.9] };
        assert!(bad.validate().is_err());
        let neg = Measure::FiniteSupport {
            atoms: vec![[0.0, 0.0], [1.0, 0.0]],
            probs: vec![1.5, -0.5],
        };
        assert!(neg.validate().is_err());
        let ok = Measure::GaussianMixture {
            components: vec![([0.2, 0.0], 0.05), ([0.8, 0.0], 0.1)],
            weights: vec![0.5, 0.5],
        };
        assert!(ok.validate().is_ok());
    }
}
