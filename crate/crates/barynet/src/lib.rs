//! Entropy-regularized semi-discrete Wasserstein barycenters over simulated
//! agent networks.
//!
//! A group of `m` agents sits on a connected undirected graph. Agent `i` can
//! draw samples from a private measure `μ_i`; the group jointly estimates the
//! entropy-regularized Wasserstein barycenter of all measures on a fixed
//! support of `n` points. The solver works on the smooth dual of the
//! consensus-constrained problem: each agent holds a dual potential, computes
//! a local softmax transport plan from measure samples, compresses it into a
//! sparse integer histogram, and exchanges only those histograms with its
//! neighbors. An accelerated primal-dual scheme drives the potentials while
//! the primal barycenter estimate is recovered as a weighted running average
//! of the local plans.
//!
//! Module map:
//! - [`problem`]: support grids, cost oracles, source measures, problem instances.
//! - [`graph`]: topologies, Laplacians, and their spectral quantities.
//! - [`dual_oracle`]: softmax plans, sampled/quantized/exact gradients, dual values.
//! - [`pdasgd`]: the general accelerated primal-dual solver and its schedules.
//! - [`decnet`]: the round-synchronous multi-agent simulator with full
//!   accounting of samples, coordinates, and bits.
//! - [`metrics`]: consensus gaps and the decentralized dual objective estimate.
//! - [`verify`]: independent oracles (finite differences, reference solves,
//!   quantization statistics).
//! - [`cli`]: config-driven experiment driver.

pub mod cli;
pub mod decnet;
pub mod dual_oracle;
pub mod graph;
pub mod metrics;
pub mod pdasgd;
pub mod problem;
pub mod rng;
pub mod verify;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter or config field violates its domain. `key` names the field.
    #[error("invalid `{key}`: {reason}")]
    InvalidParameter { key: String, reason: String },
    /// Graph construction or analysis failed.
    #[error("graph error: {0}")]
    Graph(String),
    /// A message required by the round protocol was not delivered.
    #[error("protocol violation: {0}")]
    Protocol(String),
    /// A computed value was NaN or infinite where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// An iterative solve hit its iteration cap before reaching tolerance.
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for an invalid-parameter error.
    pub fn invalid(key: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
