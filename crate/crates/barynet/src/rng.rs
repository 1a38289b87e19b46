//! Deterministic random streams.
//!
//! Every consumer of randomness owns a private ChaCha substream derived from
//! `(master seed, owner id, purpose)`. Substreams are independent and
//! reproducible no matter in which order agents are stepped, which is what
//! makes simulator output byte-identical under intra-round parallelism.
//!
//! Draw-count contracts (relied on by recorded fixtures):
//! - one uniform in `[0, 1)` per categorical draw,
//! - two uniforms per standard normal (Box-Muller, cosine branch only).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The concrete random stream used throughout the crate.
pub type Stream = ChaCha8Rng;

/// What a substream is used for; keeps streams disjoint per owner.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    /// Drawing points `Y ~ μ` from a measure.
    Measure = 0,
    /// Categorical draws inside gradient quantization.
    Quantize = 1,
    /// Monte-Carlo pool for dual objective estimates.
    Eval = 2,
    /// Random graph generation.
    GraphGen = 3,
    /// Independent trials in verification harnesses.
    Trial = 4,
    /// Initial perturbations for reference solves.
    Perturb = 5,
}

/// Number of purpose slots reserved per owner id.
const PURPOSE_SLOTS: u64 = 8;

/// Derives the substream owned by `(owner, purpose)` under `master`.
pub fn substream(master: u64, owner: u64, purpose: Purpose) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(owner.wrapping_mul(PURPOSE_SLOTS) + purpose as u64);
    rng
}

/// One uniform draw in `[0, 1)`, consuming 64 bits of the stream.
pub fn uniform(rng: &mut Stream) -> f64 {
    // 53 random mantissa bits, the standard 64-bit-to-double reduction.
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One standard normal draw via Box-Muller; consumes exactly two uniforms.
pub fn standard_normal(rng: &mut Stream) -> f64 {
    let u1 = 1.0 - uniform(rng); // (0, 1]: keeps the log finite
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Inverse-CDF categorical draw over `probs` given a uniform `u`.
///
/// Returns the first index whose cumulative sum strictly exceeds `u`
/// ("cumulative > u" tie-breaking). Falls back to the last index if rounding
/// leaves the total cumulative mass at or below `u`.
pub fn categorical_index(probs: &[f64], u: f64) -> usize {
    debug_assert!(!probs.is_empty());
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if cum > u {
            return i;
        }
    }
    probs.len() - 1
}
