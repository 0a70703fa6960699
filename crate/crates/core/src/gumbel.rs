//! Standard and truncated standard Gumbel sampling on top of a counter-based
//! uniform stream.
//!
//! Every sampler consumes exactly one uniform per draw. Uniforms come from a
//! [`UniformStream`], which is a pure function of `(key, position)`, so any
//! draw can be reproduced from a seed without shared mutable state.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const UNIT_52: f64 = 1.0 / (1u64 << 52) as f64;

/// Threshold above which `1 - F(tau)` is replaced by its asymptote `exp(-tau)`.
/// At 40 the relative error of that replacement is below half an ulp.
const LOWER_TAIL_ASYMPTOTE: f64 = 40.0;

/// A reproducible source of uniforms in the open interval (0, 1).
///
/// Backed by ChaCha20 used as a block counter: the value at `position` depends
/// only on the 32-byte key and the position. Cloning a stream yields an
/// independent cursor at the same position.
#[derive(Clone, Debug)]
pub struct UniformStream {
    key: [u8; 32],
    position: u64,
    rng: ChaCha20Rng,
}

impl PartialEq for UniformStream {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key && self.position == other.position
    }
}

impl Eq for UniformStream {}

impl UniformStream {
    pub fn new(key: [u8; 32], position: u64) -> Self {
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_word_pos(u128::from(position) * 2);
        Self { key, position, rng }
    }

    /// Stream keyed directly from a 64-bit seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"cfdecode/seed/v1");
        hasher.update(seed.to_le_bytes());
        Self::new(hasher.finalize().into(), 0)
    }

    pub fn key(&self) -> &[u8; 32] {
        &self.key
    }

    /// Number of uniforms consumed so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Next uniform. The top 52 bits of a 64-bit word `k` map to
    /// `(k + 0.5) / 2^52`, which is never 0 and never 1.
    pub fn next_uniform(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 12;
        self.position += 1;
        (bits as f64 + 0.5) * UNIT_52
    }

    pub fn next_standard_gumbel(&mut self) -> f64 {
        gumbel_from_uniform(self.next_uniform())
    }

    /// Jump to an absolute position.
    pub fn seek(&mut self, position: u64) {
        self.rng.set_word_pos(u128::from(position) * 2);
        self.position = position;
    }
}

/// Derive an independent stream for one `(record, stage, step)` cell.
///
/// The key is a SHA-256 digest over a length-prefixed encoding of all inputs,
/// so distinct tuples never share a key in practice.
pub fn derive_stream(global_seed: u64, record_id: &str, stage: &str, step: u64) -> UniformStream {
    let mut hasher = Sha256::new();
    hasher.update(b"cfdecode/stream/v1");
    hasher.update(global_seed.to_le_bytes());
    hasher.update((record_id.len() as u64).to_le_bytes());
    hasher.update(record_id.as_bytes());
    hasher.update((stage.len() as u64).to_le_bytes());
    hasher.update(stage.as_bytes());
    hasher.update(step.to_le_bytes());
    UniformStream::new(hasher.finalize().into(), 0)
}

/// Inverse CDF of the standard Gumbel distribution, `-ln(-ln u)`.
pub fn inverse_gumbel_cdf(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!(
            "inverse Gumbel CDF needs u in (0, 1), got {u}"
        )));
    }
    Ok(gumbel_from_uniform(u))
}

/// Standard Gumbel CDF, `exp(-exp(-g))`.
pub fn gumbel_cdf(g: f64) -> f64 {
    (-(-g).exp()).exp()
}

#[inline]
pub(crate) fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

pub fn sample_standard_gumbel(stream: &mut UniformStream) -> f64 {
    stream.next_standard_gumbel()
}

/// Gumbel(0, 1) conditioned on `G > tau_min`, by inverse transform of the
/// uniform `u` mapped onto `(F(tau_min), 1)`.
///
/// The result is clamped to be at least `tau_min` so the support bound holds
/// exactly in floating point.
pub fn lower_truncated_from_uniform(tau_min: f64, u: f64) -> f64 {
    let one_minus_u = 1.0 - u;
    let g = if tau_min < LOWER_TAIL_ASYMPTOTE {
        // 1 - F(tau), accurate for large tau
        let tail = -(-(-tau_min).exp()).exp_m1();
        -(-(-one_minus_u * tail).ln_1p()).ln()
    } else {
        tau_min - one_minus_u.ln()
    };
    g.max(tau_min)
}

/// Gumbel(0, 1) conditioned on `G < tau_max`, via the closed form
/// `-ln(exp(-tau_max) - ln u)`.
///
/// For negative bounds the algebraically equal `tau - ln1p(-ln u * exp(tau))`
/// is used so `exp(-tau)` cannot overflow. The result is pushed one ulp below
/// the bound if rounding lands on it.
pub fn upper_truncated_from_uniform(tau_max: f64, u: f64) -> f64 {
    let e = -u.ln();
    let g = if tau_max == f64::INFINITY {
        -e.ln()
    } else if tau_max >= 0.0 {
        -((-tau_max).exp() + e).ln()
    } else {
        tau_max - (e * tau_max.exp()).ln_1p()
    };
    if g >= tau_max {
        tau_max.next_down()
    } else {
        g
    }
}

pub fn sample_lower_truncated_gumbel(tau_min: f64, stream: &mut UniformStream) -> Result<f64> {
    if !tau_min.is_finite() {
        return Err(Error::Domain(format!(
            "lower truncation bound must be finite, got {tau_min}"
        )));
    }
    Ok(lower_truncated_from_uniform(tau_min, stream.next_uniform()))
}

pub fn sample_upper_truncated_gumbel(tau_max: f64, stream: &mut UniformStream) -> Result<f64> {
    if tau_max.is_nan() || tau_max == f64::NEG_INFINITY {
        return Err(Error::Domain(format!(
            "upper truncation bound must be finite or +inf, got {tau_max}"
        )));
    }
    Ok(upper_truncated_from_uniform(tau_max, stream.next_uniform()))
}

/// A truncation bound on a standard Gumbel variable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TruncationBound {
    /// Samples satisfy `g >= tau`.
    Lower(f64),
    /// Samples satisfy `g < tau`.
    Upper(f64),
}

impl TruncationBound {
    pub fn tau(&self) -> f64 {
        match *self {
            TruncationBound::Lower(t) | TruncationBound::Upper(t) => t,
        }
    }

    pub fn sample(&self, stream: &mut UniformStream) -> Result<f64> {
        match *self {
            TruncationBound::Lower(t) => sample_lower_truncated_gumbel(t, stream),
            TruncationBound::Upper(t) => sample_upper_truncated_gumbel(t, stream),
        }
    }
}
