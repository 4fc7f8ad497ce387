//! Seeded random streams with platform-independent output.
//!
//! Uniform words come from ChaCha20 (a counter-based generator, so its state
//! is just seed, stream id and word position). Normal deviates use the
//! Box–Muller transform evaluated with `libm`, which gives the same bits on
//! every platform.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

pub const ALGORITHM: &str = "chacha20/box-muller";

/// Everything needed to resume a stream exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub stream: u64,
    /// ChaCha word position; kept as a string because JSON numbers are not
    /// 128-bit safe.
    pub word_pos: String,
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha20Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    /// Independent stream `stream` of the same seed.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words drawn so far.
    pub fn draw_counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn state(&self) -> RngState {
        RngState {
            algorithm: ALGORITHM.to_string(),
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> crate::Result<Self> {
        if state.algorithm != ALGORITHM {
            return Err(crate::Error::Config(format!(
                "unsupported rng algorithm `{}`",
                state.algorithm
            )));
        }
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| crate::Error::Config(format!("bad rng word position `{}`", state.word_pos)))?;
        let mut rng = Self::substream(state.seed, state.stream);
        rng.inner.set_word_pos(pos);
        Ok(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // multiply-shift; bias is < n / 2^64
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal deviate (one per Box–Muller pair; the sine branch is
    /// discarded so the state stays a plain word position).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    pub fn normals(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.normal()).collect()
    }
}
