//! Counter-based normal draws keyed by `(seed, path, step)`.
//!
//! ChaCha8 is a counter-mode generator: the stream id selects the path and the
//! word position selects the step, so a draw never depends on how paths are
//! split across workers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seed used when the caller does not supply one.
pub const DEFAULT_SEED: u64 = 20_240_917;

/// Words consumed per step: two `u64` for one Box–Muller pair.
const WORDS_PER_STEP: u128 = 4;

#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn new(seed: u64, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        Self { rng }
    }

    /// Standard normal draw for `step` of this path.
    pub fn normal(&mut self, step: u64) -> f64 {
        self.rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        let u1 = open_unit(self.rng.next_u64());
        let u2 = open_unit(self.rng.next_u64());
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Draws for steps `0..n`.
    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n as u64).map(|k| self.normal(k)).collect()
    }
}

/// Uniform on `(0, 1]` from the top 53 bits.
fn open_unit(x: u64) -> f64 {
    ((x >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64)
}
