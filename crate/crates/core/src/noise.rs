//! Counter-based Gaussian noise.
//!
//! Every draw is addressed by `(seed, stream, step, component)`: the stream is
//! a ChaCha stream id and the step picks a fixed-size window of the
//! keystream, so any increment can be regenerated without replaying the ones
//! before it. Trajectory `k` of an ensemble uses stream `k`, which makes
//! ensembles independent of scheduling order.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::PhaseVector;

/// 32-bit keystream words reserved per step. Each pair of normals consumes
/// four words, so up to 2¹⁵ components per step are addressable.
const WORDS_PER_STEP: u128 = 1 << 16;

pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NoiseStream { rng }
    }

    /// `count` independent standard normals for `step`.
    pub fn normals(&mut self, step: u64, count: usize) -> Vec<f64> {
        assert!(
            (count as u128).div_ceil(2) * 4 <= WORDS_PER_STEP,
            "too many components per step"
        );
        self.rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        let mut out = Vec::with_capacity(count + 1);
        while out.len() < count {
            let (a, b) = box_muller(self.rng.next_u64(), self.rng.next_u64());
            out.push(a);
            out.push(b);
        }
        out.truncate(count);
        out
    }

    /// Wiener increment with covariance `dt · I`.
    pub fn increment(&mut self, step: u64, n: usize, dt: f64) -> PhaseVector {
        let s = dt.sqrt();
        PhaseVector::from_iterator(n, self.normals(step, n).into_iter().map(|x| x * s))
    }

    /// Uniform draws in `[0, 1)` for `step`, from the same keyed windows.
    pub fn uniforms(&mut self, step: u64, count: usize) -> Vec<f64> {
        assert!((count as u128) * 2 <= WORDS_PER_STEP, "too many components per step");
        self.rng.set_word_pos(step as u128 * WORDS_PER_STEP);
        (0..count)
            .map(|_| (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
            .collect()
    }
}

/// Uniform in `(0, 1]` with 53 random bits.
fn unit_open_closed(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> (f64, f64) {
    let u1 = unit_open_closed(a);
    let u2 = unit_open_closed(b);
    let r = (-2.0 * u1.ln()).sqrt();
    let th = std::f64::consts::TAU * u2;
    (r * th.cos(), r * th.sin())
}
