//! Counter-based normal draws keyed by `(seed, path, step)`.
//!
//! Each path owns one ChaCha8 stream (`stream = path index`) under a key
//! derived from the seed, and every Euler step consumes exactly one
//! Box-Muller pair, i.e. four 32-bit words. Draw `(path, step)` is therefore
//! a fixed function of its key, independent of how many paths are simulated
//! or in which order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS_PER_STEP: u128 = 4;

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draw source for one path.
pub struct PathRng {
    rng: ChaCha8Rng,
}

impl PathRng {
    pub fn new(seed: u64, path: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(path);
        PathRng { rng }
    }

    /// Positions the stream at `step` (random access).
    pub fn seek(&mut self, step: usize) {
        self.rng.set_word_pos(step as u128 * WORDS_PER_STEP);
    }

    /// Next `(W, Z⊥)` pair of independent standard normals.
    #[inline]
    pub fn pair(&mut self) -> (f64, f64) {
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }
}

/// Draws of one path for steps `0..steps`.
pub fn path_draws(seed: u64, path: u64, steps: usize) -> Vec<(f64, f64)> {
    let mut rng = PathRng::new(seed, path);
    (0..steps).map(|_| rng.pair()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_depend_only_on_the_key() {
        let a = path_draws(7, 12, 10);
        let mut rng = PathRng::new(7, 12);
        rng.seek(6);
        assert_eq!(rng.pair(), a[6]);
        assert_ne!(path_draws(7, 13, 10), a);
        assert_ne!(path_draws(8, 12, 10), a);
    }

    #[test]
    fn moments_are_standard_normal() {
        let n = 200_000;
        let (mut m, mut v, mut c) = (0.0, 0.0, 0.0);
        let mut rng = PathRng::new(1, 0);
        for _ in 0..n {
            let (w, z) = rng.pair();
            m += w + z;
            v += w * w + z * z;
            c += w * z;
        }
        let n2 = 2.0 * n as f64;
        assert!((m / n2).abs() < 0.01);
        assert!((v / n2 - 1.0).abs() < 0.01);
        assert!((c / n as f64).abs() < 0.01);
    }

    #[test]
    fn mixed_seeds_differ() {
        assert_ne!(mix_seed(1, 0), mix_seed(1, 1));
        assert_ne!(mix_seed(1, 0), mix_seed(2, 0));
    }
}
