//! Counter-based random streams.
//!
//! Each Monte Carlo path draws from its own ChaCha8 stream whose key is a
//! hash of `(seed, site, mass, path)`. Results therefore depend only on those
//! indices, never on how work is scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 256-bit ChaCha key derived from a master seed and a tuple of counters.
pub fn derive_key(seed: u64, counters: &[u64]) -> [u8; 32] {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &c in counters {
        state ^= c.wrapping_mul(0xD6E8_FEB8_6659_FD93).rotate_left(17) ^ acc;
        acc = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// Stream for one Monte Carlo path.
pub fn path_stream(seed: u64, site: usize, mass: usize, path: usize) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_key(seed, &[0, site as u64, mass as u64, path as u64]))
}

/// Stream for auxiliary draws (random initial data, test inputs), separated from path streams by `tag`.
pub fn aux_stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_key(seed, &[1, tag]))
}

/// Source of standard normal increments.
pub trait NormalSource {
    fn next_normal(&mut self) -> f64;
}

/// Standard normals from a stream, optionally negated (antithetic partner).
pub struct GaussianStream<R> {
    rng: R,
    negate: bool,
}

impl<R: Rng> GaussianStream<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, negate: false }
    }

    pub fn antithetic(rng: R) -> Self {
        Self { rng, negate: true }
    }
}

impl<R: Rng> NormalSource for GaussianStream<R> {
    #[inline]
    fn next_normal(&mut self) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        if self.negate {
            -z
        } else {
            z
        }
    }
}

/// Normal source for deterministic dynamics; panics if a draw is ever requested.
pub struct NoNoise;

impl NormalSource for NoNoise {
    fn next_normal(&mut self) -> f64 {
        panic!("deterministic dynamics requested a Gaussian increment")
    }
}
