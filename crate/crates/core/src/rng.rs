//! Reproducible random streams.
//!
//! Every Monte Carlo path owns one ChaCha stream selected by `(seed, stream)`.
//! Draws inside a stream are consumed in a fixed (step, channel, mode) order,
//! so a path's noise depends only on its key and never on which worker runs it
//! or in what order paths are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mixes a stream tag into a seed so that different consumers (paths, chains,
/// windows) sharing a user seed get unrelated streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    sign: f64,
}

impl NormalStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, sign: 1.0 }
    }

    /// Same stream with every draw negated (antithetic partner).
    pub fn antithetic(seed: u64, stream: u64) -> Self {
        let mut s = Self::new(seed, stream);
        s.sign = -1.0;
        s
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        self.sign * z
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }
}
