//! Seeded Gaussian sampling. ChaCha8 keeps streams identical across
//! platforms for a given seed.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::{lit, Real};

#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
    scale: f64,
}

impl GaussianStream {
    pub fn new(seed: u64, scale: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            scale,
        }
    }

    pub fn next_scalar<T: Real>(&mut self) -> T {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        lit(z * self.scale)
    }

    pub fn next_vector<T: Real>(&mut self, len: usize) -> DVector<T> {
        DVector::from_iterator(len, (0..len).map(|_| self.next_scalar()))
    }
}

/// Derives an independent sub-seed so that different checks sharing one
/// user seed do not reuse the same stream.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}
