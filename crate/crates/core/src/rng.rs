//! Counter-based random streams.
//!
//! A stream is a ChaCha12 keystream selected by `(seed, stream_id)`. Child
//! streams are addressed by index rather than drawn from a parent, so the
//! draws of trajectory `i` never depend on how many other trajectories ran
//! before it or on which worker ran them.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha12Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self::child(seed, 0)
    }

    /// Stream number `index` under `seed`.
    pub fn child(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(index);
        Self { rng }
    }

    /// Seed for an independent family of streams, e.g. one per purpose.
    pub fn derive_seed(seed: u64, tag: u64) -> u64 {
        // splitmix64 finalizer
        let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_vector(&mut self, dim: usize) -> DVector<f64> {
        DVector::from_fn(dim, |_, _| self.standard_normal())
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform direction on the unit sphere.
    pub fn unit_vector(&mut self, dim: usize) -> DVector<f64> {
        loop {
            let v = self.normal_vector(dim);
            let norm = v.norm();
            if norm > 1e-12 {
                return v / norm;
            }
        }
    }
}
