//! Seeded random streams.
//!
//! Every stochastic step in the crate (weight initialization, cluster
//! sampling, batch shuffling, synthetic data) draws from an [`RngStream`].
//! The generator is ChaCha8 keyed with the little-endian bytes of the 64-bit
//! seed (remaining key bytes zero) on ChaCha stream 0. [`RngStream::fork`]
//! derives an independent stream by selecting a different ChaCha stream id
//! under the same key. ChaCha output is specified bit-for-bit, so an identical
//! seed and call sequence yields identical draws on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    /// Independent stream under the same seed. Forking does not advance
    /// `self`.
    pub fn fork(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
