//! Seeded, platform-independent randomness.
//!
//! Every random draw in the crate comes from an [`RngState`]: a ChaCha20
//! keystream keyed by a 64-bit seed. Independent substreams are obtained with
//! [`RngState::fork`], which mixes a numeric tag into the seed with SplitMix64.
//! Forking never depends on how far the parent has advanced, so workers can
//! derive per-item streams (per Monte-Carlo sample, per iteration, per image)
//! and produce identical results in any evaluation order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha20Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit words consumed from the keystream so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Seed of the substream labelled `tag`.
    pub fn fork_seed(&self, tag: u64) -> u64 {
        splitmix64(splitmix64(self.seed) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
    }

    /// Fresh generator for the substream labelled `tag`.
    pub fn fork(&self, tag: u64) -> RngState {
        RngState::new(self.fork_seed(tag))
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Draw `k` distinct entries of `support` uniformly over all k-subsets using a
/// partial Fisher–Yates shuffle. The result is sorted ascending.
pub fn sample_k_without_replacement(support: &[usize], k: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    let m = support.len();
    if k > m {
        return Err(Error::invalid(format!("cannot sample {k} of {m} cells")));
    }
    let mut pool = support.to_vec();
    for i in 0..k {
        let j = i + rng.below(m - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.sort_unstable();
    Ok(pool)
}
