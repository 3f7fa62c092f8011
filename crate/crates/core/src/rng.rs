//! Seeding policy shared by every randomized step.
//!
//! All randomness comes from ChaCha8 streams. Tree `b` of a forest trained
//! with global seed `iseed` uses the stream seeded with `iseed + b`; the
//! permutation for tree `b` and feature `j` uses `iseed + B + b * p + j`.
//! Streams are independent of thread scheduling, so results do not depend
//! on the number of workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type RfxRng = ChaCha8Rng;

pub fn stream(seed: u64) -> RfxRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tree_seed(iseed: u64, tree: usize) -> u64 {
    iseed.wrapping_add(tree as u64)
}

pub fn permutation_seed(
    iseed: u64,
    ntree: usize,
    tree: usize,
    n_features: usize,
    feature: usize,
) -> u64 {
    iseed
        .wrapping_add(ntree as u64)
        .wrapping_add((tree as u64).wrapping_mul(n_features as u64))
        .wrapping_add(feature as u64)
}

/// Uniform index in `0..n`, drawn through `u64` so the sequence is the same on
/// 32- and 64-bit targets.
pub fn index(rng: &mut RfxRng, n: usize) -> usize {
    rng.random_range(0..n as u64) as usize
}

/// In-place Fisher–Yates shuffle using [`index`].
pub fn shuffle<T>(rng: &mut RfxRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}
