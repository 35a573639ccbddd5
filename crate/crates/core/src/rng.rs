//! Seed plumbing.
//!
//! Every random draw in the crate goes through a [`ChaCha8Rng`] seeded from
//! an explicit `u64`. Child seeds are derived by mixing a parent seed with a
//! sequence of indices, so a value such as "the dropout mask of inner step 3
//! of task 1 at meta-iteration 250" has a stable seed no matter which thread
//! computes it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a path of indices.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &i| splitmix64(acc ^ splitmix64(i.wrapping_add(0x5851_f42d))))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_at(seed: u64, path: &[u64]) -> Rng {
    rng(derive(seed, path))
}
