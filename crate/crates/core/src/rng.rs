// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seed derivation. Every random draw in the crate comes from a ChaCha
//! stream whose seed is a pure function of a master seed and a path of
//! integers, so results never depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags, the first element of every derivation path.
pub mod tag {
    pub const TRANSITION: u64 = 1;
    pub const READOUT: u64 = 2;
    pub const OPERATOR: u64 = 3;
    pub const ROLLOUT: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const DATASET: u64 = 6;
    pub const TOY: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and an index path.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A fresh stream for `derive_seed(master, path)`.
pub fn stream(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
