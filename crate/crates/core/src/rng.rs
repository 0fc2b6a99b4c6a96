//! Seed derivation helpers.
//!
//! Every random stream in the crate is a `ChaCha8Rng`. Independent jobs
//! (payoff cells, evaluation grid cells, restarts) get their own stream derived
//! from a master seed and a job id so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a sequence of ids.
pub fn derive_seed(master: u64, ids: &[u64]) -> u64 {
    ids.iter().fold(mix(master), |acc, &id| mix(acc ^ mix(id)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(master: u64, ids: &[u64]) -> Rng {
    rng_from_seed(derive_seed(master, ids))
}
