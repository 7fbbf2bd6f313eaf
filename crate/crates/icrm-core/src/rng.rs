//! Deterministic seeding.
//!
//! Every stochastic operation in the crate takes an explicit `u64` seed and
//! owns its own [`ChaCha8Rng`] stream. Independent streams for subtasks are
//! derived with [`derive_seed`], a splitmix64 chain over
//! `(master, part_0, part_1, ...)`. The chain is the documented per-cell hash
//! used by the experiment runner: identical inputs give identical streams on
//! every platform and thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer (Steele, Lea, Flood 2014).
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a path of indices.
///
/// The empty path returns a mix of the master seed itself, so `derive_seed`
/// never aliases the raw master value.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(master);
    for &part in parts {
        state = splitmix64(state ^ part.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    state
}

/// Deterministic RNG stream for a given seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
