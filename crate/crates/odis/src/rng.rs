//! Seed derivation for reproducible, order-independent randomness.
//!
//! Every stochastic site in the pipeline draws from its own ChaCha stream,
//! seeded by mixing the run seed with structural coordinates (step, slot,
//! purpose). Work can then be scheduled on any number of workers without
//! changing a single draw.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby inputs.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix an arbitrary list of coordinates into one seed.
pub fn mix(parts: &[u64]) -> u64 {
    let mut acc = 0x853c_49e6_748f_ea9bu64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// Stream RNG for a (seed, coordinates) site.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut all = Vec::with_capacity(parts.len() + 1);
    all.push(seed);
    all.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(mix(&all))
}
