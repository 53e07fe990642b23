//! Seed plumbing. Every random stream is a ChaCha8 generator whose seed is
//! derived from a master seed and a stream label, so runs are reproducible
//! and streams do not overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for `stream` under `seed`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    Rng::seed_from_u64(derive(seed, stream))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
