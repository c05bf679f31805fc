//! Keyed random streams, so every consumer of randomness gets an
//! independent sequence that does not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `key` into `seed` and returns a generator for that key.
pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &k in key {
        h = splitmix(h ^ splitmix(k));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// A derived seed rather than a generator.
pub fn derive(seed: u64, key: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for &k in key {
        h = splitmix(h ^ splitmix(k));
    }
    h
}
