//! Keyed, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A generator whose state depends only on `seed` and the ordered `keys`.
pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mixed = keys
        .iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)));
    ChaCha8Rng::seed_from_u64(mixed)
}
