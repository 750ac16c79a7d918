//! Named, reproducible random streams derived from one global seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Seed for sub-stream `name` number `index` under `seed`.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(name.as_bytes())) ^ splitmix(index.wrapping_add(0x5bd1_e995)))
}

/// Generator for sub-stream `name` number `index` under `seed`.
pub fn stream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name, index))
}
