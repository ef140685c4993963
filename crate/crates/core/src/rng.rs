//! Seed derivation for reproducible, independently seeded streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type AsitRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of stream identifiers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019))))
}

pub fn rng_for(base: u64, parts: &[u64]) -> AsitRng {
    AsitRng::seed_from_u64(derive_seed(base, parts))
}

pub fn seeded(seed: u64) -> AsitRng {
    AsitRng::seed_from_u64(seed)
}
