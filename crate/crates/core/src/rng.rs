//! Seed derivation. Every stochastic component gets its own stream derived
//! from the run seed and a tag, so results do not depend on call order.

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

pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = mix(seed);
    for b in tag.bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ index)
}

pub fn rng_for(seed: u64, tag: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tag, index))
}
