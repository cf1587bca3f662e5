//! Hierarchical seeding.
//!
//! Every stage and worker draws its own ChaCha stream from a seed derived
//! from `(parent, label, index)`, so results do not depend on how work is
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed. Distinct labels or indices give unrelated streams.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = splitmix64(parent);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ splitmix64(index))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn child_rng(parent: u64, label: &str, index: u64) -> Rng {
    rng_from(derive_seed(parent, label, index))
}
