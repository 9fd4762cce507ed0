//! Seeded random number generators.
//!
//! Everything stochastic in the toolkit flows through ChaCha8 streams so
//! that a (seed, data, config) triple fully determines a run, independent
//! of platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent named stream derived from a base seed, so that e.g. dropout
/// draws never shift parameter initialization.
pub fn stream(seed: u64, label: &str) -> Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}
