//! Seed derivation helpers.
//!
//! All random streams in the crate are ChaCha8 generators keyed by a root seed
//! mixed with structural indices (step, batch slot, pair index, ...), so any
//! point in a run can be reproduced without replaying the stream up to it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby seeds.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive a child seed from a root seed and up to two structural indices.
pub fn derive_seed(root: u64, a: u64, b: u64) -> u64 {
    mix64(root ^ mix64(a.wrapping_mul(0xA24B_AED4_963E_E407)) ^ mix64(b.wrapping_mul(0x9FB2_1C65_1E98_DF25)))
}

/// ChaCha8 generator for a derived seed.
pub fn rng_for(root: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, a, b))
}
