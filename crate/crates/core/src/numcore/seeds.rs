//! Deterministic seed derivation.
//!
//! Every stochastic stream in the pipeline (init, data order, masking,
//! dropout, layer selection) gets its own rng derived from the run seed and
//! a label, so toggling one feature never shifts another stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the label, folded into the base seed. Stable across builds.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ base.wrapping_mul(0x100000001b3);
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
