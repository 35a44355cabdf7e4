//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows through a `ChaCha8Rng` derived from
//! a user seed plus a purpose tag, so checkpoint/resume and replay never
//! need to persist generator state: the stream for (seed, tag, indices) is
//! always reconstructible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with a purpose tag and up to two indices into a
/// 64-bit sub-seed (splitmix-style finalizer over the components).
pub fn derive_seed(base: u64, tag: &str, a: u64, b: u64) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &byte in tag.as_bytes() {
        h = mix(h ^ byte as u64);
    }
    h = mix(h ^ a);
    h = mix(h ^ b.wrapping_mul(0x2545_f491_4f6c_dd1d));
    h
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha stream for (seed, tag, a, b). ChaCha is reproducible across
/// platforms, unlike the std hasher.
pub fn rng_for(base: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, a, b))
}
