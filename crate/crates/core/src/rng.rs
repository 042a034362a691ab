//! Seed derivation helpers. Every random stream in the crate is a ChaCha8
//! generator keyed by a `u64` seed mixed with a label, so results depend only
//! on seeds and never on call order across components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, label: &str) -> u64 {
    mix(seed ^ fnv1a(label.as_bytes()))
}

pub fn derive_n(seed: u64, label: &str, n: u64) -> u64 {
    mix(derive(seed, label) ^ mix(n))
}

pub fn stream(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, label))
}

pub fn stream_n(seed: u64, label: &str, n: u64) -> Rng {
    Rng::seed_from_u64(derive_n(seed, label, n))
}
