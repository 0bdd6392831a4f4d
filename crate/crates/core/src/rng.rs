//! Seed derivation. Every random stream (parameter init, shuffling, each
//! dropout site of each instance) gets its own generator derived from the
//! run seed, so results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(base: u64, parts: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(base, parts))
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn hash_str(s: &str) -> u64 {
    fnv1a(s.as_bytes())
}

/// Hash of the exact bit patterns of a vector.
pub fn hash_f64s(values: &[f64]) -> u64 {
    values
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            v.to_bits()
                .to_le_bytes()
                .iter()
                .fold(h, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
        })
}

// Stream tags.
pub(crate) const INIT: u64 = 1;
pub(crate) const SHUFFLE: u64 = 2;
pub(crate) const ENCODE_DROPOUT: u64 = 3;
pub(crate) const RELATION_DROPOUT: u64 = 4;
pub(crate) const CONNECTIVE_DROPOUT: u64 = 5;
pub(crate) const MEMORY_DROPOUT: u64 = 6;
pub(crate) const MEMORY_HEAD_DROPOUT: u64 = 7;
pub(crate) const KEY_RESPONSE_DROPOUT: u64 = 8;
pub(crate) const MEMORY_KEYS: u64 = 9;
pub(crate) const SUBSAMPLE: u64 = 10;
