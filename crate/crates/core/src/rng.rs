//! Seed derivation and hashing helpers.
//!
//! All randomness in the crate flows from a single root seed. Derived
//! streams are named, so a consumer never depends on the call order of
//! another component, and training steps can be replayed from any point
//! (resume only needs the step counter, not saved generator state).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a. Used for seed-stream names, config fingerprints, and
/// parameter-group hashing.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates related seed values.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for the stream `name[index]` under `root`.
pub fn stream_rng(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    let seed = splitmix64(splitmix64(root ^ fnv1a64(name.as_bytes())) ^ index);
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent named root seed (e.g. the training-data and
/// evaluation-data splits) from one master seed.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ fnv1a64(name.as_bytes()))
}

/// Order-sensitive hash of a slice of `f64`, for parameter freeze checks.
pub fn hash_f64_slice(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
