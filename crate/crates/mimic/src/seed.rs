//! Seed derivation for reproducible sub-streams.
//!
//! Every random decision in the workbench draws from a ChaCha stream whose
//! seed is derived from a master seed plus a domain tag, so results are
//! independent of execution order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby seed values.
pub fn mix(seed: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a seed with a stream tag (and optional indices) into a new seed.
pub fn derive(seed: u64, tag: &str) -> u64 {
    let mut h = fnv1a(tag.as_bytes());
    h = mix(h ^ seed);
    h
}

pub fn derive2(seed: u64, tag: &str, a: u64) -> u64 {
    mix(derive(seed, tag) ^ mix(a))
}

pub fn derive3(seed: u64, tag: &str, a: u64, b: u64) -> u64 {
    mix(derive2(seed, tag, a) ^ mix(b.wrapping_add(0x51ed_270b)))
}

/// Deterministic RNG for a derived seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// FNV-1a over raw bytes; stable across runs and platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash of an f32 slice by bit pattern, for per-input noise seeds.
pub fn hash_f32s(values: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
