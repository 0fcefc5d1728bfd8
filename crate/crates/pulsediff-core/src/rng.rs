//! Named, seeded random streams.
//!
//! A single root seed fans out to independent sub-streams identified by a
//! stage name (and an optional item index), so per-recording and per-draw work
//! can run in any order or in parallel while staying bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the stream name, then splitmix64 finalisation mixed with the
/// root seed and index. Stable across platforms.
fn derive(root: u64, name: &str, index: u64) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf29ce484222325;
    const FNV_PRIME: u64 = 0x100000001b3;
    let mut h = FNV_OFFSET;
    for &b in name.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut z = root
        .wrapping_add(h)
        .wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A seeded stream for one pipeline stage.
pub fn stream(root_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root_seed, name, 0))
}

/// A seeded stream for one item (recording, draw, ...) within a stage.
pub fn substream(root_seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root_seed, name, index))
}

/// Derived sub-seed, for handing to APIs that take a seed rather than an rng.
pub fn subseed(root_seed: u64, name: &str, index: u64) -> u64 {
    derive(root_seed, name, index)
}
