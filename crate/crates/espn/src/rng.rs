//! Counter-based random streams.
//!
//! Every consumer of randomness in this crate opens an independent stream
//! keyed by a list of integers (run seed, step index, candidate index, a
//! stream label, ...). The stream for a given key is identical no matter
//! which worker opens it or in what order, which is what makes populations
//! reproducible across different shard counts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels. Keeping them distinct guarantees that, say, episode
/// sampling at step 7 never shares a stream with population sampling at
/// step 7.
pub mod stream {
    pub const POPULATION: u64 = 0x01;
    pub const EPISODE: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const SPLIT: u64 = 0x04;
    pub const EVAL: u64 = 0x05;
    pub const VAL: u64 = 0x06;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a 256-bit ChaCha key from the key parts.
fn derive_key(parts: &[u64]) -> [u8; 32] {
    let mut state: u64 = 0x243f6a8885a308d3;
    for &p in parts {
        state ^= p;
        state = state.wrapping_mul(0x9e3779b97f4a7c15);
        let mut s = state;
        state ^= splitmix64(&mut s);
    }
    // absorb the key length so prefixes of longer keys do not collide
    state ^= parts.len() as u64;
    let mut s = state;
    state ^= splitmix64(&mut s);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    key
}

/// Opens the random stream identified by `parts`.
pub fn stream_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_key(parts))
}
