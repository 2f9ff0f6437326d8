//! Seed-derived random streams.
//!
//! Every stochastic draw in the crate comes from a stream keyed by
//! `(master seed, purpose tag, salts)`, so any point in a run can be
//! reproduced without serializing generator state: the stream for step `t`
//! is a pure function of the seed and `t`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic ChaCha8 stream for `(seed, tag, salts)`.
pub fn stream(seed: u64, tag: &str, salts: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0xA076_1D64_78BD_642F;
    for &b in tag.as_bytes() {
        state ^= u64::from(b);
        splitmix64(&mut state);
    }
    for &s in salts {
        state ^= s;
        splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
