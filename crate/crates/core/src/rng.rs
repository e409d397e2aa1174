//! Deterministic stream splitting.
//!
//! Every Monte Carlo loop in this crate derives one generator per draw index
//! from a `(seed, salt, index)` triple instead of sharing a sequential
//! generator across the loop. Results therefore do not depend on thread
//! count, iteration order, or whether the `parallel` feature is enabled.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Distinct salts for the crate's independent randomness consumers, so that
/// two loops keyed by the same base seed never share a stream.
pub(crate) mod salt {
    pub const PROPOSE: u64 = 0x70726f70;
    pub const KLD: u64 = 0x6b6c64;
    pub const FILTER_STEP: u64 = 0x73746570;
    pub const FILTER_INIT: u64 = 0x696e6974;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent ChaCha generator for one `(salt, index)` cell of a seeded run.
pub fn substream(seed: u64, salt: u64, index: u64) -> ChaCha12Rng {
    let mut state = seed;
    let mut words = [0u64; 4];
    words[0] = splitmix64(&mut state);
    state ^= salt;
    words[1] = splitmix64(&mut state);
    state ^= index;
    words[2] = splitmix64(&mut state);
    words[3] = splitmix64(&mut state);
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
