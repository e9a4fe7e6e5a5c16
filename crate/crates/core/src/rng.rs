//! Keyed random streams.
//!
//! Every stochastic draw in the crate comes from a stream derived from a
//! master seed plus a short tuple of integers (client id, round, step, ...).
//! Results therefore do not depend on the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags so that streams used for different purposes never collide.
pub mod tag {
    pub const DATA: u64 = 0x01;
    pub const WEIGHTS: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const STEP: u64 = 0x04;
    pub const SHUFFLE: u64 = 0x05;
    pub const TRIAL: u64 = 0x06;
    pub const SAMPLER: u64 = 0x07;
    pub const SCORE_ERROR: u64 = 0x08;
    pub const FINETUNE: u64 = 0x09;
    pub const NEW_CLIENT: u64 = 0x0a;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed and a key tuple into a single 64-bit value.
pub fn mix(seed: u64, key: &[u64]) -> u64 {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &k in key {
        state ^= k.wrapping_mul(0xd6e8_feb8_6659_fd93) ^ acc;
        acc = splitmix64(&mut state);
    }
    acc
}

/// Independent stream for `(seed, key...)`.
pub fn stream(seed: u64, key: &[u64]) -> StreamRng {
    let mut state = mix(seed, key);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
