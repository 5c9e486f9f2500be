//! Counter-based derivation of independent random streams.
//!
//! Every random draw in a simulation comes from a ChaCha8 stream keyed by
//! `(seed, a, b)`, e.g. `(seed, replica, step)`. Streams do not depend on
//! scheduling, so serial and parallel runs agree bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Tag used for the stream that draws a replica's initial state.
pub const INIT_STEP: u64 = u64::MAX;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for a sub-experiment labelled by `tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ tag.wrapping_mul(0xA24B_AED4_963E_E407))
}

pub fn stream(seed: u64, a: u64, b: u64) -> SimRng {
    let mut key = [0u8; 32];
    let mut h = splitmix64(seed);
    for (i, word) in [a, b, 0x6b69_6e6c_6162, seed].iter().enumerate() {
        h = splitmix64(h ^ word.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        key[i * 8..(i + 1) * 8].copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
