//! Seeded randomness.
//!
//! Every stochastic choice in the crate draws from [`ChaCha8Rng`]. A run has a
//! single `u64` seed; independent consumers get their own ChaCha stream of that
//! seed rather than sharing one generator, so adding a parameter or a layer never
//! shifts the numbers another consumer sees.
//!
//! Stream assignment:
//!
//! | consumer                          | stream                         |
//! |-----------------------------------|--------------------------------|
//! | parameter named `name`            | `fnv1a64(name)`                |
//! | corpus shuffling, epoch `e`       | `SHUFFLE_BASE + e`             |
//! | dropout masks                     | `DROPOUT_STREAM`               |
//! | synthetic corpus text             | `SYNTH_TEXT_STREAM`            |
//! | synthetic features                | `SYNTH_FEATURE_BASE + sense`   |
//!
//! Parameter streams are keyed by the hierarchical parameter name
//! (`decoder.layer3.ffn.W1`), which is what makes the split per layer.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

pub const DROPOUT_STREAM: u64 = 1;
pub const SYNTH_TEXT_STREAM: u64 = 2;
pub const CLASS_TABLE_STREAM: u64 = 3;
pub const SHUFFLE_BASE: u64 = 1 << 32;
pub const SYNTH_FEATURE_BASE: u64 = 1 << 40;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn for_name(seed: u64, name: &str) -> ChaCha8Rng {
    stream(seed, fnv1a64(name.as_bytes()))
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
