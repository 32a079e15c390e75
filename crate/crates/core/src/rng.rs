//! Seeded random streams.
//!
//! Every generator is a ChaCha8 stream keyed by `(seed, stream)`: the 64-bit
//! seed is expanded with `seed_from_u64` and the stream id selects an
//! independent ChaCha stream. Output is identical on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_WORLD: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_TEST: u64 = 2;
pub const STREAM_CHOICES: u64 = 3;
pub const STREAM_DECISIONS: u64 = 4;
pub const STREAM_OPTIMIZER: u64 = 5;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes two words into a seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
