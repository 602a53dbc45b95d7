//! Named, counter-addressed random streams.
//!
//! Every consumer of randomness (initialization, data synthesis, batch
//! sampling, trial construction) draws from its own stream, keyed by the
//! run seed, a stream name and an index. Changing how much one consumer
//! draws never shifts another consumer's numbers, and parallel generation
//! reproduces serial generation bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit key for `(seed, stream, index)`.
pub fn stream_key(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h = splitmix64(seed);
    for b in stream.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ splitmix64(index))
}

pub fn stream(seed: u64, stream: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, stream, index))
}
