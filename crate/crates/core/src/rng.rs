//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sources of randomness derived from one top-level seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Mixup,
    Basis,
    Shuffle,
    Corruption,
}

impl Stream {
    fn offset(self) -> u64 {
        match self {
            Stream::Data => 0,
            Stream::Init => 1_000_003,
            Stream::Mixup => 2_000_006,
            Stream::Basis => 3_000_009,
            Stream::Shuffle => 4_000_012,
            Stream::Corruption => 5_000_015,
        }
    }
}

pub fn stream_seed(seed: u64, stream: Stream) -> u64 {
    seed.wrapping_add(stream.offset())
}

/// Seed for a sub-step (epoch, batch) of a stream.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
