//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the master seed, so adding or removing one consumer never shifts the
//! numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    TransductivePhase = 2,
    OovPhase = 3,
    FeatureMask = 4,
    Evaluation = 5,
    Projection = 6,
    HashKeys = 7,
    RandVectors = 8,
    Holdout = 9,
    Toy = 10,
    Ranking = 11,
}

/// A generator for `(seed, stream, index)`. Only the low 48 bits of `index` are used.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) | (index & ((1 << 48) - 1)));
    rng
}
