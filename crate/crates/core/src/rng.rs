//! Seeded random streams.
//!
//! Every consumer of randomness asks for a `(seed, stream)` pair. ChaCha is a
//! counter-based generator, so distinct streams never overlap and results do
//! not depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers for the different consumers of randomness.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const DATA: u64 = 3;
    pub const OPTIM: u64 = 4;
    pub const HMC: u64 = 5;
    pub const MFVI: u64 = 6;
    pub const SWAG: u64 = 7;
    pub const PREDICT: u64 = 8;
    pub const BOOTSTRAP: u64 = 9;
    pub const UCDA: u64 = 10;
}

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
