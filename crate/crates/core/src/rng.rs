//! Deterministic RNG streams.
//!
//! Every stochastic step draws from a ChaCha stream keyed by a master seed and
//! a path of task ids, so results do not depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a sequence of ids into a single 64-bit key.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &id| splitmix64(acc ^ splitmix64(id)))
}

pub fn stream(master: u64, path: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// Domain tags, so different kinds of tasks never share a stream.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const POPULATION: u64 = 3;
    pub const PROGRAM: u64 = 4;
    pub const RTN: u64 = 5;
    pub const COMMITTEE: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const BASE: u64 = 8;
}
