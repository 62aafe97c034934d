//! Seed derivation for isolated random streams.
//!
//! Every consumer of randomness (data generation, partitioning, noise, model
//! init, client selection, per-client batch order) draws from its own ChaCha
//! stream whose seed is a hash of the master seed and a path of integers.
//! Streams never share state, so adding a client or a round cannot perturb
//! the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags.
pub mod tag {
    pub const TRAIN_DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const SELECTION: u64 = 6;
    pub const CLIENT_ORDER: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a master seed with a path of stream coordinates into a new seed.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, path: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

pub fn from_seed(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
