//! Seed derivation.
//!
//! Every random stream in a run is seeded from one global `u64` through a
//! counter-based splitter, so the data a stream produces depends only on
//! `(global seed, stream, index)` and never on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    TrainInstances = 2,
    TrainWeights = 3,
    Rollouts = 4,
    Validation = 5,
    Dataset = 6,
    Diagnostics = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of element `index` of `stream`.
pub fn derive_seed(global: u64, stream: Stream, index: u64) -> u64 {
    let a = splitmix64(global ^ splitmix64(stream as u64));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn stream_rng(global: u64, stream: Stream, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(global, stream, index))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
