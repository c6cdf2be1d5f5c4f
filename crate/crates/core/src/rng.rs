//! Deterministic random streams.
//!
//! Every stochastic step draws from a ChaCha stream keyed by
//! `(master seed, iteration, block tag, index)`, so results depend only on the
//! seed and never on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Block tags separating the streams used within one sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Tag {
    Latent = 1,
    Loadings = 2,
    Factors = 3,
    Scalars = 4,
    Noise = 5,
    Predictive = 6,
    Init = 7,
    Forecast = 8,
    Simulate = 9,
    Partition = 10,
    Observer = 11,
    Grid = 12,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, iteration: u64, tag: Tag, index: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ iteration);
    h = splitmix(h ^ tag as u64);
    splitmix(h ^ index)
}

pub fn stream(seed: u64, iteration: u64, tag: Tag, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, iteration, tag, index))
}
