//! Deterministic child-seed derivation.
//!
//! Every fit in an LFO run is seeded from `(master, index)` alone, so two
//! runs that fit the same prefix produce bit-identical draws no matter which
//! mode requested the fit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a path of stream labels.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    let mut state = mix(master.wrapping_add(GOLDEN));
    for &p in path {
        state = mix(state ^ mix(p.wrapping_add(GOLDEN)).wrapping_add(GOLDEN));
    }
    state
}

/// Stream labels, so seeds for fits, predictions and data never collide.
pub mod stream {
    pub const FIT: u64 = 1;
    pub const PREDICT: u64 = 2;
    pub const DATA: u64 = 3;
    pub const CHAIN: u64 = 4;
    pub const SERIES: u64 = 5;
    pub const LOO: u64 = 6;
}

pub fn fit_seed(master: u64, prefix_len: usize) -> u64 {
    derive(master, &[stream::FIT, prefix_len as u64])
}

pub fn predict_seed(master: u64, i: usize) -> u64 {
    derive(master, &[stream::PREDICT, i as u64])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
