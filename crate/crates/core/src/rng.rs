//! Seed plumbing. Every random draw in the crate goes through a ChaCha stream
//! derived from an explicit `(seed, stream)` pair so runs are reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer; mixes a parent seed and a stream tag into a child seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a string tag into a stream id (FNV-1a).
pub fn tag(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn rng_for(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, tag(name)))
}

pub fn gaussian_vec(rng: &mut Rng, len: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    (0..len).map(|_| normal.sample(rng)).collect()
}
