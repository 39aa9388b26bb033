//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a
//! `(seed, stream)` pair so that parallel workers never share state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes an index into a seed (splitmix64 finaliser).
pub fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Source of reparameterisation noise.
pub trait NoiseSource {
    fn draw(&mut self, dim: usize) -> Vec<f64>;
}

/// Always returns the zero vector, collapsing sampling onto the means.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn draw(&mut self, dim: usize) -> Vec<f64> {
        vec![0.0; dim]
    }
}

impl<R: Rng> NoiseSource for R {
    fn draw(&mut self, dim: usize) -> Vec<f64> {
        standard_normal_vec(self, dim)
    }
}
