//! Seed fan-out.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by a
//! root seed plus a short list of tags (component, step index, band, ...),
//! so independent consumers never share a stream and any single step can
//! be replayed in isolation.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream tags for the components that draw randomness.
pub mod tag {
    pub const NOISE: u64 = 0x6e6f;
    pub const MASK: u64 = 0x6d61;
    pub const PERTURB: u64 = 0x7065;
    pub const PREDICTOR: u64 = 0x7072;
    pub const CORRECTOR: u64 = 0x636f;
    pub const INIT: u64 = 0x696e;
    pub const TRAIN: u64 = 0x7472;
    pub const HF_SELECT: u64 = 0x6866;
    pub const PHANTOM: u64 = 0x7068;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a root seed with tags into a child seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

/// Standard normal matrix drawn row-major from `rng`.
pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Where the Gaussian `z` of a stochastic step comes from.
///
/// `Zero` exists so tests can isolate the drift term of a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseSource {
    Seeded(u64),
    Zero,
}

impl NoiseSource {
    pub fn draw(self, rows: usize, cols: usize) -> Array2<f64> {
        match self {
            NoiseSource::Seeded(seed) => normal_matrix(&mut stream(seed, &[]), rows, cols),
            NoiseSource::Zero => Array2::zeros((rows, cols)),
        }
    }

    /// Child source for a sub-step; `Zero` stays `Zero`.
    pub fn child(self, tags: &[u64]) -> NoiseSource {
        match self {
            NoiseSource::Seeded(seed) => NoiseSource::Seeded(derive(seed, tags)),
            NoiseSource::Zero => NoiseSource::Zero,
        }
    }
}
