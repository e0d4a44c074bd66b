//! Seeded random streams.
//!
//! Every consumer derives its generator from `(seed, stream)` so results do
//! not depend on call order across independent work items.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub type SeededRng = ChaCha8Rng;

/// Generator for the `stream`-th independent sequence under `seed`.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes two words into a derived seed (splitmix64 finalizer).
pub fn derive(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normal<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

pub fn uniform<T: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..=bound)))
}
