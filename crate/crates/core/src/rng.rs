//! Seeded randomness shared by every module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

pub type FacRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> FacRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Enough to rebuild a generator at the exact same position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn capture(rng: &FacRng) -> RngState {
    RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
}

pub fn restore(s: &RngState) -> FacRng {
    let mut r = ChaCha8Rng::from_seed(s.seed);
    r.set_stream(s.stream);
    r.set_word_pos(s.word_pos);
    r
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// `rows x cols` standard normal draws.
pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal(rng)).collect())
}

/// `rows x cols` uniform draws on [0, 1).
pub fn uniform_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>()).collect())
}

/// `n` indices drawn uniformly with replacement from `0..len`.
pub fn batch_indices<R: Rng + ?Sized>(rng: &mut R, len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..len)).collect()
}
