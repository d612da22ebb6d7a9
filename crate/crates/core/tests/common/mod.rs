#![allow(dead_code)]

use csscgg::data::{sufficient_stats, Dataset, SufficientStats};
use csscgg::linalg::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal))
}

/// Random dataset with correlated columns, `y` depending linearly on `x`.
pub fn random_dataset(seed: u64, n: usize, d: usize, p: usize) -> Dataset {
    let mut r = rng(seed);
    let x = normal_matrix(&mut r, n, d);
    let mix = normal_matrix(&mut r, d, p) * 0.5;
    let corr = Mat::identity(p, p) + normal_matrix(&mut r, p, p) * 0.3;
    let y = &x * mix + normal_matrix(&mut r, n, p) * corr;
    Dataset::from_blocks(x, y).unwrap()
}

pub fn random_stats(seed: u64, n: usize, d: usize, p: usize) -> SufficientStats {
    sufficient_stats(&random_dataset(seed, n, d, p))
}

/// Symmetric positive definite matrix with unit-ish diagonal.
pub fn random_spd(r: &mut ChaCha8Rng, p: usize) -> Mat {
    let a = normal_matrix(r, p, p) * 0.3;
    &a * a.transpose() + Mat::identity(p, p)
}
