#![allow(dead_code)]

use cpd_crib::analysis::max_stable_rank_bound;
use cpd_crib::tensor::{gram_cache, KruskalModel};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random model whose gram correlations all lie in `[lo, hi]` in absolute value.
pub fn bounded_model(dims: &[usize], rank: usize, seed: u64, lo: f64, hi: f64) -> KruskalModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let factors = dims
            .iter()
            .map(|&d| DMatrix::from_fn(d, rank, |_, _| rng.random_range(-0.4..1.0)))
            .collect();
        let m = KruskalModel::new(factors).unwrap();
        let cache = gram_cache(&m);
        let ok = (0..dims.len()).all(|n| {
            (0..rank).all(|r| {
                (0..rank).filter(|&s| s != r).all(|s| {
                    let c = cache.correlation(n, r, s).abs();
                    (lo..=hi).contains(&c)
                })
            })
        });
        if ok {
            return m;
        }
    }
}

/// Caps `rank` at the stable-rank bound of `dims`.
pub fn stable_rank(dims: &[usize], rank: usize) -> usize {
    rank.min(max_stable_rank_bound(dims).unwrap()).max(1)
}

/// Caps `rank` at the stable-rank bound and at the smallest dimension.
pub fn generic_rank(dims: &[usize], rank: usize) -> usize {
    stable_rank(dims, rank).min(*dims.iter().min().unwrap())
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

pub fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
