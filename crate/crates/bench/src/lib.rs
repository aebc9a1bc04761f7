//! Fixtures shared by the benchmarks.

use ddlab_core::nn::{Architecture, DenoiserInput, DenoiserModel, ModelRole};
use ddlab_core::{gaussian_pair, RngStream, Vec2};

/// The default 3×128 architecture with random weights.
pub fn default_model() -> DenoiserModel {
    DenoiserModel::init(Architecture::default(), ModelRole::Base, 7).expect("valid architecture")
}

pub fn gaussian_points(n: usize, seed: u64) -> Vec<Vec2> {
    let mut rng = RngStream::new(seed, 0);
    (0..n).map(|_| gaussian_pair(&mut rng)).collect()
}

pub fn inputs(n: usize) -> Vec<DenoiserInput> {
    gaussian_points(n, 3)
        .into_iter()
        .enumerate()
        .map(|(i, x)| DenoiserInput {
            x,
            t_frac: (i % 64) as f64 / 64.0,
            cond: Some(i % 8),
        })
        .collect()
}
