//! Fixtures shared by the benchmarks.

use prognos_core::autodiff::Tensor;
use prognos_core::config::ArchConfig;
use prognos_core::rng::stream;
use rand::Rng;

/// The desk-scale architecture from `configs/desk.conf`.
pub fn desk_arch() -> ArchConfig {
    ArchConfig {
        l_in: 100,
        l_out: 100,
        channels: 2,
        d_model: 16,
        n_layers: 2,
        heads: 2,
        fftr_layers: 2,
        aafn_heads: 2,
        pool_size: 10,
        prompt_len: 5,
        top_n: 3,
    }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = stream(seed, "bench");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_labels(n: usize, p: f64, seed: u64) -> Vec<u8> {
    let mut r = stream(seed, "bench.labels");
    (0..n).map(|_| r.random_bool(p) as u8).collect()
}

/// Two-tone sinusoid window.
pub fn ramp(rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|i| ((i / cols) as f64 * 0.13 * (1 + i % cols) as f64).sin())
            .collect(),
    )
    .unwrap()
}
