#![allow(dead_code)]

use fedstream_core::datagen::{generate_synthetic, SigmaProfile};
use fedstream_core::{FederatedDataset, SyntheticConfig};

/// Small learnable synthetic dataset with equal client sizes.
pub fn small_dataset(
    clients: usize,
    input_dim: usize,
    classes: usize,
    per_client: usize,
    seed: u64,
) -> FederatedDataset {
    generate_synthetic(&SyntheticConfig {
        client_count: clients,
        input_dim,
        class_count: classes,
        samples_per_client: vec![per_client; clients],
        sigma: SigmaProfile::Constant(1.0),
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
