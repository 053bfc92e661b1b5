//! Fixtures shared by the kernel benchmarks.

use fedstream_core::coordination::VelocityMatrix;
use fedstream_core::datagen::{generate_synthetic, SigmaProfile};
use fedstream_core::{FederatedDataset, SyntheticConfig};

/// The 50-client, 60-feature, 10-class synthetic federation.
pub fn federation(seed: u64) -> FederatedDataset {
    generate_synthetic(&SyntheticConfig {
        sigma: SigmaProfile::Constant(0.5),
        seed,
        ..Default::default()
    })
    .expect("default synthetic config is valid")
}

/// Velocity matrix with one sample per client per round.
pub fn velocities(ds: &FederatedDataset) -> VelocityMatrix {
    VelocityMatrix::from_dataset(ds, &vec![1; ds.client_count()])
        .expect("every client has training data")
}
