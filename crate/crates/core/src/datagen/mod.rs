//! Synthetic federated datasets, client stream scheduling, and the on-disk
//! dataset format.
//!
//! Per client `k` the generator draws, from the substream `DATASET/k` and in this
//! order: `u_k ~ N(0, alpha)`, `B_k ~ N(0, beta)`, the `|Y| x d` weight matrix
//! row-major with entries `N(u_k, 1)`, the bias with entries `N(u_k, 1)`, the
//! feature mean `v_k` with entries `N(B_k, 1)`, and then every sample's features
//! `x_j ~ N(v_k[j], sigma_j)`. The label is `argmax(W_k x + b_k)`. The train/test
//! split shuffles sample indices with the substream `SPLIT/k`; the first
//! `n / 5` shuffled indices become the test set.

mod io;
mod stream;

pub use io::{load_dataset, parse_dataset, save_dataset, write_dataset};
pub use stream::StreamSchedule;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Sample;
use crate::rng::{tags, StreamRng};

/// Diagonal feature covariance profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SigmaProfile {
    /// Every diagonal entry equals the given variance.
    Constant(f64),
    /// `Sigma_jj = j^-exponent` for 1-based `j`.
    Decaying(f64),
}

impl Default for SigmaProfile {
    fn default() -> Self {
        SigmaProfile::Constant(1e3)
    }
}

impl SigmaProfile {
    pub fn variance(&self, j: usize) -> f64 {
        match *self {
            SigmaProfile::Constant(v) => v,
            SigmaProfile::Decaying(e) => ((j + 1) as f64).powf(-e),
        }
    }
}

impl std::str::FromStr for SigmaProfile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "leaf" {
            return Ok(SigmaProfile::Decaying(1.2));
        }
        if let Some(e) = s.strip_prefix("decay:") {
            return e
                .parse()
                .map(SigmaProfile::Decaying)
                .map_err(|_| Error::config(format!("bad sigma profile `{s}`")));
        }
        s.parse()
            .map(SigmaProfile::Constant)
            .map_err(|_| Error::config(format!("bad sigma profile `{s}`")))
    }
}

impl std::fmt::Display for SigmaProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SigmaProfile::Constant(v) => write!(f, "{v}"),
            SigmaProfile::Decaying(e) if *e == 1.2 => write!(f, "leaf"),
            SigmaProfile::Decaying(e) => write!(f, "decay:{e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub alpha: f64,
    pub beta: f64,
    pub client_count: usize,
    pub input_dim: usize,
    pub class_count: usize,
    /// Total (train + test) samples per client. Empty means "draw the default
    /// unbalanced sizes"; a single entry applies to every client.
    pub samples_per_client: Vec<usize>,
    pub sigma: SigmaProfile,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            client_count: 50,
            input_dim: 60,
            class_count: 10,
            samples_per_client: Vec::new(),
            sigma: SigmaProfile::default(),
            seed: 0,
        }
    }
}

/// Unbalanced client sizes: lognormal with median 200 and shape 0.8, rounded
/// and clipped to `[50, 2000]`.
pub fn default_client_sizes(client_count: usize, seed: u64) -> Vec<usize> {
    let mut rng = StreamRng::new(seed).substream(tags::CLIENT_SIZES);
    (0..client_count)
        .map(|_| {
            let n = (200f64.ln() + 0.8 * rng.normal()).exp().round();
            n.clamp(50.0, 2000.0) as usize
        })
        .collect()
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config("alpha and beta must be non-negative"));
        }
        if self.client_count == 0 || self.input_dim == 0 || self.class_count < 2 {
            return Err(Error::config(
                "need at least one client, one feature and two classes",
            ));
        }
        if !self.samples_per_client.is_empty() {
            if self.samples_per_client.len() != 1
                && self.samples_per_client.len() != self.client_count
            {
                return Err(Error::config(format!(
                    "samples_per_client has {} entries for {} clients",
                    self.samples_per_client.len(),
                    self.client_count
                )));
            }
            if self.samples_per_client.iter().any(|&n| n < 2) {
                return Err(Error::config(
                    "every client needs at least two samples (one train, one test)",
                ));
            }
        }
        Ok(())
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        if self.samples_per_client.is_empty() {
            default_client_sizes(self.client_count, self.seed)
        } else if self.samples_per_client.len() == 1 {
            vec![self.samples_per_client[0]; self.client_count]
        } else {
            self.samples_per_client.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClientData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub clients: Vec<ClientData>,
    pub class_count: usize,
    pub input_dim: usize,
}

impl FederatedDataset {
    pub fn client_count(&self) -> usize {
        self.clients.len()
    }

    pub fn train_counts(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.train.len()).collect()
    }

    /// Per-client training label histogram.
    pub fn label_counts(&self) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|c| {
                let mut h = vec![0; self.class_count];
                for s in &c.train {
                    h[s.label] += 1;
                }
                h
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (id, c) in self.clients.iter().enumerate() {
            if c.train.is_empty() {
                return Err(Error::Invalid(format!(
                    "client has no training data (client {id})"
                )));
            }
            for s in c.train.iter().chain(&c.test) {
                if s.features.len() != self.input_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.input_dim,
                        actual: s.features.len(),
                    });
                }
                if s.label >= self.class_count {
                    return Err(Error::Invalid(format!(
                        "client {id}: label {} out of range",
                        s.label
                    )));
                }
            }
        }
        Ok(())
    }

    /// Relabel a fraction of the training samples of a fraction of the clients
    /// with uniformly drawn wrong labels. Returns the affected client ids.
    pub fn flip_labels(
        &mut self,
        client_fraction: f64,
        sample_fraction: f64,
        seed: u64,
    ) -> Vec<usize> {
        let mut rng = StreamRng::new(seed).substream(tags::NOISE);
        let n_clients = (client_fraction * self.clients.len() as f64).round() as usize;
        let mut noisy = rng.sample_indices(self.clients.len(), n_clients.min(self.clients.len()));
        noisy.sort_unstable();
        for &c in &noisy {
            let mut crng = rng.substream(c as u64);
            let train = &mut self.clients[c].train;
            let k = (sample_fraction * train.len() as f64).round() as usize;
            for i in crng.sample_indices(train.len(), k.min(train.len())) {
                let old = train[i].label;
                let shift = 1 + crng.below(self.class_count as u64 - 1) as usize;
                let new = (old + shift) % self.class_count;
                train[i].label = new;
                train[i].target = new as f64;
            }
        }
        noisy
    }
}

/// Ground-truth generator parameters of one synthetic client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientGenerator {
    /// `|Y| x d`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub feature_mean: Vec<f64>,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<FederatedDataset> {
    generate_synthetic_with_truth(cfg).map(|(d, _)| d)
}

pub fn generate_synthetic_with_truth(
    cfg: &SyntheticConfig,
) -> Result<(FederatedDataset, Vec<ClientGenerator>)> {
    cfg.validate()?;
    let root = StreamRng::new(cfg.seed);
    let (d, ny) = (cfg.input_dim, cfg.class_count);
    let sigma_sd: Vec<f64> = (0..d).map(|j| cfg.sigma.variance(j).sqrt()).collect();
    let mut clients = Vec::with_capacity(cfg.client_count);
    let mut truth = Vec::with_capacity(cfg.client_count);

    for (k, n) in cfg.client_sizes().into_iter().enumerate() {
        let mut rng = root.substream2(tags::DATASET, k as u64);
        let u = rng.normal_with(0.0, cfg.alpha.sqrt());
        let big_b = rng.normal_with(0.0, cfg.beta.sqrt());
        let weights: Vec<f64> = (0..ny * d).map(|_| rng.normal_with(u, 1.0)).collect();
        let bias: Vec<f64> = (0..ny).map(|_| rng.normal_with(u, 1.0)).collect();
        let mean: Vec<f64> = (0..d).map(|_| rng.normal_with(big_b, 1.0)).collect();

        let all: Vec<Sample> = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..d)
                    .map(|j| rng.normal_with(mean[j], sigma_sd[j]))
                    .collect();
                let label = linear_argmax(&weights, &bias, &x);
                Sample::new(x, label)
            })
            .collect();

        let mut order: Vec<usize> = (0..n).collect();
        root.substream2(tags::SPLIT, k as u64).shuffle(&mut order);
        let n_test = n / 5;
        let mut is_test = vec![false; n];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        let mut data = ClientData::default();
        for (i, s) in all.into_iter().enumerate() {
            if is_test[i] {
                let idx = data.test.len() as u64;
                data.test.push(s.with_origin(k, idx));
            } else {
                let idx = data.train.len() as u64;
                data.train.push(s.with_origin(k, idx));
            }
        }
        clients.push(data);
        truth.push(ClientGenerator {
            weights,
            bias,
            feature_mean: mean,
        });
    }

    Ok((
        FederatedDataset {
            clients,
            class_count: ny,
            input_dim: d,
        },
        truth,
    ))
}

fn linear_argmax(weights: &[f64], bias: &[f64], x: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (y, (row, b)) in weights.chunks_exact(x.len()).zip(bias).enumerate() {
        let z = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b;
        if z > best.1 {
            best = (y, z);
        }
    }
    best.0
}
