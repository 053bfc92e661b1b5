use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::ModelSpec;
use crate::selection::Strategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Initial learning rate `η₀`.
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Local epochs `m`.
    pub local_epochs: usize,
    /// Mini-batch size; `None` trains on the whole buffer per step.
    pub batch_size: Option<usize>,
    /// Fraction of clients taking part each round.
    pub participation: f64,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.95,
            decay_every: 100,
            local_epochs: 5,
            batch_size: None,
            participation: 0.1,
            rounds: 500,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.decay_every == 0 {
            return Err(Error::config(
                "learning-rate decay must be in (0, 1] with a positive period",
            ));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local epochs must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!(
                "participation rate must be in (0, 1], got {}",
                self.participation
            )));
        }
        Ok(())
    }

    /// `η₀ · decay^⌊t / decay_every⌋`.
    pub fn lr_at(&self, round: usize) -> f64 {
        self.lr * self.lr_decay.powi((round / self.decay_every) as i32)
    }

    /// `round(rate · |C|)`, at least one.
    pub fn participants_per_round(&self, client_count: usize) -> usize {
        ((self.participation * client_count as f64).round() as usize).clamp(1, client_count)
    }
}

/// Everything a single simulation needs besides the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub spec: ModelSpec,
    pub strategy: Strategy,
    pub hyper: Hyperparams,
    /// Per-client storage capacity `|B_c|`.
    pub buffer_size: usize,
    pub shuffle_period: usize,
    /// Clients each label should be stored on (`n_label`).
    pub n_label: usize,
    /// Labels a client may store (`n_client`); `None` picks the default.
    pub n_client: Option<usize>,
    /// ODE kinds plan storage across clients; off gives a single priority queue.
    pub coordinate: bool,
    /// Re-score stored samples whenever a new model arrives.
    pub rescore: bool,
    /// Evaluate every this many rounds (and at the last round).
    pub eval_every: usize,
    /// Compute diagnostic probes each round (does not affect training).
    pub probes: bool,
    /// Also advance a centralized twin for weight-divergence reporting.
    pub cl_twin: bool,
}

impl SimConfig {
    pub fn new(spec: ModelSpec, strategy: Strategy) -> Self {
        Self {
            spec,
            strategy,
            hyper: Hyperparams::default(),
            buffer_size: 10,
            shuffle_period: 500,
            n_label: 5,
            n_client: None,
            coordinate: true,
            rescore: false,
            eval_every: 5,
            probes: false,
            cl_twin: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.hyper.validate()?;
        self.spec.window_len(self.strategy.window)?;
        if self.buffer_size == 0 {
            return Err(Error::config("buffer size must be positive"));
        }
        if self.shuffle_period == 0 || self.eval_every == 0 {
            return Err(Error::config(
                "shuffle period and evaluation cadence must be positive",
            ));
        }
        if self.n_client == Some(0) {
            return Err(Error::config("n_client must be positive"));
        }
        Ok(())
    }

    pub fn uses_plan(&self) -> bool {
        self.coordinate && self.strategy.kind.is_ode()
    }
}
