//! Experiment configuration in a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. Every key has a default; see [`ExperimentConfig::KEYS`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{
    generate_synthetic, load_dataset, FederatedDataset, SigmaProfile, SyntheticConfig,
};
use crate::engine::{Hyperparams, SimConfig};
use crate::error::{Error, Result};
use crate::numkernel::{GradWindow, ModelKind, ModelSpec};
use crate::selection::{Strategy, StrategyKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Fixed dataset seed; `None` ties it to each run seed.
    pub data_seed: Option<u64>,
    pub noisy_clients: f64,
    pub noisy_samples: f64,
    pub model: ModelKind,
    pub hidden: Vec<usize>,
    pub strategies: Vec<StrategyKind>,
    pub window: GradWindow,
    pub hyper: Hyperparams,
    pub buffer_size: usize,
    pub shuffle_period: usize,
    pub n_label: usize,
    pub n_client: Option<usize>,
    pub coordinate: bool,
    pub rescore: bool,
    pub eval_every: usize,
    pub probes: bool,
    pub cl_twin: bool,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SyntheticConfig::default()),
            data_seed: None,
            noisy_clients: 0.0,
            noisy_samples: 0.0,
            model: ModelKind::LogReg,
            hidden: vec![32],
            strategies: vec![StrategyKind::Reservoir],
            window: GradWindow::Full,
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
            seeds: vec![0],
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "dataset",
        "alpha",
        "beta",
        "clients",
        "input_dim",
        "classes",
        "samples_per_client",
        "sigma",
        "data_seed",
        "noisy_clients",
        "noisy_samples",
        "model",
        "hidden",
        "strategies",
        "window",
        "lr",
        "lr_decay",
        "decay_every",
        "local_epochs",
        "batch_size",
        "participation",
        "rounds",
        "buffer_size",
        "shuffle_period",
        "n_label",
        "n_client",
        "coordinate",
        "rescore",
        "eval_every",
        "probes",
        "cl_twin",
        "seeds",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn synthetic_mut(&mut self) -> std::result::Result<&mut SyntheticConfig, String> {
        match &mut self.dataset {
            DatasetSource::Synthetic(s) => Ok(s),
            DatasetSource::File(_) => Err("generator keys do not apply to a dataset file".into()),
        }
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_inner(key, value)
            .map_err(|m| Error::config(format!("{key}: {m}")))
    }

    fn set_inner(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}`"))
        }
        match key {
            "dataset" => {
                self.dataset = if v == "synthetic" {
                    DatasetSource::Synthetic(SyntheticConfig::default())
                } else {
                    DatasetSource::File(PathBuf::from(v))
                }
            }
            "alpha" => self.synthetic_mut()?.alpha = num(v)?,
            "beta" => self.synthetic_mut()?.beta = num(v)?,
            "clients" => self.synthetic_mut()?.client_count = num(v)?,
            "input_dim" => self.synthetic_mut()?.input_dim = num(v)?,
            "classes" => self.synthetic_mut()?.class_count = num(v)?,
            "samples_per_client" => {
                self.synthetic_mut()?.samples_per_client =
                    parse_list(v).map_err(|_| format!("invalid list `{v}`"))?
            }
            "sigma" => {
                self.synthetic_mut()?.sigma =
                    v.parse::<SigmaProfile>().map_err(|e| e.to_string())?
            }
            "data_seed" => self.data_seed = if v == "run" { None } else { Some(num(v)?) },
            "noisy_clients" => self.noisy_clients = num(v)?,
            "noisy_samples" => self.noisy_samples = num(v)?,
            "model" => self.model = v.parse().map_err(|e: Error| e.to_string())?,
            "hidden" => self.hidden = parse_list(v).map_err(|_| format!("invalid list `{v}`"))?,
            "strategies" => self.strategies = parse_list(v).map_err(|e: Error| e.to_string())?,
            "window" => self.window = v.parse().map_err(|e: Error| e.to_string())?,
            "lr" => self.hyper.lr = num(v)?,
            "lr_decay" => self.hyper.lr_decay = num(v)?,
            "decay_every" => self.hyper.decay_every = num(v)?,
            "local_epochs" => self.hyper.local_epochs = num(v)?,
            "batch_size" => self.hyper.batch_size = if v == "full" { None } else { Some(num(v)?) },
            "participation" => self.hyper.participation = num(v)?,
            "rounds" => self.hyper.rounds = num(v)?,
            "buffer_size" => self.buffer_size = num(v)?,
            "shuffle_period" => self.shuffle_period = num(v)?,
            "n_label" => self.n_label = num(v)?,
            "n_client" => self.n_client = if v == "auto" { None } else { Some(num(v)?) },
            "coordinate" => {
                self.coordinate = parse_bool(v).ok_or(format!("invalid boolean `{v}`"))?
            }
            "rescore" => self.rescore = parse_bool(v).ok_or(format!("invalid boolean `{v}`"))?,
            "eval_every" => self.eval_every = num(v)?,
            "probes" => self.probes = parse_bool(v).ok_or(format!("invalid boolean `{v}`"))?,
            "cl_twin" => self.cl_twin = parse_bool(v).ok_or(format!("invalid boolean `{v}`"))?,
            "seeds" => self.seeds = parse_list(v).map_err(|_| format!("invalid list `{v}`"))?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        if self.strategies.is_empty() {
            return Err(Error::config("no strategies given"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("no seeds given"));
        }
        for f in [self.noisy_clients, self.noisy_samples] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(format!(
                    "noise fractions must lie in [0, 1], got {f}"
                )));
            }
        }
        for &k in &self.strategies {
            self.sim_config(k, 0, self.input_dim(), self.class_count())?
                .validate()?;
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        match &self.dataset {
            DatasetSource::Synthetic(s) => s.input_dim,
            DatasetSource::File(_) => 1,
        }
    }

    fn class_count(&self) -> usize {
        match &self.dataset {
            DatasetSource::Synthetic(s) => s.class_count,
            DatasetSource::File(_) => 2,
        }
    }

    pub fn model_spec(&self, input_dim: usize, class_count: usize) -> ModelSpec {
        match self.model {
            ModelKind::LogReg => ModelSpec::logreg(input_dim, class_count),
            ModelKind::Mlp => ModelSpec::mlp(input_dim, self.hidden.clone(), class_count),
            ModelKind::LinReg => ModelSpec::linreg(input_dim),
        }
    }

    /// Simulation settings for one strategy and run seed.
    pub fn sim_config(
        &self,
        kind: StrategyKind,
        seed: u64,
        input_dim: usize,
        class_count: usize,
    ) -> Result<SimConfig> {
        let mut sc = SimConfig::new(
            self.model_spec(input_dim, class_count),
            Strategy::new(kind).with_window(self.window),
        );
        sc.hyper = Hyperparams {
            seed,
            ..self.hyper.clone()
        };
        sc.buffer_size = self.buffer_size;
        sc.shuffle_period = self.shuffle_period;
        sc.n_label = self.n_label;
        sc.n_client = self.n_client;
        sc.coordinate = self.coordinate;
        sc.rescore = self.rescore;
        sc.eval_every = self.eval_every;
        sc.probes = self.probes;
        sc.cl_twin = self.cl_twin;
        Ok(sc)
    }

    /// The dataset a run with `seed` uses, label noise applied.
    pub fn dataset_for(&self, seed: u64) -> Result<FederatedDataset> {
        let data_seed = self.data_seed.unwrap_or(seed);
        let mut ds = match &self.dataset {
            DatasetSource::Synthetic(s) => generate_synthetic(&SyntheticConfig {
                seed: data_seed,
                ..s.clone()
            })?,
            DatasetSource::File(p) => load_dataset(p)?,
        };
        if self.noisy_clients > 0.0 && self.noisy_samples > 0.0 {
            ds.flip_labels(self.noisy_clients, self.noisy_samples, data_seed);
        }
        Ok(ds)
    }
}
