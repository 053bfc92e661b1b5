//! Streaming federated learning with on-device data selection.

pub mod config;
pub mod coordination;
pub mod datagen;
pub mod engine;
pub mod error;
pub mod estimators;
pub mod metrics;
pub mod numkernel;
pub mod probes;
pub mod report;
pub mod rng;
pub mod selection;

pub use coordination::{CoordinationPlan, VelocityMatrix};
pub use datagen::{FederatedDataset, StreamSchedule, SyntheticConfig};
pub use engine::{
    run_experiment, ExperimentReport, Hyperparams, RoundRecord, SimConfig, Simulation,
};
pub use error::{Error, Result};
pub use numkernel::{GradVector, GradWindow, ModelKind, ModelSpec, ParamVector, Sample};
pub use selection::{Strategy, StrategyKind};
