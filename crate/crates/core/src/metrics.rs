//! Accuracy, loss and time-to-accuracy metrics.

use log::warn;
use rayon::prelude::*;

use crate::datagen::FederatedDataset;
use crate::error::Result;
use crate::numkernel::{forward_loss, predict, ModelSpec, ParamVector, Sample};

/// Trailing window used to smooth accuracy before comparing with a target.
pub const SMOOTHING_WINDOW: usize = 5;
/// Number of trailing evaluations averaged into the final accuracy.
pub const FINAL_WINDOW: usize = 10;

pub fn accuracy(spec: &ModelSpec, params: &ParamVector, samples: &[Sample]) -> f64 {
    let hits = samples
        .iter()
        .filter(|s| predict(spec, params, &s.features) == s.label)
        .count();
    hits as f64 / samples.len() as f64
}

/// Unweighted mean over clients of per-client test accuracy. Clients without
/// test data are skipped.
pub fn evaluate_global(spec: &ModelSpec, params: &ParamVector, dataset: &FederatedDataset) -> f64 {
    let per_client: Vec<Option<f64>> = dataset
        .clients
        .par_iter()
        .map(|c| (!c.test.is_empty()).then(|| accuracy(spec, params, &c.test)))
        .collect();
    let skipped = per_client.iter().filter(|a| a.is_none()).count();
    if skipped > 0 {
        warn!("{skipped} clients have no test data and are left out of the accuracy");
    }
    let scored: Vec<f64> = per_client.into_iter().flatten().collect();
    if scored.is_empty() {
        return f64::NAN;
    }
    scored.iter().sum::<f64>() / scored.len() as f64
}

/// `F(w) = Σ_c ζ_c F_c(w)`, `F_c` the mean loss over client `c`'s training set.
pub fn global_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    dataset: &FederatedDataset,
    zeta: &[f64],
) -> Result<f64> {
    let per_client: Vec<f64> = dataset
        .clients
        .par_iter()
        .map(|c| -> Result<f64> {
            let mut total = 0.0;
            for s in &c.train {
                total += forward_loss(spec, params, s)?;
            }
            Ok(if c.train.is_empty() {
                0.0
            } else {
                total / c.train.len() as f64
            })
        })
        .collect::<Result<_>>()?;
    Ok(zeta.iter().zip(&per_client).map(|(z, f)| z * f).sum())
}

/// Trailing mean over up to `window` points ending at each index.
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window.max(1));
            let w = &values[lo..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

/// First round whose trailing-[`SMOOTHING_WINDOW`] accuracy reaches `target`.
/// `series` holds `(round, accuracy)` pairs on the evaluation grid.
pub fn time_to_accuracy(series: &[(usize, f64)], target: f64) -> Option<usize> {
    let acc: Vec<f64> = series.iter().map(|p| p.1).collect();
    trailing_mean(&acc, SMOOTHING_WINDOW)
        .into_iter()
        .zip(series)
        .find(|(a, _)| *a >= target)
        .map(|(_, p)| p.0)
}

/// Mean of the last [`FINAL_WINDOW`] evaluations.
pub fn final_accuracy(series: &[(usize, f64)]) -> f64 {
    let tail = &series[series.len().saturating_sub(FINAL_WINDOW)..];
    tail.iter().map(|p| p.1).sum::<f64>() / tail.len() as f64
}

/// `T_baseline / T_method`; `None` when either never reached the target.
pub fn speedup(baseline_rounds: Option<usize>, method_rounds: Option<usize>) -> Option<f64> {
    match (baseline_rounds, method_rounds) {
        (Some(b), Some(m)) if m > 0 => Some(b as f64 / m as f64),
        _ => None,
    }
}

/// Pointwise mean of several series on the same evaluation grid.
pub fn mean_series(runs: &[Vec<(usize, f64)>]) -> Vec<(usize, f64)> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(i, &(round, _))| {
            let sum: f64 = runs.iter().map(|r| r[i].1).sum();
            (round, sum / runs.len() as f64)
        })
        .collect()
}
