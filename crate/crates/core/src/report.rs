//! CSV and JSON emitters for experiment reports.
//!
//! Per-round CSV columns: `round,train_loss,test_acc,est_cosine,grad_evals,buffer_util`,
//! followed by `grad_div_slack,weight_div` when probes are on. Rounds that were not
//! evaluated leave `train_loss` and `test_acc` empty; `est_cosine` is empty
//! without probes or for strategies without a gradient estimator.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{ExperimentReport, RoundRecord};
use crate::error::Result;
use crate::metrics::{final_accuracy, mean_series, speedup, time_to_accuracy};
use crate::selection::StrategyKind;

pub const SERIES_COLUMNS: [&str; 6] = [
    "round",
    "train_loss",
    "test_acc",
    "est_cosine",
    "grad_evals",
    "buffer_util",
];
pub const PROBE_COLUMNS: [&str; 2] = ["grad_div_slack", "weight_div"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_series_csv<W: Write>(records: &[RoundRecord], probes: bool, mut out: W) -> Result<()> {
    let mut header: Vec<&str> = SERIES_COLUMNS.to_vec();
    if probes {
        header.extend(PROBE_COLUMNS);
    }
    writeln!(out, "{}", header.join(","))?;
    for r in records {
        write!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            cell(r.train_loss),
            cell(r.test_acc),
            cell(r.est_cosine),
            r.grad_evals,
            r.buffer_util
        )?;
        if probes {
            write!(out, ",{},{}", cell(r.grad_div_slack), cell(r.weight_div))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Per-label stored samples summed over clients, one row per round.
pub fn write_occupancy_csv<W: Write>(records: &[RoundRecord], mut out: W) -> Result<()> {
    let labels = records.first().map_or(0, |r| r.label_occupancy.len());
    let header: Vec<String> = std::iter::once("round".to_string())
        .chain((0..labels).map(|y| format!("label_{y}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for r in records {
        let row: Vec<String> = std::iter::once(r.round.to_string())
            .chain(r.label_occupancy.iter().map(|k| k.to_string()))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Storage plan as `client,label,velocity,quota,gamma`, one row per cell.
pub fn write_plan_csv<W: Write>(report: &ExperimentReport, mut out: W) -> Result<()> {
    writeln!(out, "client,label,velocity,quota,gamma")?;
    let Some(plan) = &report.plan else {
        return Ok(());
    };
    for (c, row) in plan.quotas.iter().enumerate() {
        for (y, &d) in row.iter().enumerate() {
            writeln!(
                out,
                "{c},{y},{},{d},{}",
                report.velocities[c], plan.gamma[y]
            )?;
        }
    }
    Ok(())
}

/// Normalized aggregation weight of every trained participant: `round,client,zeta`.
pub fn write_zeta_csv<W: Write>(records: &[RoundRecord], mut out: W) -> Result<()> {
    writeln!(out, "round,client,zeta")?;
    for r in records {
        for (c, z) in r.trained.iter().zip(&r.weights) {
            writeln!(out, "{},{c},{z}", r.round)?;
        }
    }
    Ok(())
}

/// One row of the JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub seed: u64,
    pub final_acc: f64,
    pub rounds_to_target: Option<usize>,
    pub speedup_vs_rs: Option<f64>,
    pub total_grad_evals: u64,
    pub eval_every: usize,
    pub peak_buffer_bytes: u64,
    pub oracle_grad_evals: u64,
    pub initial_acc: f64,
}

/// Per-(strategy, seed) rows. The target is the reservoir run's final accuracy
/// for the same seed; without a reservoir run targets and speedups are null.
pub fn summarize(reports: &[ExperimentReport]) -> Vec<SummaryRow> {
    let rs_name = StrategyKind::Reservoir.name();
    reports
        .iter()
        .map(|r| {
            let baseline = reports
                .iter()
                .find(|b| b.strategy == rs_name && b.seed == r.seed);
            let (rounds, ratio) = match baseline {
                Some(b) => {
                    let target = b.final_acc;
                    let own = time_to_accuracy(&r.accuracy_series(), target);
                    let base = time_to_accuracy(&b.accuracy_series(), target);
                    (own, speedup(base, own))
                }
                None => (None, None),
            };
            SummaryRow {
                strategy: r.strategy.clone(),
                seed: r.seed,
                final_acc: r.final_acc,
                rounds_to_target: rounds,
                speedup_vs_rs: ratio,
                total_grad_evals: r.total_grad_evals(),
                eval_every: r.eval_every,
                peak_buffer_bytes: r.peak_buffer_bytes,
                oracle_grad_evals: r.oracle_grad_evals(),
                initial_acc: r.initial_acc,
            }
        })
        .collect()
}

/// Seed-averaged figures for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub seeds: usize,
    pub final_acc: f64,
    pub rounds_to_target: Option<usize>,
    pub speedup_vs_rs: Option<f64>,
}

/// Strategy-level summary computed on the seed-mean accuracy series; the
/// target is the reservoir mean series' final accuracy.
pub fn summarize_by_strategy(reports: &[ExperimentReport]) -> Vec<StrategySummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in reports {
        if !names.contains(&r.strategy.as_str()) {
            names.push(&r.strategy);
        }
    }
    let mean_of = |name: &str| {
        let runs: Vec<Vec<(usize, f64)>> = reports
            .iter()
            .filter(|r| r.strategy == name)
            .map(ExperimentReport::accuracy_series)
            .collect();
        (runs.len(), mean_series(&runs))
    };
    let (_, rs) = mean_of(StrategyKind::Reservoir.name());
    let target = (!rs.is_empty()).then(|| final_accuracy(&rs));
    let rs_rounds = target.and_then(|t| time_to_accuracy(&rs, t));
    names
        .into_iter()
        .map(|name| {
            let (seeds, m) = mean_of(name);
            let rounds = target.and_then(|t| time_to_accuracy(&m, t));
            StrategySummary {
                strategy: name.to_string(),
                seeds,
                final_acc: if m.is_empty() {
                    f64::NAN
                } else {
                    final_accuracy(&m)
                },
                rounds_to_target: rounds,
                speedup_vs_rs: speedup(rs_rounds, rounds),
            }
        })
        .collect()
}

pub fn write_summary_json<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, rows).map_err(|e| crate::Error::Invalid(e.to_string()))
}
