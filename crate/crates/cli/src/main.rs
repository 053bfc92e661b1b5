use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedstream_core::config::ExperimentConfig;
use fedstream_core::datagen::save_dataset;
use fedstream_core::engine::{run_experiment, ExperimentReport, Simulation};
use fedstream_core::probes::{HarnessReport, HarnessShape, ProbeHarness};
use fedstream_core::report::{
    summarize, summarize_by_strategy, write_occupancy_csv, write_plan_csv, write_series_csv,
    write_summary_json, write_zeta_csv, StrategySummary,
};
use fedstream_core::StrategyKind;
use log::info;
use rayon::prelude::*;

#[derive(Parser)]
#[command(
    name = "fedstream",
    version,
    about = "Streaming federated learning simulator with on-device data selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Compute and dump the cross-client storage plan.
    Plan {
        #[command(flatten)]
        common: Common,
    },
    /// Run every configured strategy and seed, writing per-round CSVs and a JSON summary.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write the storage plan and per-round client weights (ODE strategies).
        #[arg(long)]
        dump_plan: Option<PathBuf>,
    },
    /// Sweep strategies over all seeds and print a speedup/accuracy table.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the convergence bounds on seeded linear-regression instances.
    Probe {
        /// Number of seeded instances.
        #[arg(long, default_value_t = 100)]
        instances: u64,
        /// Learning rate as a fraction of 1/L.
        #[arg(long, default_value_t = 0.5)]
        lr_scale: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated strategy names, overriding the config.
    #[arg(long)]
    strategies: Option<String>,
    /// Record probe columns.
    #[arg(long)]
    probes: bool,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("override `{kv}` is not key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = &self.strategies {
            cfg.set("strategies", s)?;
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if self.probes {
            cfg.probes = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("fedstream-out"));
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(dir)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot write {}", path.display())
    })?))
}

fn run_all(cfg: &ExperimentConfig) -> Result<Vec<ExperimentReport>> {
    let jobs: Vec<(StrategyKind, u64)> = cfg
        .strategies
        .iter()
        .flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s)))
        .collect();
    jobs.par_iter()
        .map(|&(kind, seed)| -> Result<ExperimentReport> {
            let ds = cfg.dataset_for(seed)?;
            let sc = cfg.sim_config(kind, seed, ds.input_dim, ds.class_count)?;
            info!("running {kind} seed {seed}");
            Ok(run_experiment(&sc, &ds)?)
        })
        .collect()
}

fn write_reports(dir: &Path, reports: &[ExperimentReport], probes: bool) -> Result<()> {
    for r in reports {
        let stem = format!("{}_seed{}", r.strategy, r.seed);
        let mut f = create(&dir.join(format!("{stem}.csv")))?;
        write_series_csv(&r.records, probes, &mut f)?;
        f.flush()?;
        let mut f = create(&dir.join(format!("{stem}_occupancy.csv")))?;
        write_occupancy_csv(&r.records, &mut f)?;
        f.flush()?;
    }
    let mut f = create(&dir.join("summary.json"))?;
    write_summary_json(&summarize(reports), &mut f)?;
    f.flush()?;
    Ok(())
}

fn print_table(rows: &[StrategySummary]) {
    println!(
        "{:<12} {:>6} {:>10} {:>10} {:>8}",
        "strategy", "seeds", "final_acc", "rounds", "speedup"
    );
    for r in rows {
        println!(
            "{:<12} {:>6} {:>10.4} {:>10} {:>8}",
            r.strategy,
            r.seeds,
            r.final_acc,
            r.rounds_to_target
                .map_or("-".to_string(), |v| v.to_string()),
            r.speedup_vs_rs
                .map_or("-".to_string(), |v| format!("{v:.2}x")),
        );
    }
}

fn dump_plan(cfg: &ExperimentConfig, dir: &Path, reports: &[ExperimentReport]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    for r in reports.iter().filter(|r| r.plan.is_some()) {
        let stem = format!("{}_seed{}", r.strategy, r.seed);
        let mut f = create(&dir.join(format!("{stem}_plan.csv")))?;
        write_plan_csv(r, &mut f)?;
        f.flush()?;
        let mut f = create(&dir.join(format!("{stem}_zeta.csv")))?;
        write_zeta_csv(&r.records, &mut f)?;
        f.flush()?;
    }
    if !reports.iter().any(|r| r.plan.is_some()) && cfg.strategies.iter().any(|k| k.is_ode()) {
        log::warn!("coordination is off; no plan to dump");
    }
    Ok(())
}

fn probe(instances: u64, lr_scale: f64, out: Option<&Path>) -> Result<()> {
    let shape = HarnessShape {
        lr_scale,
        ..HarnessShape::default()
    };
    let reports: Vec<HarnessReport> = (0..instances)
        .into_par_iter()
        .map(|seed| ProbeHarness::linreg(seed, shape.clone())?.run())
        .collect::<fedstream_core::Result<_>>()?;
    let min = |f: fn(&HarnessReport) -> f64| reports.iter().map(f).fold(f64::INFINITY, f64::min);
    let t1 = min(|r| HarnessReport::min_slack(&r.loss_decrease));
    let t2 = min(|r| HarnessReport::min_slack(&r.weight_divergence));
    let l1 = min(|r| HarnessReport::min_slack(&r.grad_divergence));
    println!("instances {instances}");
    println!("loss-reduction bound min slack {t1:e}");
    println!("weight-divergence bound min slack {t2:e}");
    println!("gradient-divergence bound min slack {l1:e}");
    if let Some(path) = out {
        let f = create(path)?;
        serde_json::to_writer_pretty(f, &reports)?;
    }
    if t1.min(t2).min(l1) < -fedstream_core::probes::SLACK_TOLERANCE {
        bail!("a bound was violated");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(n) = std::env::var("FEDSTREAM_THREADS") {
        let n: usize = n
            .parse()
            .context("FEDSTREAM_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { common } => {
            let cfg = common.load()?;
            let seed = cfg.seeds[0];
            let ds = cfg.dataset_for(seed)?;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from(format!("synthetic_seed{seed}.fedds")));
            save_dataset(&ds, &out).with_context(|| format!("cannot write {}", out.display()))?;
            println!("wrote {} ({} clients)", out.display(), ds.client_count());
        }
        Command::Plan { common } => {
            let cfg = common.load()?;
            let seed = cfg.seeds[0];
            let kind = cfg
                .strategies
                .iter()
                .copied()
                .find(|k| k.is_ode())
                .unwrap_or(StrategyKind::OdeExact);
            let ds = cfg.dataset_for(seed)?;
            let mut sc = cfg.sim_config(kind, seed, ds.input_dim, ds.class_count)?;
            sc.coordinate = true;
            let sim = Simulation::new(sc, &ds)?;
            let report = ExperimentReport {
                strategy: kind.name().into(),
                seed,
                eval_every: cfg.eval_every,
                initial_acc: f64::NAN,
                initial_loss: f64::NAN,
                records: Vec::new(),
                final_acc: f64::NAN,
                peak_buffer_bytes: 0,
                plan: sim.plan().cloned(),
                velocities: sim.velocities().to_vec(),
            };
            match &common.out {
                Some(p) => {
                    let mut f = create(p)?;
                    write_plan_csv(&report, &mut f)?;
                    f.flush()?;
                }
                None => write_plan_csv(&report, std::io::stdout().lock())?,
            }
        }
        Command::Run {
            common,
            dump_plan: plan_dir,
        } => {
            let cfg = common.load()?;
            let dir = common.out_dir()?;
            let reports = run_all(&cfg)?;
            write_reports(&dir, &reports, cfg.probes)?;
            if let Some(p) = plan_dir {
                dump_plan(&cfg, &p, &reports)?;
            }
            print_table(&summarize_by_strategy(&reports));
        }
        Command::Compare { common } => {
            let mut cfg = common.load()?;
            if !cfg.strategies.contains(&StrategyKind::Reservoir) {
                cfg.strategies.insert(0, StrategyKind::Reservoir);
            }
            let dir = common.out_dir()?;
            let reports = run_all(&cfg)?;
            write_reports(&dir, &reports, cfg.probes)?;
            let table = summarize_by_strategy(&reports);
            let mut f = create(&dir.join("table.csv"))?;
            writeln!(f, "strategy,seeds,final_acc,rounds_to_target,speedup_vs_rs")?;
            for r in &table {
                writeln!(
                    f,
                    "{},{},{},{},{}",
                    r.strategy,
                    r.seeds,
                    r.final_acc,
                    r.rounds_to_target
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                    r.speedup_vs_rs.map(|v| v.to_string()).unwrap_or_default()
                )?;
            }
            f.flush()?;
            print_table(&table);
        }
        Command::Probe {
            instances,
            lr_scale,
            out,
        } => probe(instances, lr_scale, out.as_deref())?,
    }
    Ok(())
}
