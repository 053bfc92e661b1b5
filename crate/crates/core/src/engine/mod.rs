//! Synchronous Fed-Avg with partial participation over streaming clients.
//!
//! Each round: the server samples participants, which receive the current
//! global model (and gradient estimate) and hand back their local estimator.
//! Every client then streams the round's arrivals through its selection
//! strategy. Participants train on their buffers and the server averages the
//! resulting models.

mod config;
mod train;

pub use config::{Hyperparams, SimConfig};
pub use train::{aggregate, local_train, step_direction, LocalOutcome};

use std::collections::BTreeMap;
use std::sync::Arc;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coordination::{
    client_weight, default_n_client, greedy_assign, CoordinationPlan, VelocityMatrix,
};
use crate::datagen::{FederatedDataset, StreamSchedule};
use crate::error::Result;
use crate::estimators::{exact_global_gradient, mean_gradient, GlobalEstimator, LocalEstimator};
use crate::metrics::{evaluate_global, final_accuracy, global_loss};
use crate::numkernel::{GradVector, GradWindow, ModelSpec, ParamVector, Sample};
use crate::rng::{tags, StreamRng};
use crate::selection::{
    evaluate_sample, score_sample, NoiseWindow, StorageBuffer, Strategy, StrategyKind,
    ValuationContext,
};

/// One row of the per-round series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub lr: f64,
    pub participants: Vec<usize>,
    /// Participants that trained (non-empty buffer) and their normalized
    /// aggregation weights.
    pub trained: Vec<usize>,
    pub weights: Vec<f64>,
    pub train_loss: Option<f64>,
    pub test_acc: Option<f64>,
    /// Cumulative gradient evaluations (streaming valuation plus training).
    pub grad_evals: u64,
    pub forward_evals: u64,
    /// Exact global gradients computed for `ode_exact`, in per-sample units.
    pub oracle_grad_evals: u64,
    /// Mean stored samples per client over the configured capacity.
    pub buffer_util: f64,
    pub stored_samples: usize,
    pub label_occupancy: Vec<usize>,
    pub est_cosine: Option<f64>,
    pub grad_div_slack: Option<f64>,
    pub weight_div: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    grad: u64,
    forward: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.grad += o.grad;
        self.forward += o.forward;
    }
}

fn count_for(kind: StrategyKind) -> Counts {
    Counts {
        grad: u64::from(kind.needs_gradient()),
        forward: u64::from(kind.needs_loss()),
    }
}

#[derive(Debug, Clone)]
struct ClientState {
    buffer: StorageBuffer,
    estimator: Option<LocalEstimator>,
    snapshot: Arc<ParamVector>,
    reference: Option<Arc<GradVector>>,
    noise: NoiseWindow,
    seen: Vec<Sample>,
}

struct StreamCtx<'a> {
    spec: &'a ModelSpec,
    strategy: Strategy,
    exact_ref: Option<&'a GradVector>,
    keep_seen: bool,
}

impl ClientState {
    fn reference<'a>(&'a self, ctx: &'a StreamCtx<'_>) -> Option<&'a GradVector> {
        match ctx.strategy.kind {
            StrategyKind::OdeExact => ctx.exact_ref,
            StrategyKind::OdeEst => self.reference.as_deref(),
            _ => None,
        }
    }

    fn stream(&mut self, arrivals: Vec<Sample>, ctx: &StreamCtx<'_>) -> Result<Counts> {
        let kind = ctx.strategy.kind;
        let mut counts = Counts::default();
        for s in arrivals {
            let vctx = ValuationContext {
                spec: ctx.spec,
                model: &self.snapshot,
                reference: self.reference(ctx),
            };
            let v = evaluate_sample(ctx.strategy, &vctx, &s)?;
            counts += count_for(kind);
            if let (Some(est), Some(g)) = (self.estimator.as_mut(), v.gradient.as_ref()) {
                est.local_update(g)?;
            }
            if ctx.keep_seen {
                self.seen.push(s.clone());
            }
            if kind.has_noise_filter() {
                if !self.noise.admit(kind, v.score) {
                    continue;
                }
            }
            let label = s.label;
            self.buffer.offer(s, v.score, Some(label))?;
        }
        Ok(counts)
    }

    fn rescore(&mut self, ctx: &StreamCtx<'_>) -> Result<Counts> {
        let kind = ctx.strategy.kind;
        if !kind.is_priority() {
            return Ok(Counts::default());
        }
        let mut n = 0;
        let snapshot = self.snapshot.clone();
        let reference = self.reference(ctx).cloned();
        let vctx = ValuationContext {
            spec: ctx.spec,
            model: &snapshot,
            reference: reference.as_ref(),
        };
        self.buffer.rescore(|s| {
            n += 1;
            score_sample(ctx.strategy, &vctx, s)
        })?;
        let one = count_for(kind);
        Ok(Counts {
            grad: one.grad * n,
            forward: one.forward * n,
        })
    }
}

/// A running simulation over a borrowed dataset.
pub struct Simulation<'a> {
    cfg: SimConfig,
    dataset: &'a FederatedDataset,
    schedule: StreamSchedule,
    plan: Option<CoordinationPlan>,
    velocities: Vec<usize>,
    velocity_share: Vec<f64>,
    global: Arc<ParamVector>,
    estimator: Option<GlobalEstimator>,
    clients: Vec<ClientState>,
    server_rng: StreamRng,
    round: usize,
    counts: Counts,
    oracle_grad_evals: u64,
    twin: Option<ParamVector>,
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: SimConfig, dataset: &'a FederatedDataset) -> Result<Self> {
        cfg.validate()?;
        dataset.validate()?;
        if dataset.input_dim != cfg.spec.input_dim {
            return Err(crate::Error::DimensionMismatch {
                expected: cfg.spec.input_dim,
                actual: dataset.input_dim,
            });
        }
        let seed = cfg.hyper.seed;
        let root = StreamRng::new(seed);
        let schedule = StreamSchedule::new(dataset, cfg.shuffle_period, seed)?;
        let velocities = schedule.velocities().to_vec();
        let velocity_share = GlobalEstimator::velocity_shares(&velocities);
        let n = dataset.client_count();

        let plan = if cfg.uses_plan() {
            let v = VelocityMatrix::from_dataset(dataset, &velocities)?;
            let n_label = vec![cfg.n_label; dataset.class_count];
            let n_client = vec![
                cfg.n_client
                    .unwrap_or_else(|| default_n_client(&n_label, n));
                n
            ];
            Some(greedy_assign(
                &v,
                &vec![cfg.buffer_size; n],
                &n_label,
                &n_client,
            )?)
        } else {
            None
        };

        let global = Arc::new(cfg.spec.init(&mut root.substream(tags::MODEL_INIT)));
        let kind = cfg.strategy.kind;
        let est_len = cfg.spec.window_len(cfg.strategy.window)?;
        let estimator = kind
            .is_ode()
            .then(|| GlobalEstimator::new(est_len, cfg.strategy.window, velocity_share.clone()));
        let start_ref = estimator.as_ref().map(|e| Arc::new(e.g_hat.clone()));
        let clients = (0..n)
            .map(|c| {
                let buffer = match &plan {
                    Some(p) => p.buffer(c),
                    None => StorageBuffer::for_strategy(
                        kind,
                        cfg.buffer_size,
                        root.substream2(tags::CLIENT, c as u64),
                    ),
                };
                ClientState {
                    buffer,
                    estimator: kind
                        .is_ode()
                        .then(|| LocalEstimator::new(est_len, cfg.strategy.window)),
                    snapshot: global.clone(),
                    reference: start_ref.clone(),
                    noise: NoiseWindow::new(),
                    seen: Vec::new(),
                }
            })
            .collect();
        let twin = cfg.cl_twin.then(|| (*global).clone());
        Ok(Self {
            server_rng: root.substream(tags::SERVER),
            cfg,
            dataset,
            schedule,
            plan,
            velocities,
            velocity_share,
            global,
            estimator,
            clients,
            round: 0,
            counts: Counts::default(),
            oracle_grad_evals: 0,
            twin,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn plan(&self) -> Option<&CoordinationPlan> {
        self.plan.as_ref()
    }

    pub fn velocities(&self) -> &[usize] {
        &self.velocities
    }

    pub fn velocity_share(&self) -> &[f64] {
        &self.velocity_share
    }

    pub fn global_estimate(&self) -> Option<&GradVector> {
        self.estimator.as_ref().map(|e| &e.g_hat)
    }

    pub fn global_estimator(&self) -> Option<&GlobalEstimator> {
        self.estimator.as_ref()
    }

    pub fn buffer(&self, client: usize) -> &StorageBuffer {
        &self.clients[client].buffer
    }

    pub fn local_estimator(&self, client: usize) -> Option<&LocalEstimator> {
        self.clients[client].estimator.as_ref()
    }

    pub fn twin(&self) -> Option<&ParamVector> {
        self.twin.as_ref()
    }

    pub fn test_accuracy(&self) -> f64 {
        evaluate_global(&self.cfg.spec, &self.global, self.dataset)
    }

    pub fn train_loss(&self) -> Result<f64> {
        global_loss(
            &self.cfg.spec,
            &self.global,
            self.dataset,
            &self.velocity_share,
        )
    }

    fn sample_participants(&self, round: usize) -> Vec<usize> {
        let n = self.dataset.client_count();
        let k = self.cfg.hyper.participants_per_round(n);
        let mut p = self.server_rng.substream(round as u64).sample_indices(n, k);
        p.sort_unstable();
        p
    }

    fn exact_gradient(&self, params: &ParamVector, window: GradWindow) -> Result<GradVector> {
        exact_global_gradient(
            &self.cfg.spec,
            self.dataset,
            params,
            &self.velocity_share,
            window,
        )
    }

    /// Advance one round.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let t = self.round + 1;
        let spec = self.cfg.spec.clone();
        let strategy = self.cfg.strategy;
        let kind = strategy.kind;
        let lr = self.cfg.hyper.lr_at(t);
        let participants = self.sample_participants(t);
        let prev_global = self.global.clone();

        let exact_ref = if kind == StrategyKind::OdeExact {
            self.oracle_grad_evals += self.dataset.train_counts().iter().sum::<usize>() as u64;
            Some(self.exact_gradient(&prev_global, strategy.window)?)
        } else {
            None
        };
        let ctx = StreamCtx {
            spec: &spec,
            strategy,
            exact_ref: exact_ref.as_ref(),
            keep_seen: self.twin.is_some(),
        };

        // Participants receive the model, hand back their estimators.
        let mut pending: BTreeMap<usize, GradVector> = BTreeMap::new();
        let shared_ref = self.estimator.as_ref().map(|e| Arc::new(e.g_hat.clone()));
        for &c in &participants {
            let client = &mut self.clients[c];
            if let Some(est) = client.estimator.as_mut() {
                pending.insert(c, est.local_reset(t));
            }
            client.snapshot = prev_global.clone();
            client.reference = shared_ref.clone();
            if self.cfg.rescore {
                let n = client.rescore(&ctx)?;
                self.counts += n;
            }
        }

        // Every client streams this round's arrivals.
        let arrivals: Vec<Vec<Sample>> = (0..self.clients.len())
            .map(|c| self.schedule.next_round_samples(self.dataset, c, t))
            .collect::<Result<_>>()?;
        let streamed: Vec<Counts> = self
            .clients
            .par_iter_mut()
            .zip(arrivals)
            .map(|(client, a)| client.stream(a, &ctx))
            .collect::<Result<_>>()?;
        for n in streamed {
            self.counts += n;
        }

        // Participants train on their buffers.
        let gamma = self.plan.as_ref().map(|p| p.gamma.clone());
        let hyper = self.cfg.hyper.clone();
        let outcomes: Vec<Option<LocalOutcome>> = participants
            .par_iter()
            .map(|&c| {
                let client = &self.clients[c];
                if client.buffer.is_empty() {
                    return Ok(None);
                }
                let samples = client.buffer.samples();
                local_train(
                    &spec,
                    &prev_global,
                    &samples,
                    gamma.as_deref(),
                    lr,
                    hyper.local_epochs,
                    hyper.batch_size,
                    false,
                )
                .map(Some)
            })
            .collect::<Result<_>>()?;

        let mut trained = Vec::new();
        let mut models = Vec::new();
        let mut raw_weights = Vec::new();
        for (&c, out) in participants.iter().zip(outcomes) {
            match out {
                Some(o) => {
                    self.counts.grad += o.grad_evals;
                    raw_weights.push(match &gamma {
                        Some(g) => client_weight(&self.clients[c].buffer, g),
                        None => self.velocities[c] as f64,
                    });
                    trained.push(c);
                    models.push(o.params);
                }
                None => {
                    warn!("round {t}: client {c} has an empty buffer and sits the round out");
                    pending.remove(&c);
                }
            }
        }
        let total_w: f64 = raw_weights.iter().sum();
        let weights: Vec<f64> = raw_weights.iter().map(|w| w / total_w).collect();
        if !models.is_empty() {
            let refs: Vec<&ParamVector> = models.iter().collect();
            self.global = Arc::new(aggregate(&refs, &raw_weights)?);
        }
        if let Some(est) = self.estimator.as_mut() {
            est.global_update(&trained, &pending)?;
        }

        if let Some(twin) = self.twin.as_mut() {
            advance_twin(
                &spec,
                twin,
                &self.clients,
                &self.velocity_share,
                lr,
                hyper.local_epochs,
            )?;
        }

        self.round = t;
        let evaluate = t % self.cfg.eval_every == 0 || t == self.cfg.hyper.rounds;
        let (train_loss, test_acc) = if evaluate {
            (Some(self.train_loss()?), Some(self.test_accuracy()))
        } else {
            (None, None)
        };

        let mut rec = RoundRecord {
            round: t,
            lr,
            participants,
            trained,
            weights,
            train_loss,
            test_acc,
            grad_evals: self.counts.grad,
            forward_evals: self.counts.forward,
            oracle_grad_evals: self.oracle_grad_evals,
            buffer_util: 0.0,
            stored_samples: 0,
            label_occupancy: vec![0; self.dataset.class_count],
            est_cosine: None,
            grad_div_slack: None,
            weight_div: None,
        };
        for client in &self.clients {
            rec.stored_samples += client.buffer.len();
            for (o, k) in rec
                .label_occupancy
                .iter_mut()
                .zip(client.buffer.label_counts(self.dataset.class_count))
            {
                *o += k;
            }
        }
        rec.buffer_util =
            rec.stored_samples as f64 / (self.clients.len() * self.cfg.buffer_size) as f64;
        if self.cfg.probes {
            self.probe(&mut rec, &prev_global)?;
        }
        debug!(
            "round {t}: {} participants, acc {:?}",
            rec.participants.len(),
            rec.test_acc
        );
        Ok(rec)
    }

    /// Diagnostics that read the state without touching the trajectory.
    fn probe(&self, rec: &mut RoundRecord, prev_global: &ParamVector) -> Result<()> {
        let spec = &self.cfg.spec;
        if let Some(est) = &self.estimator {
            let exact = self.exact_gradient(&self.global, self.cfg.strategy.window)?;
            rec.est_cosine = Some(est.g_hat.cosine(&exact)?);
        }
        let grad_f = self.exact_gradient(prev_global, GradWindow::Full)?;
        let mut slack: Option<f64> = None;
        for &c in &rec.trained {
            let samples = self.clients[c].buffer.samples();
            let owned: Vec<Sample> = samples.into_iter().cloned().collect();
            let r = crate::probes::grad_divergence_probe(spec, prev_global, &owned, &grad_f)?;
            slack = Some(slack.map_or(r.slack(), |s: f64| s.min(r.slack())));
        }
        rec.grad_div_slack = slack;
        if let Some(twin) = &self.twin {
            rec.weight_div = Some(self.global.distance(twin));
        }
        Ok(())
    }
}

/// `m` full-gradient steps of the centralized twin on everything streamed so far.
fn advance_twin(
    spec: &ModelSpec,
    twin: &mut ParamVector,
    clients: &[ClientState],
    share: &[f64],
    lr: f64,
    steps: usize,
) -> Result<()> {
    let active: Vec<usize> = (0..clients.len())
        .filter(|&c| !clients[c].seen.is_empty())
        .collect();
    let total: f64 = active.iter().map(|&c| share[c]).sum();
    if active.is_empty() {
        return Ok(());
    }
    for _ in 0..steps {
        let grads: Vec<GradVector> = active
            .par_iter()
            .map(|&c| mean_gradient(spec, twin, &clients[c].seen, GradWindow::Full))
            .collect::<Result<_>>()?;
        let mut d = GradVector::zeros(twin.len(), GradWindow::Full);
        for (&c, g) in active.iter().zip(&grads) {
            d.add_scaled(share[c] / total, g)?;
        }
        twin.step(lr, &d);
    }
    Ok(())
}

/// Full result of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub strategy: String,
    pub seed: u64,
    pub eval_every: usize,
    pub initial_acc: f64,
    pub initial_loss: f64,
    pub records: Vec<RoundRecord>,
    pub final_acc: f64,
    pub peak_buffer_bytes: u64,
    pub plan: Option<CoordinationPlan>,
    pub velocities: Vec<usize>,
}

impl ExperimentReport {
    /// `(round, accuracy)` at every evaluated round.
    pub fn accuracy_series(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.test_acc.map(|a| (r.round, a)))
            .collect()
    }

    pub fn total_grad_evals(&self) -> u64 {
        self.records.last().map_or(0, |r| r.grad_evals)
    }

    pub fn oracle_grad_evals(&self) -> u64 {
        self.records.last().map_or(0, |r| r.oracle_grad_evals)
    }
}

/// Bytes one stored sample occupies: features plus label and score.
pub fn sample_bytes(input_dim: usize) -> u64 {
    (8 * input_dim + 16) as u64
}

/// Run `cfg.hyper.rounds` rounds.
pub fn run_experiment(cfg: &SimConfig, dataset: &FederatedDataset) -> Result<ExperimentReport> {
    let mut sim = Simulation::new(cfg.clone(), dataset)?;
    let initial_acc = sim.test_accuracy();
    let initial_loss = sim.train_loss()?;
    let mut records = Vec::with_capacity(cfg.hyper.rounds);
    let mut peak = 0usize;
    for _ in 0..cfg.hyper.rounds {
        let r = sim.step()?;
        peak = peak.max(r.stored_samples);
        records.push(r);
    }
    let mut report = ExperimentReport {
        strategy: cfg.strategy.kind.name().to_string(),
        seed: cfg.hyper.seed,
        eval_every: cfg.eval_every,
        initial_acc,
        initial_loss,
        records,
        final_acc: initial_acc,
        peak_buffer_bytes: peak as u64 * sample_bytes(dataset.input_dim),
        plan: sim.plan.clone(),
        velocities: sim.velocities.clone(),
    };
    let series = report.accuracy_series();
    if !series.is_empty() {
        report.final_acc = final_accuracy(&series);
    }
    Ok(report)
}
