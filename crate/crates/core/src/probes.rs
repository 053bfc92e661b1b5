//! Numeric checks of the convergence bounds and valuation diagnostics.
//!
//! Bound probes evaluate both sides of an inequality on concrete trajectories.
//! [`BoundRecord::slack`] is the margin by which the inequality holds, so a
//! negative value is a violation whichever direction the bound points.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::engine::step_direction;
use crate::error::{Error, Result};
use crate::estimators::mean_gradient;
use crate::numkernel::{
    dot, forward_loss, loss_and_gradient, GradVector, GradWindow, ModelKind, ModelSpec,
    ParamVector, Sample,
};
use crate::rng::{tags, StreamRng};

/// Tolerance on bound slack used throughout.
pub const SLACK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundSense {
    /// `lhs >= rhs`
    AtLeast,
    /// `lhs <= rhs`
    AtMost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub round: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub sense: BoundSense,
}

impl BoundRecord {
    pub fn slack(&self) -> f64 {
        match self.sense {
            BoundSense::AtLeast => self.lhs - self.rhs,
            BoundSense::AtMost => self.rhs - self.lhs,
        }
    }

    pub fn holds(&self) -> bool {
        self.slack() >= -SLACK_TOLERANCE
    }
}

/// `F(w) = Σ_c ζ_c · mean_{x ∈ D_c} l(w, x)` over fixed per-client data.
#[derive(Debug, Clone)]
pub struct Objective {
    pub clients: Vec<Vec<Sample>>,
    pub zeta: Vec<f64>,
}

impl Objective {
    pub fn loss(&self, spec: &ModelSpec, w: &ParamVector) -> Result<f64> {
        let mut f = 0.0;
        for (z, data) in self.zeta.iter().zip(&self.clients) {
            let mut s = 0.0;
            for x in data {
                s += forward_loss(spec, w, x)?;
            }
            f += z * s / data.len() as f64;
        }
        Ok(f)
    }

    pub fn gradient(&self, spec: &ModelSpec, w: &ParamVector) -> Result<GradVector> {
        let mut g = GradVector::zeros(w.len(), GradWindow::Full);
        for (z, data) in self.zeta.iter().zip(&self.clients) {
            g.add_scaled(*z, &mean_gradient(spec, w, data, GradWindow::Full)?)?;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Derivation {
    /// Largest Hessian eigenvalue of a quadratic loss; exact.
    ExactQuadratic,
    /// Softmax cross-entropy Hessian bounded by half the input second moment.
    SoftmaxBound,
}

/// Lipschitz constant of `∇F` with its per-client parts, `L = Σ ζ_c L_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessCert {
    pub l: f64,
    pub per_client: Vec<f64>,
    pub derivation: Derivation,
}

/// `λ_max((1/N) Σ x̃ x̃ᵀ)` with `x̃ = [x, 1]`.
fn second_moment_top_eigenvalue(data: &[Sample]) -> f64 {
    let d = data.first().map_or(0, |s| s.features.len()) + 1;
    let mut m = DMatrix::<f64>::zeros(d, d);
    for s in data {
        let x: Vec<f64> = s
            .features
            .iter()
            .copied()
            .chain(std::iter::once(1.0))
            .collect();
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] += x[i] * x[j];
            }
        }
    }
    m /= data.len().max(1) as f64;
    SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

impl SmoothnessCert {
    /// Exact constants for the squared-error linear model.
    pub fn linreg(spec: &ModelSpec, objective: &Objective) -> Result<Self> {
        if spec.kind != ModelKind::LinReg {
            return Err(Error::ProbeRefused(format!(
                "exact smoothness is only available for linreg, not {:?}",
                spec.kind
            )));
        }
        Ok(Self::from_parts(objective, Derivation::ExactQuadratic, 1.0))
    }

    /// Upper bound for multinomial logistic regression.
    pub fn logreg_bound(spec: &ModelSpec, objective: &Objective) -> Result<Self> {
        if spec.kind != ModelKind::LogReg {
            return Err(Error::ProbeRefused(
                "the softmax bound covers logreg only".into(),
            ));
        }
        Ok(Self::from_parts(objective, Derivation::SoftmaxBound, 0.5))
    }

    fn from_parts(objective: &Objective, derivation: Derivation, factor: f64) -> Self {
        let per_client: Vec<f64> = objective
            .clients
            .iter()
            .map(|d| factor * second_moment_top_eigenvalue(d))
            .collect();
        let l = per_client
            .iter()
            .zip(&objective.zeta)
            .map(|(l, z)| l * z)
            .sum();
        Self {
            l,
            per_client,
            derivation,
        }
    }
}

/// One participant's contribution to a round: its aggregation weight, the
/// stored samples it trained on and the model before each local step.
#[derive(Debug, Clone)]
pub struct ClientSteps {
    pub zeta: f64,
    pub buffer: Vec<Sample>,
    pub states: Vec<ParamVector>,
}

/// Loss-reduction bound for one round of full-batch local steps:
/// `F(w^{t-1}) - F(w^t) >= Σ_c Σ_i Σ_x [-α_c ‖∇l‖² + β_c ⟨∇l, ∇F(w^{t-1})⟩]`
/// with `α_c = L/(2ζ_c) (η/|B_c|)²` and `β_c = ζ_c η/|B_c|`.
#[allow(clippy::too_many_arguments)]
pub fn loss_decrease_probe(
    round: usize,
    spec: &ModelSpec,
    cert: &SmoothnessCert,
    objective: &Objective,
    w_prev: &ParamVector,
    w_next: &ParamVector,
    steps: &[ClientSteps],
    lr: f64,
) -> Result<BoundRecord> {
    if cert.derivation != Derivation::ExactQuadratic {
        return Err(Error::ProbeRefused(
            "the loss-reduction bound needs an exact smoothness constant".into(),
        ));
    }
    let lhs = objective.loss(spec, w_prev)? - objective.loss(spec, w_next)?;
    let grad_f = objective.gradient(spec, w_prev)?;
    let mut rhs = 0.0;
    for cs in steps {
        let b = cs.buffer.len() as f64;
        let alpha = cert.l / (2.0 * cs.zeta) * (lr / b).powi(2);
        let beta = cs.zeta * lr / b;
        for w in &cs.states {
            for x in &cs.buffer {
                let (_, g) = loss_and_gradient(spec, w, x, GradWindow::Full)?;
                rhs += -alpha * g.norm_sq() + beta * dot(&g, &grad_f)?;
            }
        }
    }
    Ok(BoundRecord {
        round,
        lhs,
        rhs,
        sense: BoundSense::AtLeast,
    })
}

/// `G_c(w) <= √n · √(δ + mean_x[‖∇l‖² - 2⟨∇l, ∇F⟩])`, `δ = ‖∇F‖²`, `n` the
/// parameter count.
pub fn grad_divergence_probe(
    spec: &ModelSpec,
    w: &ParamVector,
    buffer: &[Sample],
    grad_f: &GradVector,
) -> Result<BoundRecord> {
    if buffer.is_empty() {
        return Err(Error::ProbeRefused("empty buffer".into()));
    }
    let window = grad_f.window;
    let mut mean = GradVector::zeros(grad_f.len(), window);
    let mut inner = 0.0;
    for x in buffer {
        let (_, g) = loss_and_gradient(spec, w, x, window)?;
        inner += g.norm_sq() - 2.0 * dot(&g, grad_f)?;
        mean.add_scaled(1.0, &g)?;
    }
    let b = buffer.len() as f64;
    mean.scale(1.0 / b);
    mean.add_scaled(-1.0, grad_f)?;
    let n = grad_f.len() as f64;
    let rhs = n.sqrt() * (grad_f.norm_sq() + inner / b).max(0.0).sqrt();
    Ok(BoundRecord {
        round: 0,
        lhs: mean.norm(),
        rhs,
        sense: BoundSense::AtMost,
    })
}

/// `‖∇F̃_c(w) - ∇F(w)‖` with `∇F̃_c` the local step direction.
pub fn gradient_divergence(
    spec: &ModelSpec,
    objective: &Objective,
    w: &ParamVector,
    buffer: &[Sample],
) -> Result<f64> {
    let refs: Vec<&Sample> = buffer.iter().collect();
    let mut d = step_direction(spec, w, &refs, None)?;
    d.add_scaled(-1.0, &objective.gradient(spec, w)?)?;
    Ok(d.norm())
}

/// Weight-divergence recursion between the federated model and a centralized
/// twin running `m` gradient steps on `F` per round:
/// `‖w_fed^t - w_cen^{mt}‖ <= (1+ηL)^m ‖w_fed^{t-1} - w_cen^{m(t-1)}‖
///   + Σ_c ζ_c η Σ_i (1+ηL)^{m-1-i} G_c(w_c^{t,i})`.
#[allow(clippy::too_many_arguments)]
pub fn weight_divergence_probe(
    round: usize,
    spec: &ModelSpec,
    cert: &SmoothnessCert,
    objective: &Objective,
    prev_divergence: f64,
    w_fed: &ParamVector,
    w_cen: &ParamVector,
    steps: &[ClientSteps],
    lr: f64,
    local_steps: usize,
) -> Result<BoundRecord> {
    let growth = 1.0 + lr * cert.l;
    let mut rhs = growth.powi(local_steps as i32) * prev_divergence;
    for cs in steps {
        if cs.states.len() != local_steps {
            return Err(Error::ProbeRefused(format!(
                "expected {local_steps} recorded local states, got {}",
                cs.states.len()
            )));
        }
        let mut inner = 0.0;
        for (i, w) in cs.states.iter().enumerate() {
            inner += growth.powi((local_steps - 1 - i) as i32)
                * gradient_divergence(spec, objective, w, &cs.buffer)?;
        }
        rhs += cs.zeta * lr * inner;
    }
    Ok(BoundRecord {
        round,
        lhs: w_fed.distance(w_cen),
        rhs,
        sense: BoundSense::AtMost,
    })
}

/// Shape of a [`ProbeHarness`] instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessShape {
    pub clients: usize,
    pub input_dim: usize,
    pub samples_per_client: usize,
    pub buffer: usize,
    pub local_steps: usize,
    pub rounds: usize,
    /// Learning rate as a fraction of `1/L`.
    pub lr_scale: f64,
}

impl Default for HarnessShape {
    fn default() -> Self {
        Self {
            clients: 5,
            input_dim: 4,
            samples_per_client: 30,
            buffer: 6,
            local_steps: 2,
            rounds: 20,
            lr_scale: 0.5,
        }
    }
}

/// Bound records collected over one harness run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HarnessReport {
    pub loss_decrease: Vec<BoundRecord>,
    pub weight_divergence: Vec<BoundRecord>,
    pub grad_divergence: Vec<BoundRecord>,
    pub smoothness: f64,
    pub lr: f64,
}

impl HarnessReport {
    pub fn min_slack(records: &[BoundRecord]) -> f64 {
        records
            .iter()
            .map(BoundRecord::slack)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Small non-iid linear-regression federation with full participation and
/// plain full-batch local steps, instrumented for the bound probes.
#[derive(Debug, Clone)]
pub struct ProbeHarness {
    pub spec: ModelSpec,
    pub shape: HarnessShape,
    pub objective: Objective,
    pub cert: SmoothnessCert,
    seed: u64,
}

impl ProbeHarness {
    pub fn linreg(seed: u64, shape: HarnessShape) -> Result<Self> {
        if shape.clients == 0
            || shape.buffer == 0
            || shape.local_steps == 0
            || shape.buffer > shape.samples_per_client
        {
            return Err(Error::config("harness needs clients, a non-empty buffer no larger than the data, and local steps"));
        }
        let spec = ModelSpec::linreg(shape.input_dim);
        let mut rng = StreamRng::new(seed).substream(tags::PROBE);
        let theta: Vec<f64> = (0..=shape.input_dim).map(|_| rng.normal()).collect();
        let clients: Vec<Vec<Sample>> = (0..shape.clients)
            .map(|_| {
                let shift: Vec<f64> = (0..shape.input_dim).map(|_| rng.normal()).collect();
                let bias = rng.normal();
                (0..shape.samples_per_client)
                    .map(|_| {
                        let x: Vec<f64> = shift.iter().map(|m| m + rng.normal()).collect();
                        let t = x.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>()
                            + theta[shape.input_dim]
                            + bias
                            + 0.1 * rng.normal();
                        Sample::regression(x, t)
                    })
                    .collect()
            })
            .collect();
        let zeta = vec![1.0 / shape.clients as f64; shape.clients];
        let objective = Objective { clients, zeta };
        let cert = SmoothnessCert::linreg(&spec, &objective)?;
        Ok(Self {
            spec,
            shape,
            objective,
            cert,
            seed,
        })
    }

    pub fn lr(&self) -> f64 {
        self.shape.lr_scale / self.cert.l
    }

    /// Run every round, probing each bound along the way.
    pub fn run(&self) -> Result<HarnessReport> {
        let spec = &self.spec;
        let lr = self.lr();
        let m = self.shape.local_steps;
        let mut rng = StreamRng::new(self.seed).substream2(tags::PROBE, 1);
        let mut w_fed = spec.zeros();
        let mut w_cen = spec.zeros();
        let mut report = HarnessReport {
            smoothness: self.cert.l,
            lr,
            ..Default::default()
        };
        for t in 1..=self.shape.rounds {
            let prev_div = w_fed.distance(&w_cen);
            let mut steps = Vec::with_capacity(self.shape.clients);
            let mut next = vec![0.0; w_fed.len()];
            for (c, data) in self.objective.clients.iter().enumerate() {
                let buffer: Vec<Sample> = rng
                    .sample_indices(data.len(), self.shape.buffer)
                    .into_iter()
                    .map(|i| data[i].clone())
                    .collect();
                let refs: Vec<&Sample> = buffer.iter().collect();
                let mut w = w_fed.clone();
                let mut states = Vec::with_capacity(m);
                for _ in 0..m {
                    states.push(w.clone());
                    let grad_f = self.objective.gradient(spec, &w)?;
                    let mut r = grad_divergence_probe(spec, &w, &buffer, &grad_f)?;
                    r.round = t;
                    report.grad_divergence.push(r);
                    w.step(lr, &step_direction(spec, &w, &refs, None)?);
                }
                let zeta = self.objective.zeta[c];
                for (o, v) in next.iter_mut().zip(&w.values) {
                    *o += zeta * v;
                }
                steps.push(ClientSteps {
                    zeta,
                    buffer,
                    states,
                });
            }
            let w_next = ParamVector {
                values: next,
                spans: w_fed.spans.clone(),
            };
            for _ in 0..m {
                let g = self.objective.gradient(spec, &w_cen)?;
                w_cen.step(lr, &g);
            }
            report.loss_decrease.push(loss_decrease_probe(
                t,
                spec,
                &self.cert,
                &self.objective,
                &w_fed,
                &w_next,
                &steps,
                lr,
            )?);
            report.weight_divergence.push(weight_divergence_probe(
                t,
                spec,
                &self.cert,
                &self.objective,
                prev_div,
                &w_next,
                &w_cen,
                &steps,
                lr,
                m,
            )?);
            w_fed = w_next;
        }
        Ok(report)
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (ranks(a), ranks(b));
    pearson(&ra, &rb)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    cov / (va * vb).sqrt()
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

/// ODE valuations `⟨∇l, g_ref⟩` of `samples` at `w` over `reference`'s window.
pub fn valuations(
    spec: &ModelSpec,
    w: &ParamVector,
    samples: &[Sample],
    reference: &GradVector,
) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let (_, g) = loss_and_gradient(spec, w, s, reference.window)?;
            dot(&g, reference)
        })
        .collect()
}

/// Variances of the two per-sample terms of the divergence bound, each
/// normalized by its largest magnitude over the batch: `(‖∇l‖², ⟨∇l, ∇F⟩)`.
pub fn term_variances(
    spec: &ModelSpec,
    w: &ParamVector,
    samples: &[Sample],
    grad_f: &GradVector,
) -> Result<(f64, f64)> {
    let mut t1 = Vec::with_capacity(samples.len());
    let mut t2 = Vec::with_capacity(samples.len());
    for s in samples {
        let (_, g) = loss_and_gradient(spec, w, s, grad_f.window)?;
        t1.push(g.norm_sq());
        t2.push(dot(&g, grad_f)?);
    }
    let normalize = |v: &mut Vec<f64>| {
        let m = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if m > 0.0 {
            v.iter_mut().for_each(|x| *x /= m);
        }
    };
    normalize(&mut t1);
    normalize(&mut t2);
    Ok((variance(&t1), variance(&t2)))
}

/// Valuation diagnostics on a batch of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuationDiagnostics {
    pub term1_variance: f64,
    pub term2_variance: f64,
    /// Rank correlation of valuations computed with two models (e.g. 30 rounds apart).
    pub round_rank_correlation: f64,
    /// Rank correlation of full-gradient and last-`k`-layer valuations.
    pub layer_rank_correlation: f64,
}

/// `early`/`late` are global models at two rounds with their exact global
/// gradients (full window); `last_k` picks the truncated window.
pub fn valuation_diagnostics(
    spec: &ModelSpec,
    samples: &[Sample],
    early: (&ParamVector, &GradVector),
    late: (&ParamVector, &GradVector),
    last_k: usize,
) -> Result<ValuationDiagnostics> {
    let (term1_variance, term2_variance) = term_variances(spec, late.0, samples, late.1)?;
    let v_early = valuations(spec, early.0, samples, early.1)?;
    let v_late = valuations(spec, late.0, samples, late.1)?;
    let truncated = late.1.restrict(spec, GradWindow::LastK(last_k))?;
    let v_last = valuations(spec, late.0, samples, &truncated)?;
    Ok(ValuationDiagnostics {
        term1_variance,
        term2_variance,
        round_rank_correlation: spearman(&v_early, &v_late),
        layer_rank_correlation: spearman(&v_late, &v_last),
    })
}
