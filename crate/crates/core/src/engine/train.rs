use crate::error::{Error, Result};
use crate::numkernel::{loss_and_gradient, GradVector, GradWindow, ModelSpec, ParamVector, Sample};

/// Result of a client's local training.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: ParamVector,
    pub grad_evals: u64,
    /// Model before every step (`w^{t,0} .. w^{t,steps-1}`), when traced.
    pub trace: Vec<ParamVector>,
}

/// `m` epochs of gradient steps over `samples`.
///
/// With `gamma` each step moves along `Σ γ_y ∇l / Σ γ_y` over the batch;
/// without it along the plain batch mean. `batch = None` uses the whole set.
pub fn local_train(
    spec: &ModelSpec,
    w0: &ParamVector,
    samples: &[&Sample],
    gamma: Option<&[f64]>,
    lr: f64,
    epochs: usize,
    batch: Option<usize>,
    trace: bool,
) -> Result<LocalOutcome> {
    if samples.is_empty() {
        return Err(Error::Invalid("local training on an empty buffer".into()));
    }
    let batch = batch.unwrap_or(samples.len()).clamp(1, samples.len());
    let mut w = w0.clone();
    let mut grad_evals = 0;
    let mut states = Vec::new();
    for _ in 0..epochs {
        for chunk in samples.chunks(batch) {
            if trace {
                states.push(w.clone());
            }
            let d = step_direction(spec, &w, chunk, gamma)?;
            grad_evals += chunk.len() as u64;
            w.step(lr, &d);
        }
    }
    Ok(LocalOutcome {
        params: w,
        grad_evals,
        trace: states,
    })
}

/// Weighted mean gradient of a batch (the local step direction).
pub fn step_direction(
    spec: &ModelSpec,
    w: &ParamVector,
    batch: &[&Sample],
    gamma: Option<&[f64]>,
) -> Result<GradVector> {
    let mut d = GradVector::zeros(w.len(), GradWindow::Full);
    let mut total = 0.0;
    for s in batch {
        let g_y = match gamma {
            Some(g) => *g
                .get(s.label)
                .ok_or_else(|| Error::Invalid(format!("no class weight for label {}", s.label)))?,
            None => 1.0,
        };
        let (_, g) = loss_and_gradient(spec, w, s, GradWindow::Full)?;
        d.add_scaled(g_y, &g)?;
        total += g_y;
    }
    if total <= 0.0 {
        return Err(Error::Invalid("batch has zero total class weight".into()));
    }
    d.scale(1.0 / total);
    Ok(d)
}

/// Weighted average of `models`; weights are normalized here.
pub fn aggregate(models: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = models
        .first()
        .ok_or_else(|| Error::Invalid("nothing to aggregate".into()))?;
    if models.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: models.len(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Invalid(format!(
            "aggregation weights must be positive: {weights:?}"
        )));
    }
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; first.len()];
    for (m, w) in models.iter().zip(weights) {
        if m.len() != out.len() {
            return Err(Error::DimensionMismatch {
                expected: out.len(),
                actual: m.len(),
            });
        }
        let share = w / total;
        for (o, v) in out.iter_mut().zip(&m.values) {
            *o += share * v;
        }
    }
    Ok(ParamVector {
        values: out,
        spans: first.spans.clone(),
    })
}
