//! Dense models with per-sample losses and analytic gradients.
//!
//! Parameters are flattened layer by layer; within a layer the weight matrix
//! (row-major, `out x in`) precedes the bias vector. Summations run left to right
//! over index order so results are bit-reproducible.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// One labeled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Arc<[f64]>,
    pub label: usize,
    /// Regression target, used only by [`ModelKind::LinReg`]. Defaults to the label.
    pub target: f64,
    pub source_client: usize,
    pub arrival_index: u64,
}

impl Sample {
    pub fn new(features: impl Into<Arc<[f64]>>, label: usize) -> Self {
        Self {
            features: features.into(),
            label,
            target: label as f64,
            source_client: 0,
            arrival_index: 0,
        }
    }

    pub fn regression(features: impl Into<Arc<[f64]>>, target: f64) -> Self {
        Self {
            target,
            ..Self::new(features, 0)
        }
    }

    pub fn with_origin(mut self, client: usize, arrival_index: u64) -> Self {
        self.source_client = client;
        self.arrival_index = arrival_index;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    LogReg,
    Mlp,
    LinReg,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logreg" => Ok(Self::LogReg),
            "mlp" => Ok(Self::Mlp),
            "linreg" => Ok(Self::LinReg),
            other => Err(Error::config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub class_count: usize,
    /// Hidden layer widths, MLP only.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

/// Location and shape of one dense layer inside a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpan {
    pub offset: usize,
    pub len: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerSpan {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, class_count: usize) -> Self {
        Self {
            kind: ModelKind::LogReg,
            input_dim,
            class_count,
            hidden: Vec::new(),
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, class_count: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            class_count,
            hidden,
        }
    }

    pub fn linreg(input_dim: usize) -> Self {
        Self {
            kind: ModelKind::LinReg,
            input_dim,
            class_count: 1,
            hidden: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input dimension must be positive"));
        }
        match self.kind {
            ModelKind::LogReg | ModelKind::Mlp if self.class_count < 2 => {
                Err(Error::config("classification needs at least two classes"))
            }
            ModelKind::Mlp if self.hidden.is_empty() || self.hidden.contains(&0) => Err(
                Error::config("mlp needs at least one hidden layer of positive width"),
            ),
            ModelKind::LogReg | ModelKind::LinReg if !self.hidden.is_empty() => {
                Err(Error::config("hidden layers are only valid for mlp models"))
            }
            _ => Ok(()),
        }
    }

    fn output_width(&self) -> usize {
        match self.kind {
            ModelKind::LinReg => 1,
            _ => self.class_count,
        }
    }

    pub fn layer_spans(&self) -> Vec<LayerSpan> {
        let mut widths = vec![self.input_dim];
        if self.kind == ModelKind::Mlp {
            widths.extend_from_slice(&self.hidden);
        }
        widths.push(self.output_width());
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let len = w[0] * w[1] + w[1];
                let span = LayerSpan {
                    offset,
                    len,
                    inputs: w[0],
                    outputs: w[1],
                };
                offset += len;
                span
            })
            .collect()
    }

    pub fn layer_count(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => self.hidden.len() + 1,
            _ => 1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layer_spans().iter().map(|s| s.len).sum()
    }

    /// First flat index covered by `window`.
    pub fn window_start(&self, window: GradWindow) -> Result<usize> {
        let spans = self.layer_spans();
        match window {
            GradWindow::Full => Ok(0),
            GradWindow::LastK(k) if k == 0 || k > spans.len() => Err(Error::config(format!(
                "last-{k} window is invalid for a model with {} layer(s)",
                spans.len()
            ))),
            GradWindow::LastK(k) => Ok(spans[spans.len() - k].offset),
        }
    }

    pub fn window_len(&self, window: GradWindow) -> Result<usize> {
        Ok(self.param_count() - self.window_start(window)?)
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.param_count()],
            spans: self.layer_spans(),
        }
    }

    /// Initial parameters: zeros for single-layer models, He-normal weights and
    /// zero biases for the MLP (zero init would leave hidden units symmetric).
    pub fn init(&self, rng: &mut StreamRng) -> ParamVector {
        let mut params = self.zeros();
        if self.kind == ModelKind::Mlp {
            for span in params.spans.clone() {
                let std_dev = (2.0 / span.inputs as f64).sqrt();
                for v in &mut params.values[span.weights()] {
                    *v = rng.normal_with(0.0, std_dev);
                }
            }
        }
        params
    }
}

/// Flat model parameters together with their layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub spans: Vec<LayerSpan>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `self -= step * direction` over the tail covered by `direction`.
    pub fn step(&mut self, step: f64, direction: &GradVector) {
        let start = self.values.len() - direction.values.len();
        for (w, g) in self.values[start..].iter_mut().zip(&direction.values) {
            *w -= step * g;
        }
    }
}

/// Which parameters a gradient covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradWindow {
    Full,
    /// The last `k` layers.
    LastK(usize),
}

impl std::fmt::Display for GradWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GradWindow::Full => write!(f, "full"),
            GradWindow::LastK(k) => write!(f, "last{k}"),
        }
    }
}

impl std::str::FromStr for GradWindow {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Self::Full);
        }
        s.strip_prefix("last")
            .and_then(|k| k.parse().ok())
            .map(Self::LastK)
            .ok_or_else(|| Error::config(format!("unknown gradient window `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
    pub window: GradWindow,
}

impl GradVector {
    pub fn zeros(len: usize, window: GradWindow) -> Self {
        Self {
            values: vec![0.0; len],
            window,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    fn check_compatible(&self, other: &GradVector) -> Result<()> {
        if self.window != other.window || self.values.len() != other.values.len() {
            return Err(Error::WindowMismatch(format!(
                "{} (len {}) vs {} (len {})",
                self.window,
                self.values.len(),
                other.window,
                other.values.len()
            )));
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &GradVector) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    /// Tail slice of a full gradient matching `window`.
    pub fn restrict(&self, spec: &ModelSpec, window: GradWindow) -> Result<GradVector> {
        if self.window == window {
            return Ok(self.clone());
        }
        if self.window != GradWindow::Full {
            return Err(Error::WindowMismatch(format!(
                "cannot restrict a {} gradient to {window}",
                self.window
            )));
        }
        let start = spec.window_start(window)?;
        Ok(GradVector {
            values: self.values[start..].to_vec(),
            window,
        })
    }

    pub fn cosine(&self, other: &GradVector) -> Result<f64> {
        let d = dot(self, other)?;
        let n = self.norm() * other.norm();
        Ok(if n > 0.0 { d / n } else { 0.0 })
    }
}

/// Euclidean inner product of two gradients over the same window.
pub fn dot(a: &GradVector, b: &GradVector) -> Result<f64> {
    a.check_compatible(b)?;
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum())
}

fn check_dims(spec: &ModelSpec, params: &ParamVector, sample: &Sample) -> Result<()> {
    if sample.features.len() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            actual: sample.features.len(),
        });
    }
    let n = spec.param_count();
    if params.values.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: params.values.len(),
        });
    }
    if spec.kind != ModelKind::LinReg && sample.label >= spec.class_count {
        return Err(Error::config(format!(
            "label {} out of range for {} classes",
            sample.label, spec.class_count
        )));
    }
    Ok(())
}

/// `out = W x + b` for one layer.
fn affine(params: &[f64], span: &LayerSpan, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let w = &params[span.weights()];
    let b = &params[span.bias()];
    for (row, bias) in w.chunks_exact(span.inputs).zip(b) {
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(input) {
            acc += wi * xi;
        }
        out.push(acc + bias);
    }
}

/// Pre-activations of every layer; the last entry holds the output logits.
fn forward(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> Vec<Vec<f64>> {
    let mut pre = Vec::with_capacity(params.spans.len());
    let mut act: Vec<f64> = x.to_vec();
    let last = params.spans.len() - 1;
    for (l, span) in params.spans.iter().enumerate() {
        let mut z = Vec::with_capacity(span.outputs);
        affine(&params.values, span, &act, &mut z);
        if l < last {
            act = z.iter().map(|&v| v.max(0.0)).collect();
        }
        pre.push(z);
    }
    debug_assert!(spec.layer_count() == pre.len());
    pre
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

fn output_loss(spec: &ModelSpec, logits: &[f64], sample: &Sample) -> f64 {
    match spec.kind {
        ModelKind::LinReg => {
            let r = logits[0] - sample.target;
            0.5 * r * r
        }
        _ => (log_sum_exp(logits) - logits[sample.label]).max(0.0),
    }
}

/// Cross-entropy of the softmax output for classifiers, `0.5 * residual^2` for linreg.
pub fn forward_loss(spec: &ModelSpec, params: &ParamVector, sample: &Sample) -> Result<f64> {
    check_dims(spec, params, sample)?;
    let pre = forward(spec, params, &sample.features);
    Ok(output_loss(
        spec,
        pre.last().expect("at least one layer"),
        sample,
    ))
}

/// Loss and analytic gradient restricted to `window`. Backpropagation stops at
/// the first layer inside the window.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    sample: &Sample,
    window: GradWindow,
) -> Result<(f64, GradVector)> {
    check_dims(spec, params, sample)?;
    let start = spec.window_start(window)?;
    let spans = &params.spans;
    let pre = forward(spec, params, &sample.features);
    let logits = pre.last().expect("at least one layer");
    let loss = output_loss(spec, logits, sample);

    let mut delta: Vec<f64> = match spec.kind {
        ModelKind::LinReg => vec![logits[0] - sample.target],
        _ => {
            let mut p = softmax(logits);
            p[sample.label] -= 1.0;
            p
        }
    };

    let mut grad = vec![0.0; params.values.len() - start];
    for l in (0..spans.len()).rev() {
        let span = &spans[l];
        if span.offset < start {
            break;
        }
        let input: Vec<f64>;
        let input_ref: &[f64] = if l == 0 {
            &sample.features
        } else {
            input = pre[l - 1].iter().map(|&v| v.max(0.0)).collect();
            &input
        };
        let w_off = span.offset - start;
        for (o, d) in delta.iter().enumerate() {
            let row = &mut grad[w_off + o * span.inputs..w_off + (o + 1) * span.inputs];
            for (g, xi) in row.iter_mut().zip(input_ref) {
                *g = d * xi;
            }
        }
        let b_off = w_off + span.inputs * span.outputs;
        grad[b_off..b_off + span.outputs].copy_from_slice(&delta);

        if l > 0 && spans[l - 1].offset >= start {
            let w = &params.values[span.weights()];
            let mut next = vec![0.0; span.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = &w[o * span.inputs..(o + 1) * span.inputs];
                for (n, wi) in next.iter_mut().zip(row) {
                    *n += d * wi;
                }
            }
            for (n, z) in next.iter_mut().zip(&pre[l - 1]) {
                if *z <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }
    Ok((
        loss,
        GradVector {
            values: grad,
            window,
        },
    ))
}

pub fn per_sample_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    sample: &Sample,
    window: GradWindow,
) -> Result<GradVector> {
    loss_and_gradient(spec, params, sample, window).map(|(_, g)| g)
}

/// Predicted class (argmax of logits, lowest index on ties). For linreg the
/// prediction is rounded to the nearest non-negative integer.
pub fn predict(spec: &ModelSpec, params: &ParamVector, x: &[f64]) -> usize {
    let pre = forward(spec, params, x);
    let logits = pre.last().expect("at least one layer");
    match spec.kind {
        ModelKind::LinReg => logits[0].round().max(0.0) as usize,
        _ => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        }
    }
}
