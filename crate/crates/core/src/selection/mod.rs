//! On-device data selection: strategy kinds, sample scoring, bounded storage
//! buffers and the streaming noise filters.

mod buffer;
mod noise;

pub use buffer::{Decision, Entry, StorageBuffer};
pub use noise::{nearest_rank, NoiseWindow, NOISE_WINDOW_LEN};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{
    dot, forward_loss, loss_and_gradient, GradVector, GradWindow, ModelSpec, ParamVector, Sample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Fifo,
    Reservoir,
    HighLoss,
    GradNorm,
    FedBalancer,
    Sld,
    OdeExact,
    OdeEst,
    FullData,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 9] = [
        StrategyKind::Fifo,
        StrategyKind::Reservoir,
        StrategyKind::HighLoss,
        StrategyKind::GradNorm,
        StrategyKind::FedBalancer,
        StrategyKind::Sld,
        StrategyKind::OdeExact,
        StrategyKind::OdeEst,
        StrategyKind::FullData,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Fifo => "fifo",
            StrategyKind::Reservoir => "reservoir",
            StrategyKind::HighLoss => "high_loss",
            StrategyKind::GradNorm => "grad_norm",
            StrategyKind::FedBalancer => "fedbalancer",
            StrategyKind::Sld => "sld",
            StrategyKind::OdeExact => "ode_exact",
            StrategyKind::OdeEst => "ode_est",
            StrategyKind::FullData => "full_data",
        }
    }

    pub fn is_ode(self) -> bool {
        matches!(self, StrategyKind::OdeExact | StrategyKind::OdeEst)
    }

    /// Scoring needs a per-sample gradient.
    pub fn needs_gradient(self) -> bool {
        matches!(
            self,
            StrategyKind::GradNorm
                | StrategyKind::Sld
                | StrategyKind::OdeExact
                | StrategyKind::OdeEst
        )
    }

    /// Scoring needs only a forward pass.
    pub fn needs_loss(self) -> bool {
        matches!(self, StrategyKind::HighLoss | StrategyKind::FedBalancer)
    }

    /// Keeps the top-scored samples in a priority queue.
    pub fn is_priority(self) -> bool {
        self.needs_gradient() || self.needs_loss()
    }

    pub fn has_noise_filter(self) -> bool {
        matches!(self, StrategyKind::FedBalancer | StrategyKind::Sld)
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "rs" {
            return Ok(StrategyKind::Reservoir);
        }
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }
}

/// A selection strategy together with the gradient window its scores use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub window: GradWindow,
}

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            window: GradWindow::Full,
        }
    }

    pub fn with_window(mut self, window: GradWindow) -> Self {
        self.window = window;
        self
    }
}

/// What a client knows when it values a sample.
#[derive(Debug, Clone, Copy)]
pub struct ValuationContext<'a> {
    pub spec: &'a ModelSpec,
    /// The client's last-received global model.
    pub model: &'a ParamVector,
    /// Reference global gradient (exact or estimated), required by ODE kinds.
    pub reference: Option<&'a GradVector>,
}

/// Score together with the gradient computed along the way, if any.
#[derive(Debug, Clone)]
pub struct Valuation {
    pub score: f64,
    pub gradient: Option<GradVector>,
}

pub fn evaluate_sample(
    strategy: Strategy,
    ctx: &ValuationContext<'_>,
    s: &Sample,
) -> Result<Valuation> {
    let kind = strategy.kind;
    if kind.needs_loss() {
        return Ok(Valuation {
            score: forward_loss(ctx.spec, ctx.model, s)?,
            gradient: None,
        });
    }
    if !kind.needs_gradient() {
        return Ok(Valuation {
            score: 0.0,
            gradient: None,
        });
    }
    if kind.is_ode() && ctx.reference.is_none() {
        return Err(Error::config(format!("{kind} needs a reference gradient")));
    }
    let (_, g) = loss_and_gradient(ctx.spec, ctx.model, s, strategy.window)?;
    let score = match ctx.reference {
        Some(reference) if kind.is_ode() => dot(&g, reference)?,
        _ => g.norm(),
    };
    Ok(Valuation {
        score,
        gradient: Some(g),
    })
}

/// Data value of `s` under `strategy`: loss, gradient norm, or the projection
/// of its gradient onto the reference global gradient. Zero for strategies that
/// do not score.
pub fn score_sample(strategy: Strategy, ctx: &ValuationContext<'_>, s: &Sample) -> Result<f64> {
    evaluate_sample(strategy, ctx, s).map(|v| v.score)
}

/// Apply the streaming noise filter of `kind` and record `score` in the window.
pub fn noise_admit(window: &mut NoiseWindow, kind: StrategyKind, score: f64) -> bool {
    window.admit(kind, score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::per_sample_gradient;

    fn grad(v: Vec<f64>) -> GradVector {
        GradVector {
            values: v,
            window: GradWindow::Full,
        }
    }

    #[test]
    fn names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
        }
        assert_eq!(
            "rs".parse::<StrategyKind>().unwrap(),
            StrategyKind::Reservoir
        );
        assert!("random".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn ode_score_is_projection() {
        // logreg d=1, |Y|=2 at zero params, x=[2], y=0: gradient = [-1, 1, -0.5, 0.5]
        let spec = ModelSpec::logreg(1, 2);
        let model = spec.zeros();
        let s = Sample::new(vec![2.0], 0);
        let g = per_sample_gradient(&spec, &model, &s, GradWindow::Full).unwrap();
        assert_eq!(g.values, vec![-1.0, 1.0, -0.5, 0.5]);

        let ortho = grad(vec![1.0, 1.0, 0.0, 0.0]);
        let ctx = ValuationContext {
            spec: &spec,
            model: &model,
            reference: Some(&ortho),
        };
        assert_eq!(
            score_sample(Strategy::new(StrategyKind::OdeEst), &ctx, &s).unwrap(),
            0.0
        );

        let ctx = ValuationContext {
            spec: &spec,
            model: &model,
            reference: Some(&g),
        };
        let v = score_sample(Strategy::new(StrategyKind::OdeExact), &ctx, &s).unwrap();
        assert_eq!(v, g.norm_sq());
    }

    #[test]
    fn ode_without_reference_is_config_error() {
        let spec = ModelSpec::logreg(1, 2);
        let model = spec.zeros();
        let ctx = ValuationContext {
            spec: &spec,
            model: &model,
            reference: None,
        };
        let err = score_sample(
            Strategy::new(StrategyKind::OdeEst),
            &ctx,
            &Sample::new(vec![1.0], 0),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn grad_norm_matches_finite_difference_norm() {
        let spec = ModelSpec::logreg(3, 4);
        let model = spec.zeros();
        let s = Sample::new(vec![0.5, -1.5, 2.0], 2);
        let ctx = ValuationContext {
            spec: &spec,
            model: &model,
            reference: None,
        };
        let analytic = score_sample(Strategy::new(StrategyKind::GradNorm), &ctx, &s).unwrap();
        let eps = 1e-6;
        let mut sq = 0.0;
        for i in 0..model.len() {
            let mut p = model.clone();
            p.values[i] += eps;
            let up = forward_loss(&spec, &p, &s).unwrap();
            p.values[i] -= 2.0 * eps;
            let down = forward_loss(&spec, &p, &s).unwrap();
            sq += ((up - down) / (2.0 * eps)).powi(2);
        }
        assert!(
            (analytic - sq.sqrt()).abs() < 1e-5,
            "{analytic} vs {}",
            sq.sqrt()
        );
    }

    #[test]
    fn loss_based_and_passive_scores() {
        let spec = ModelSpec::logreg(2, 10);
        let model = spec.zeros();
        let s = Sample::new(vec![1.0, 1.0], 3);
        let ctx = ValuationContext {
            spec: &spec,
            model: &model,
            reference: None,
        };
        let hl = score_sample(Strategy::new(StrategyKind::HighLoss), &ctx, &s).unwrap();
        assert!((hl - 10f64.ln()).abs() < 1e-12);
        for k in [
            StrategyKind::Fifo,
            StrategyKind::Reservoir,
            StrategyKind::FullData,
        ] {
            assert_eq!(score_sample(Strategy::new(k), &ctx, &s).unwrap(), 0.0);
        }
    }
}
