use std::collections::VecDeque;

use super::StrategyKind;

pub const NOISE_WINDOW_LEN: usize = 50;

/// Nearest-rank percentile of an ascending slice: the value at 1-based rank
/// `ceil(q * n)`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Scores (losses or gradient norms) of the most recent samples.
#[derive(Debug, Clone, Default)]
pub struct NoiseWindow {
    scores: VecDeque<f64>,
}

impl NoiseWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_scores(scores: impl IntoIterator<Item = f64>) -> Self {
        let mut w = Self::new();
        for s in scores {
            w.push(s);
        }
        w
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn push(&mut self, score: f64) {
        if self.scores.len() == NOISE_WINDOW_LEN {
            self.scores.pop_front();
        }
        self.scores.push_back(score);
    }

    fn threshold(&self, kind: StrategyKind) -> Option<f64> {
        let (q, min_len) = match kind {
            StrategyKind::FedBalancer => (0.9, 10),
            StrategyKind::Sld => (0.5, 1),
            _ => return None,
        };
        if self.scores.len() < min_len {
            return None;
        }
        let mut sorted: Vec<f64> = self.scores.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        Some(nearest_rank(&sorted, q))
    }

    /// Whether `score` passes the filter of `kind`; the score is recorded either way.
    /// Kinds without a filter admit everything.
    pub fn admit(&mut self, kind: StrategyKind, score: f64) -> bool {
        let ok = self.threshold(kind).is_none_or(|t| score <= t);
        self.push(score);
        ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fedbalancer_rejects_above_ninetieth_percentile() {
        let mut w = NoiseWindow::from_scores((1..=50).map(f64::from));
        assert_eq!(w.threshold(StrategyKind::FedBalancer), Some(45.0));
        assert!(!w.admit(StrategyKind::FedBalancer, 50.0));
        let mut w = NoiseWindow::from_scores((1..=50).map(f64::from));
        assert!(w.admit(StrategyKind::FedBalancer, 45.0));
    }

    #[test]
    fn fedbalancer_admits_while_warming_up() {
        let mut w = NoiseWindow::from_scores([1.0; 9]);
        assert!(w.admit(StrategyKind::FedBalancer, 1e9));
        assert_eq!(w.len(), 10);
    }

    #[test]
    fn sld_uses_median() {
        let mut w = NoiseWindow::from_scores([1.0, 2.0, 3.0]);
        assert!(!w.clone().admit(StrategyKind::Sld, 5.0));
        assert!(w.admit(StrategyKind::Sld, 1.0));
        assert!(NoiseWindow::new().admit(StrategyKind::Sld, 100.0));
    }

    #[test]
    fn window_is_bounded_and_drops_oldest() {
        let mut w = NoiseWindow::new();
        for i in 0..120 {
            w.admit(StrategyKind::Sld, i as f64);
        }
        assert_eq!(w.len(), NOISE_WINDOW_LEN);
        assert_eq!(w.scores.front(), Some(&70.0));
    }

    #[test]
    fn nearest_rank_examples() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.5), 5.0);
        assert_eq!(nearest_rank(&v, 0.9), 9.0);
        assert_eq!(nearest_rank(&v, 1.0), 10.0);
        assert_eq!(nearest_rank(&[7.0], 0.9), 7.0);
    }
}
