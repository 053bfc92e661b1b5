//! Running gradient estimators: one per client, one on the server.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::datagen::FederatedDataset;
use crate::error::{Error, Result};
use crate::numkernel::{loss_and_gradient, GradVector, GradWindow, ModelSpec, ParamVector, Sample};

/// Running mean of the gradients of samples a client has received since it
/// last took part, all taken at the model it received then.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimator {
    pub g_hat: GradVector,
    pub n: u64,
    /// Round whose model the gradients are taken at.
    pub t_last: usize,
}

impl LocalEstimator {
    pub fn new(len: usize, window: GradWindow) -> Self {
        Self {
            g_hat: GradVector::zeros(len, window),
            n: 0,
            t_last: 0,
        }
    }

    pub fn local_update(&mut self, g: &GradVector) -> Result<()> {
        if g.window != self.g_hat.window || g.len() != self.g_hat.len() {
            return Err(Error::WindowMismatch(format!(
                "estimator is {} (len {}), gradient is {} (len {})",
                self.g_hat.window,
                self.g_hat.len(),
                g.window,
                g.len()
            )));
        }
        self.n += 1;
        let n = self.n as f64;
        for (a, b) in self.g_hat.values.iter_mut().zip(&g.values) {
            *a = (n - 1.0) / n * *a + b / n;
        }
        Ok(())
    }

    /// Hand back the current estimate and start over at `new_round`.
    pub fn local_reset(&mut self, new_round: usize) -> GradVector {
        let window = self.g_hat.window;
        let len = self.g_hat.len();
        self.n = 0;
        self.t_last = new_round;
        std::mem::replace(&mut self.g_hat, GradVector::zeros(len, window))
    }
}

/// Server-side estimate `ĝ = Σ_c ζ_c ĝ_c` over the last upload of every client.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEstimator {
    pub g_hat: GradVector,
    pub stored: Vec<GradVector>,
    pub zeta: Vec<f64>,
}

impl GlobalEstimator {
    pub fn new(len: usize, window: GradWindow, zeta: Vec<f64>) -> Self {
        Self {
            g_hat: GradVector::zeros(len, window),
            stored: vec![GradVector::zeros(len, window); zeta.len()],
            zeta,
        }
    }

    /// Velocity shares `v_c / Σ v`.
    pub fn velocity_shares(velocities: &[usize]) -> Vec<f64> {
        let total: usize = velocities.iter().sum();
        velocities
            .iter()
            .map(|&v| v as f64 / total as f64)
            .collect()
    }

    /// Fold in this round's uploads; `participants` must cover every uploader.
    pub fn global_update(
        &mut self,
        participants: &[usize],
        uploads: &BTreeMap<usize, GradVector>,
    ) -> Result<()> {
        for &c in uploads.keys() {
            if c >= self.stored.len() {
                return Err(Error::UnknownClient(c));
            }
            if !participants.contains(&c) {
                return Err(Error::Invalid(format!(
                    "upload from client {c}, which did not take part this round"
                )));
            }
        }
        for (&c, upload) in uploads {
            let mut delta = upload.clone();
            delta.add_scaled(-1.0, &self.stored[c])?;
            self.g_hat.add_scaled(self.zeta[c], &delta)?;
            self.stored[c] = upload.clone();
        }
        Ok(())
    }

    /// `Σ ζ_c · stored_c` from scratch.
    pub fn recompute(&self) -> GradVector {
        let mut g = GradVector::zeros(self.g_hat.len(), self.g_hat.window);
        for (z, s) in self.zeta.iter().zip(&self.stored) {
            g.add_scaled(*z, s)
                .expect("stored copies share the estimator window");
        }
        g
    }
}

/// Mean per-sample gradient over `samples`.
pub fn mean_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    samples: &[Sample],
    window: GradWindow,
) -> Result<GradVector> {
    let mut g = GradVector::zeros(spec.window_len(window)?, window);
    for s in samples {
        let (_, gs) = loss_and_gradient(spec, params, s, window)?;
        g.add_scaled(1.0, &gs)?;
    }
    if !samples.is_empty() {
        g.scale(1.0 / samples.len() as f64);
    }
    Ok(g)
}

/// `∇F(w) = Σ_c ζ_c ∇F_c(w)` with `F_c` the mean loss over client `c`'s full
/// training set.
pub fn exact_global_gradient(
    spec: &ModelSpec,
    dataset: &FederatedDataset,
    params: &ParamVector,
    zeta: &[f64],
    window: GradWindow,
) -> Result<GradVector> {
    if zeta.len() != dataset.client_count() {
        return Err(Error::DimensionMismatch {
            expected: dataset.client_count(),
            actual: zeta.len(),
        });
    }
    let per_client: Vec<GradVector> = dataset
        .clients
        .par_iter()
        .map(|c| mean_gradient(spec, params, &c.train, window))
        .collect::<Result<_>>()?;
    let mut g = GradVector::zeros(spec.window_len(window)?, window);
    for (z, gc) in zeta.iter().zip(&per_client) {
        g.add_scaled(*z, gc)?;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::ClientData;

    fn gv(v: &[f64]) -> GradVector {
        GradVector {
            values: v.to_vec(),
            window: GradWindow::Full,
        }
    }

    #[test]
    fn local_running_mean() {
        let mut e = LocalEstimator::new(2, GradWindow::Full);
        e.local_update(&gv(&[2.0, 4.0])).unwrap();
        assert_eq!((e.g_hat.values.clone(), e.n), (vec![2.0, 4.0], 1));
        e.local_update(&gv(&[4.0, 0.0])).unwrap();
        assert_eq!((e.g_hat.values.clone(), e.n), (vec![3.0, 2.0], 2));
        let bad = GradVector {
            values: vec![1.0, 1.0],
            window: GradWindow::LastK(1),
        };
        assert!(matches!(
            e.local_update(&bad),
            Err(Error::WindowMismatch(_))
        ));
    }

    #[test]
    fn local_mean_matches_direct_mean() {
        let mut e = LocalEstimator::new(3, GradWindow::Full);
        let gs: Vec<GradVector> = (0..37)
            .map(|i| {
                let x = i as f64;
                gv(&[x.sin(), x * 0.1 - 1.0, (x * x) % 7.0])
            })
            .collect();
        for g in &gs {
            e.local_update(g).unwrap();
        }
        for j in 0..3 {
            let mean = gs.iter().map(|g| g.values[j]).sum::<f64>() / gs.len() as f64;
            assert!((e.g_hat.values[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn reset_uploads_then_clears() {
        let mut e = LocalEstimator::new(1, GradWindow::Full);
        for _ in 0..5 {
            e.local_update(&gv(&[3.0])).unwrap();
        }
        assert!((e.local_reset(7).values[0] - 3.0).abs() < 1e-15);
        assert_eq!((e.n, e.t_last), (0, 7));
        assert!(e.local_reset(8).is_zero());
    }

    #[test]
    fn global_update_substitution() {
        let mut g = GlobalEstimator::new(1, GradWindow::Full, vec![0.5, 0.5]);
        g.g_hat = gv(&[1.0]);
        g.stored[0] = gv(&[1.0]);
        let uploads = BTreeMap::from([(0, gv(&[3.0]))]);
        g.global_update(&[0], &uploads).unwrap();
        assert_eq!(g.g_hat.values, vec![2.0]);
        let before = g.g_hat.clone();
        g.global_update(&[0], &uploads).unwrap();
        assert_eq!(g.g_hat, before);
        assert!(g.global_update(&[1], &uploads).is_err());
    }

    #[test]
    fn first_full_round_gives_weighted_sum() {
        let zeta = vec![0.2, 0.3, 0.5];
        let mut g = GlobalEstimator::new(2, GradWindow::Full, zeta.clone());
        let ups: BTreeMap<usize, GradVector> = (0..3)
            .map(|c| (c, gv(&[c as f64 + 1.0, -(c as f64)])))
            .collect();
        g.global_update(&[0, 1, 2], &ups).unwrap();
        let want0: f64 = (0..3).map(|c| zeta[c] * (c as f64 + 1.0)).sum();
        let want1: f64 = (0..3).map(|c| zeta[c] * -(c as f64)).sum();
        assert!((g.g_hat.values[0] - want0).abs() < 1e-15);
        assert!((g.g_hat.values[1] - want1).abs() < 1e-15);
    }

    fn ds(clients: Vec<Vec<Sample>>) -> FederatedDataset {
        FederatedDataset {
            clients: clients
                .into_iter()
                .map(|train| ClientData {
                    train,
                    test: vec![],
                })
                .collect(),
            class_count: 1,
            input_dim: 1,
        }
    }

    #[test]
    fn exact_gradient_single_and_symmetric() {
        let spec = ModelSpec::linreg(1);
        let w = spec.zeros();
        // at zero params the linreg gradient of (x, t) is [-t x, -t]
        let one = ds(vec![vec![
            Sample::regression(vec![1.0], 2.0),
            Sample::regression(vec![2.0], 1.0),
        ]]);
        let g = exact_global_gradient(&spec, &one, &w, &[1.0], GradWindow::Full).unwrap();
        assert_eq!(g.values, vec![-2.0, -1.5]);

        let two = ds(vec![
            vec![Sample::regression(vec![1.0], 1.0)],
            vec![Sample::regression(vec![1.0], -1.0)],
        ]);
        let g = exact_global_gradient(&spec, &two, &w, &[0.5, 0.5], GradWindow::Full).unwrap();
        assert!(g.is_zero());
    }
}
