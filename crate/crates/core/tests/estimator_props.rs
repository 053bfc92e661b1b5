mod common;

use std::collections::BTreeMap;

use common::{max_abs_diff, small_dataset};
use fedstream_core::datagen::StreamSchedule;
use fedstream_core::estimators::{mean_gradient, GlobalEstimator, LocalEstimator};
use fedstream_core::numkernel::{GradVector, GradWindow, ModelSpec};
use fedstream_core::rng::StreamRng;
use fedstream_core::{SimConfig, Simulation, Strategy, StrategyKind};
use proptest::prelude::*;

fn grad(values: Vec<f64>) -> GradVector {
    GradVector {
        values,
        window: GradWindow::Full,
    }
}

proptest! {
    #[test]
    fn local_estimate_is_the_running_mean(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..60)) {
        let mut est = LocalEstimator::new(4, GradWindow::Full);
        for r in &rows {
            est.local_update(&grad(r.clone())).unwrap();
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..4).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        prop_assert!(max_abs_diff(&est.g_hat.values, &mean) <= 1e-12);
        let held = est.g_hat.clone();
        prop_assert_eq!(est.local_reset(2), held);
        prop_assert!(est.g_hat.is_zero());
        prop_assert_eq!(est.n, 0);
    }

    #[test]
    fn incremental_global_matches_recompute(seed in any::<u64>()) {
        let mut rng = StreamRng::new(seed);
        let n = 6;
        let zeta: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let mut g = GlobalEstimator::new(3, GradWindow::Full, zeta);
        for _ in 0..200 {
            let parts = rng.sample_indices(n, 2);
            let uploads: BTreeMap<usize, GradVector> =
                parts.iter().map(|&c| (c, grad((0..3).map(|_| rng.normal_with(0.0, 5.0)).collect()))).collect();
            g.global_update(&parts, &uploads).unwrap();
        }
        let fresh = g.recompute();
        prop_assert!(max_abs_diff(&g.g_hat.values, &fresh.values) <= 1e-9 * fresh.norm().max(1.0));
    }
}

#[test]
fn uploads_equal_per_sample_means_under_full_participation() {
    let ds = small_dataset(4, 5, 3, 100, 3);
    let mut cfg = SimConfig::new(ModelSpec::logreg(5, 3), Strategy::new(StrategyKind::OdeEst));
    cfg.hyper.participation = 1.0;
    cfg.hyper.lr = 0.05;
    cfg.hyper.rounds = 12;
    cfg.shuffle_period = 10;
    cfg.n_label = 1;
    let mut sim = Simulation::new(cfg.clone(), &ds).unwrap();
    let mut sched = StreamSchedule::new(&ds, cfg.shuffle_period, cfg.hyper.seed).unwrap();
    let mut expected: Vec<GradVector> = Vec::new();
    for t in 1..=12 {
        let before = sim.global().clone();
        sim.step().unwrap();
        for c in 0..4 {
            // the previous round's local mean reached the server unchanged
            if t > 1 {
                assert_eq!(
                    sim.global_estimator().unwrap().stored[c],
                    expected[c],
                    "round {t} client {c}"
                );
            }
        }
        expected.clear();
        for c in 0..4 {
            let arrivals = sched.next_round_samples(&ds, c, t).unwrap();
            let mean =
                mean_gradient(&sim.config().spec, &before, &arrivals, GradWindow::Full).unwrap();
            let local = sim.local_estimator(c).unwrap();
            assert_eq!(local.n as usize, arrivals.len());
            assert!(
                max_abs_diff(&local.g_hat.values, &mean.values) <= 1e-12,
                "round {t} client {c}"
            );
            expected.push(local.g_hat.clone());
        }
    }
}

#[test]
fn engine_estimator_stays_consistent_over_1000_rounds() {
    let ds = small_dataset(10, 4, 3, 60, 5);
    let mut cfg = SimConfig::new(ModelSpec::logreg(4, 3), Strategy::new(StrategyKind::OdeEst));
    cfg.hyper.participation = 0.3;
    cfg.hyper.lr = 0.01;
    cfg.hyper.rounds = 1000;
    cfg.shuffle_period = 20;
    cfg.n_label = 2;
    cfg.eval_every = 1000;
    let mut sim = Simulation::new(cfg, &ds).unwrap();
    for _ in 0..1000 {
        sim.step().unwrap();
    }
    let est = sim.global_estimator().unwrap();
    let fresh = est.recompute();
    let rel = max_abs_diff(&est.g_hat.values, &fresh.values) / fresh.norm().max(1e-300);
    assert!(rel <= 1e-9, "relative drift {rel:e}");
}
