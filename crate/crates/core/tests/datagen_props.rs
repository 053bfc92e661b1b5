mod common;

use common::small_dataset;
use fedstream_core::datagen::{
    generate_synthetic_with_truth, write_dataset, SigmaProfile, StreamSchedule,
};
use fedstream_core::metrics::accuracy;
use fedstream_core::numkernel::{ModelSpec, Sample};
use fedstream_core::rng::StreamRng;
use fedstream_core::SyntheticConfig;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_period_streams_each_sample_once(sizes in prop::collection::vec(2usize..200, 1..5), period in 1usize..60, seed in any::<u64>()) {
        let ds = fedstream_core::datagen::generate_synthetic(&SyntheticConfig {
            client_count: sizes.len(),
            input_dim: 2,
            class_count: 2,
            samples_per_client: sizes,
            seed,
            ..Default::default()
        }).unwrap();
        let mut s = StreamSchedule::new(&ds, period, seed).unwrap();
        for c in 0..ds.client_count() {
            let n = ds.clients[c].train.len();
            prop_assert_eq!(s.velocity(c), n.div_ceil(period).max(1));
            for p in 0..2 {
                let mut got: Vec<usize> = (1..=period).flat_map(|r| s.round_indices(c, p * period + r).unwrap()).collect();
                got.sort_unstable();
                prop_assert_eq!(got, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn split_partitions_each_client(seed in any::<u64>()) {
        let cfg = SyntheticConfig { client_count: 4, input_dim: 3, class_count: 3, seed, ..Default::default() };
        let ds = fedstream_core::datagen::generate_synthetic(&cfg).unwrap();
        for (c, n) in cfg.client_sizes().into_iter().enumerate() {
            let cd = &ds.clients[c];
            prop_assert_eq!(cd.train.len() + cd.test.len(), n);
            prop_assert_eq!(cd.test.len(), n / 5);
            for t in &cd.test {
                prop_assert!(!cd.train.iter().any(|s| s.features == t.features));
            }
        }
    }
}

#[test]
fn same_seed_writes_identical_bytes() {
    let a = small_dataset(5, 6, 4, 70, 33);
    let b = small_dataset(5, 6, 4, 70, 33);
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    write_dataset(&a, &mut ba).unwrap();
    write_dataset(&b, &mut bb).unwrap();
    assert_eq!(ba, bb);
    let mut other = Vec::new();
    write_dataset(&small_dataset(5, 6, 4, 70, 34), &mut other).unwrap();
    assert_ne!(ba, other);
}

#[test]
fn labels_follow_the_generating_linear_model() {
    let cfg = SyntheticConfig {
        client_count: 6,
        input_dim: 5,
        class_count: 4,
        sigma: SigmaProfile::Decaying(1.2),
        seed: 3,
        ..Default::default()
    };
    let (ds, truth) = generate_synthetic_with_truth(&cfg).unwrap();
    for (cd, g) in ds.clients.iter().zip(&truth) {
        for s in cd.train.iter().chain(&cd.test) {
            let logits: Vec<f64> = (0..4)
                .map(|y| {
                    g.bias[y]
                        + (0..5)
                            .map(|j| g.weights[y * 5 + j] * s.features[j])
                            .sum::<f64>()
                })
                .collect();
            let best = (0..4).fold(0, |b, y| if logits[y] > logits[b] { y } else { b });
            assert_eq!(s.label, best);
        }
    }
}

#[test]
fn untrained_model_is_at_chance_on_balanced_labels() {
    let spec = ModelSpec::logreg(8, 10);
    let mut rng = StreamRng::new(5);
    let w = spec.init(&mut rng.substream(1));
    let samples: Vec<Sample> = (0..5000)
        .map(|i| Sample::new((0..8).map(|_| rng.normal()).collect::<Vec<_>>(), i % 10))
        .collect();
    let acc = accuracy(&spec, &w, &samples);
    assert!((acc - 0.10).abs() <= 0.02, "{acc}");
}
