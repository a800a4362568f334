use cdrs::checkpoint::{Checkpoint, Tensor};
use cdrs::features::InputScaling;
use cdrs::nn::{group_norm, FinalActivation, MlpNetwork, Mode};
use cdrs::sampler::{kappa_base, SamplerSession};
use cdrs::seed::derive_seed;
use cdrs::stats::{ks_two_sample, spearman};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ks_matches_reference_values() {
    let a: Vec<f64> = (0..100).map(f64::from).collect();
    let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
    let ks = ks_two_sample(&a, &b).unwrap();
    assert!((ks.statistic - 0.1).abs() < 1e-12);
    // Q_KS((√50 + 0.12 + 0.11/√50) · 0.1), evaluated independently.
    assert!((ks.p_value - 0.676_620_149_700_245_9).abs() < 1e-9);
    let same = ks_two_sample(&a, &a).unwrap();
    assert_eq!(same.statistic, 0.0);
    assert_eq!(same.p_value, 1.0);
}

fn random_net(seed: u64, act: FinalActivation, groups: Option<usize>) -> MlpNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MlpNetwork::new(&[3, 8, 8, 2], groups, 0.5, act, &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rectified_and_squashed_heads_stay_in_range(
        seed in 0u64..1000,
        xs in prop::collection::vec(-50.0..50.0f64, 12),
    ) {
        let x = Array2::from_shape_vec((4, 3), xs).unwrap();
        let nonneg = random_net(seed, FinalActivation::NonNeg, Some(2)).predict(x.view()).unwrap();
        prop_assert!(nonneg.iter().all(|&v| v >= 0.0));
        let squash = random_net(seed, FinalActivation::Squash, None).predict(x.view()).unwrap();
        prop_assert!(squash.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn train_mode_replays_with_a_cloned_source(seed in 0u64..1000, xs in prop::collection::vec(-5.0..5.0f64, 6)) {
        let net = random_net(seed, FinalActivation::Identity, Some(4));
        let x = Array2::from_shape_vec((2, 3), xs).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, _) = net.forward_batch(x.view(), Mode::Train, &mut rng.clone()).unwrap();
        let (b, _) = net.forward_batch(x.view(), Mode::Train, &mut rng.clone()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn group_norm_standardizes_each_group(
        xs in prop::collection::vec(-100.0..100.0f64, 12),
        groups in prop::sample::select(vec![1usize, 2, 3, 4, 6]),
    ) {
        let out = group_norm(&xs, groups).unwrap();
        let size = xs.len() / groups;
        for (g, chunk) in out.chunks(size).enumerate() {
            let input = &xs[g * size..(g + 1) * size];
            let m = input.iter().sum::<f64>() / size as f64;
            let var = input.iter().map(|v| (v - m).powi(2)).sum::<f64>() / size as f64;
            let om = chunk.iter().sum::<f64>() / size as f64;
            let ov = chunk.iter().map(|v| (v - om).powi(2)).sum::<f64>() / size as f64;
            prop_assert!(om.abs() < 1e-12);
            // Variance is var / (var + ε).
            prop_assert!((ov - var / (var + cdrs::nn::GROUP_NORM_EPS)).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(
        data in prop::collection::vec(prop::num::f64::ANY, 0..40),
        name in "[a-z.]{1,12}",
    ) {
        let n = data.len();
        let ckpt = Checkpoint {
            tensors: vec![
                Tensor { name: name.clone(), dims: vec![n], data: data.clone() },
                Tensor { name: "scalar".into(), dims: vec![], data: vec![1.5] },
            ],
            metadata: serde_json::json!({"kind": "prop", "n": n}),
        };
        let back = Checkpoint::decode(&ckpt.encode().unwrap()).unwrap();
        prop_assert_eq!(back.tensors.len(), 2);
        prop_assert_eq!(&back.tensors[0].name, &name);
        prop_assert!(back.tensors[0].data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.metadata, ckpt.metadata);
    }

    #[test]
    fn derived_seeds_are_stable_and_label_specific(master in any::<u64>(), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        prop_assert_eq!(derive_seed(master, "sample", Some(a)), derive_seed(master, "sample", Some(a)));
        if a.to_bits() != b.to_bits() {
            prop_assert_ne!(derive_seed(master, "sample", Some(a)), derive_seed(master, "sample", Some(b)));
        }
        prop_assert_ne!(derive_seed(master, "sample", None), derive_seed(master, "pool", None));
    }

    #[test]
    fn input_scaling_inverts(xs in prop::collection::vec(-1e3..1e3f64, 6..30)) {
        let n = xs.len() / 3;
        let x = Array2::from_shape_vec((n, 3), xs[..3 * n].to_vec()).unwrap();
        let s = InputScaling::fit(x.view()).unwrap();
        let back = s.invert(s.apply(x.view()).view());
        prop_assert!((&back - &x).iter().all(|d| d.abs() < 1e-9 * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs())))));
    }

    #[test]
    fn spearman_ignores_monotone_transforms(xs in prop::collection::hash_set(-1000i32..1000, 3..40)) {
        let x: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| (v / 100.0).exp()).collect();
        prop_assert!((spearman(&x, &y) - 1.0).abs() < 1e-12);
        let z: Vec<f64> = x.iter().map(|v| -v * v * v).collect();
        prop_assert!((spearman(&x, &z) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_is_bounded_by_the_range(labels in prop::collection::vec(0.0..1.0f64, 2..50)) {
        let mut distinct = labels.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assume!(distinct.len() >= 2);
        let k = kappa_base(&labels).unwrap();
        let range = distinct[distinct.len() - 1] - distinct[0];
        prop_assert!(k > 0.0 && k <= range);
        prop_assert!(k * (distinct.len() - 1) as f64 >= range - 1e-12);
        let mut rev = labels.clone();
        rev.reverse();
        prop_assert_eq!(kappa_base(&rev).unwrap(), k);
    }

    #[test]
    fn online_normalizer_never_decreases(
        m0 in 0.01..10.0f64,
        steps in prop::collection::vec((0.0..50.0f64, 0.0..1.0f64), 1..100),
        frozen in any::<bool>(),
    ) {
        let mut s = SamplerSession::new(0.0, m0, 1, frozen).unwrap();
        let mut last = m0;
        for (r, u) in steps {
            let accepted = s.decide(r, u).unwrap();
            prop_assert!(s.max_ratio >= last);
            if frozen {
                prop_assert_eq!(s.max_ratio, m0);
            } else {
                prop_assert!(s.max_ratio >= r);
            }
            // Acceptance is exactly u < min(1, r / M).
            prop_assert_eq!(accepted, u < (r / s.max_ratio).min(1.0));
            last = s.max_ratio;
        }
        prop_assert!(s.accepted <= s.proposed);
    }
}
