use cdrs::metrics::label_score;
use cdrs::synthetic::{BruteForceOracle, BruteForceSpec, ConditionalGaussianTask, LabelSpace, TaskSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn column_mean(draws: &[cdrs::synthetic::Draw], i: usize) -> f64 {
    draws.iter().map(|d| d.features[i]).sum::<f64>() / draws.len() as f64
}

/// Weighted attribute offset, computed from the spec fields alone.
fn mixture_offset(spec: &TaskSpec, weights: &[f64]) -> Vec<f64> {
    (0..spec.dim)
        .map(|i| {
            weights
                .iter()
                .zip(&spec.attributes.offsets)
                .map(|(w, o)| w * o[i])
                .sum()
        })
        .collect()
}

#[test]
fn class_task_moments_match_the_spec() {
    let spec = TaskSpec::class_benchmark();
    let task = ConditionalGaussianTask::new(spec.clone()).unwrap();
    let y = 3.0;
    let u = y / 9.0;
    let n = 100_000;
    let real = task.sample_real(y, n, &mut rng(1)).unwrap();
    let fake = task.sample_fake(y, n, &mut rng(2)).unwrap();
    let real_off = mixture_offset(&spec, &spec.attributes.real_weights);
    let fake_off = mixture_offset(&spec, &spec.attributes.fake_weights);
    for i in 0..2 {
        let want_real = spec.real_mean.intercept[i] + u * spec.real_mean.slope[i] + real_off[i];
        let want_fake = spec.fake_mean.intercept[i] + u * spec.fake_mean.slope[i] + fake_off[i];
        assert!((column_mean(&real, i) - want_real).abs() < 0.02, "real coord {i}");
        assert!((column_mean(&fake, i) - want_fake).abs() < 0.02, "fake coord {i}");
    }
    assert!(real.iter().all(|d| d.label == y));
    assert!(fake.iter().all(|d| d.label == y));
}

#[test]
fn attribute_frequencies_match_weights() {
    let spec = TaskSpec::class_benchmark();
    let task = ConditionalGaussianTask::new(spec.clone()).unwrap();
    let n = 100_000;
    for (draws, weights) in [
        (
            task.sample_real(5.0, n, &mut rng(3)).unwrap(),
            &spec.attributes.real_weights,
        ),
        (
            task.sample_fake(5.0, n, &mut rng(4)).unwrap(),
            &spec.attributes.fake_weights,
        ),
    ] {
        for (k, w) in weights.iter().enumerate() {
            let f = draws.iter().filter(|d| d.attribute == k).count() as f64 / n as f64;
            assert!((f - w).abs() < 0.02, "attribute {k}: {f} vs {w}");
        }
    }
}

fn plain_noisy_spec(sd: f64) -> TaskSpec {
    let mut spec = TaskSpec::continuous_benchmark();
    spec.attributes.noise_scale = None;
    spec.label_noise_sd = sd;
    spec
}

#[test]
fn recorded_fake_labels_are_centred_on_the_request() {
    let task = ConditionalGaussianTask::new(plain_noisy_spec(0.1)).unwrap();
    let n = 100_000;
    let fake = task.sample_fake(0.5, n, &mut rng(5)).unwrap();
    let mean = fake.iter().map(|d| d.label).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 3.0 * 0.1 / (n as f64).sqrt());
    assert!(fake.iter().all(|d| (0.0..=1.0).contains(&d.label)));
}

#[test]
fn zero_label_noise_keeps_labels_exact() {
    let task = ConditionalGaussianTask::new(plain_noisy_spec(0.0)).unwrap();
    let fake = task.sample_fake(0.3, 1000, &mut rng(6)).unwrap();
    assert!(fake.iter().all(|d| d.label == 0.3));
}

#[test]
fn raw_fake_label_score_is_half_normal_mean() {
    let task = ConditionalGaussianTask::new(plain_noisy_spec(0.1)).unwrap();
    let n = 100_000;
    let fake = task.sample_fake(0.5, n, &mut rng(7)).unwrap();
    let actual: Vec<f64> = fake.iter().map(|d| d.label).collect();
    let score = label_score(&actual, &vec![0.5; n]).unwrap();
    let want = 0.1 * (2.0 / std::f64::consts::PI).sqrt();
    assert!((score - want).abs() < 0.05 * want, "{score} vs {want}");
}

#[test]
fn midpoint_ratio_of_equal_variance_gaussians_is_one() {
    let task = ConditionalGaussianTask::new(TaskSpec::gaussian_1d(0.0, 1.0, 2)).unwrap();
    assert!((task.true_ratio(&[0.5], 0.0).unwrap() - 1.0).abs() < 1e-12);
    // r(h) = exp(1/2 - h).
    for h in [-2.0, -0.3, 0.0, 1.7] {
        let r = task.true_ratio(&[h], 1.0).unwrap();
        assert!((r - (0.5 - h as f64).exp()).abs() < 1e-12 * r.max(1.0));
    }
}

#[test]
fn ratio_is_mirror_symmetric_about_the_midpoint() {
    let task = ConditionalGaussianTask::new(TaskSpec::gaussian_1d(0.0, 1.0, 2)).unwrap();
    for i in 0..=40 {
        let h = -3.0 + 0.15 * i as f64;
        let a = task.true_ratio(&[h], 0.0).unwrap();
        let b = task.true_ratio(&[1.0 - h], 0.0).unwrap();
        assert!((a * b - 1.0).abs() < 1e-10);
    }
}

fn expected_ratio_under_fake(task: &ConditionalGaussianTask, y: f64, n: usize, seed: u64) -> f64 {
    let fake = task.sample_fake(y, n, &mut rng(seed)).unwrap();
    fake.iter()
        .map(|d| task.true_ratio(&d.features, y).unwrap())
        .sum::<f64>()
        / n as f64
}

#[test]
fn ratio_integrates_to_one_under_the_fake_family() {
    let class = ConditionalGaussianTask::new(TaskSpec::class_benchmark()).unwrap();
    let cont = ConditionalGaussianTask::new(TaskSpec::continuous_benchmark()).unwrap();
    let n = 1_000_000;
    for (task, y) in [(&class, 4.0), (&cont, 0.5), (&cont, 0.0), (&cont, 0.97)] {
        let e = expected_ratio_under_fake(task, y, n, 8);
        assert!((e - 1.0).abs() < 0.01, "label {y}: E[r] = {e}");
    }
}

fn integrate_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64, steps: usize) -> f64 {
    // Simpson's rule.
    let h = (hi - lo) / steps as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..steps {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn clipped_fake_density_is_normalized() {
    let spec = TaskSpec {
        dim: 1,
        label_space: LabelSpace::Interval { train_labels: 5 },
        real_mean: cdrs::synthetic::AffineMean {
            intercept: vec![0.0],
            slope: vec![4.0],
        },
        fake_mean: cdrs::synthetic::AffineMean {
            intercept: vec![0.3],
            slope: vec![4.0],
        },
        real_cov: None,
        fake_cov: Some(vec![vec![0.25]]),
        attributes: cdrs::synthetic::AttributeMixture {
            real_weights: vec![0.5, 0.5],
            fake_weights: vec![0.7, 0.3],
            offsets: vec![vec![0.0], vec![1.0]],
            noise_scale: Some(vec![1.0, 3.0]),
        },
        label_noise_sd: 0.2,
    };
    let task = ConditionalGaussianTask::new(spec).unwrap();
    for y in [0.0, 0.05, 0.5, 0.9] {
        let fake = integrate_1d(
            |h| task.log_fake_density(&[h], y).unwrap().exp(),
            -10.0,
            16.0,
            26_000,
        );
        let real = integrate_1d(
            |h| task.log_real_density(&[h], y).unwrap().exp(),
            -10.0,
            16.0,
            26_000,
        );
        assert!((fake - 1.0).abs() < 1e-6, "fake mass {fake} at {y}");
        assert!((real - 1.0).abs() < 1e-6, "real mass {real} at {y}");
    }
}

#[test]
fn brute_force_agrees_with_closed_form() {
    let task = ConditionalGaussianTask::new(TaskSpec::gaussian_1d(0.0, 0.5, 2)).unwrap();
    let oracle = BruteForceOracle::new(&task, 0.0, BruteForceSpec::default()).unwrap();
    let mut worst = 0.0_f64;
    for i in 0..=100 {
        let h = -2.0 + 0.04 * i as f64;
        let exact = task.true_ratio(&[h], 0.0).unwrap();
        let est = oracle.ratio(&[h]).unwrap();
        worst = worst.max((est - exact).abs() / exact);
    }
    assert!(worst < 0.10, "worst relative error {worst}");
}

#[test]
fn brute_force_on_identical_families_is_one() {
    let task = ConditionalGaussianTask::new(TaskSpec::gaussian_1d(0.0, 0.0, 2)).unwrap();
    let oracle = BruteForceOracle::new(&task, 1.0, BruteForceSpec::default()).unwrap();
    for h in [-1.0, 0.0, 0.5, 1.2] {
        let r = oracle.ratio(&[h]).unwrap();
        assert!((r - 1.0).abs() < 0.05, "{r} at {h}");
    }
}

#[test]
fn brute_force_in_two_dimensions() {
    let task = ConditionalGaussianTask::new(TaskSpec::class_benchmark()).unwrap();
    let spec = BruteForceSpec {
        half_width: 0.1,
        ..BruteForceSpec::default()
    };
    let oracle = BruteForceOracle::new(&task, 2.0, spec).unwrap();
    for h in [[0.0, 0.0], [-0.5, 0.3], [0.2, -0.8]] {
        let exact = task.true_ratio(&h, 2.0).unwrap();
        let est = oracle.ratio(&h).unwrap();
        assert!((est - exact).abs() / exact < 0.15, "{est} vs {exact} at {h:?}");
    }
}

#[test]
fn labels_outside_the_space_are_rejected() {
    let class = ConditionalGaussianTask::new(TaskSpec::class_benchmark()).unwrap();
    assert!(class.sample_real(10.0, 1, &mut rng(0)).is_err());
    assert!(class.sample_real(1.5, 1, &mut rng(0)).is_err());
    let cont = ConditionalGaussianTask::new(TaskSpec::continuous_benchmark()).unwrap();
    assert!(cont.true_ratio(&[0.0, 0.0], 1.01).is_err());
    assert!(cont.true_ratio(&[0.0], 0.5).is_err());
}
