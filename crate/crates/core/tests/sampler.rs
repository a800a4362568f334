use cdrs::features::{IdentityExtractor, LabelPredictor};
use cdrs::sampler::{
    burn_in_max, default_zeta, filter_vicinity, kappa_base, run_conditional_subsampling, sample_label,
    ConstantRatio, OracleRatio, ProposalStream, SamplerSettings, VicinityFilter,
};
use cdrs::stats::{mean, variance};
use cdrs::synthetic::{ConditionalGaussianTask, TaskSpec};
use cdrs::Error;
use ndarray::{array, ArrayView2};

/// Returns fixed predictions regardless of input.
struct Fixed(Vec<f64>);

impl LabelPredictor for Fixed {
    fn predict_batch(&self, x: ArrayView2<f64>) -> cdrs::Result<Vec<f64>> {
        Ok(self.0.iter().cycle().take(x.nrows()).copied().collect())
    }
}

/// Reads the label off the first coordinate of the continuous benchmark.
struct FirstAxis;

impl LabelPredictor for FirstAxis {
    fn predict_batch(&self, x: ArrayView2<f64>) -> cdrs::Result<Vec<f64>> {
        Ok(x.column(0).iter().map(|v| v / 10.0).collect())
    }
}

/// Real `N(0, 1)`, fake `N(0.5, 4)`: the ratio is bounded, so `M` is finite.
fn wide_fake_task() -> ConditionalGaussianTask {
    let mut spec = TaskSpec::gaussian_1d(0.0, 0.5, 2);
    spec.fake_cov = Some(vec![vec![4.0]]);
    ConditionalGaussianTask::new(spec).unwrap()
}

/// `r(h) = 2 exp(-h²/2 + (h - 0.5)²/8)` peaks where `-h + (h - 0.5)/4 = 0`.
fn sup_ratio(task: &ConditionalGaussianTask) -> f64 {
    task.true_ratio(&[-1.0 / 6.0], 0.0).unwrap()
}

#[test]
fn filter_example_keeps_the_vicinity() {
    let pred = Fixed(vec![0.1, 0.2, 0.35]);
    let f = VicinityFilter::new(0.1, &pred).unwrap();
    let x = array![[0.0], [0.0], [0.0]];
    let (keep, predicted) = filter_vicinity(x.view(), &f, 0.2).unwrap();
    assert_eq!(keep, vec![0, 1]);
    assert_eq!(predicted.unwrap(), vec![0.1, 0.2, 0.35]);
    assert!(VicinityFilter::new(-0.1, &pred).is_err());
    assert!(VicinityFilter::new(f64::NAN, &pred).is_err());
}

#[test]
fn kappa_and_default_zeta() {
    let labels: Vec<f64> = (0..60).map(|i| i as f64 / 59.0).collect();
    let k = kappa_base(&labels).unwrap();
    assert!((k - 1.0 / 59.0).abs() < 1e-12);
    let m_kappa: f64 = 0.1 * 59.0 / 3.0;
    assert!((m_kappa - 1.9667).abs() < 1e-3);
    assert!((default_zeta(&labels, m_kappa).unwrap() - 0.1).abs() < 1e-12);
    // Order and duplicates do not matter.
    let mut shuffled = labels.clone();
    shuffled.reverse();
    shuffled.push(0.5);
    assert_eq!(kappa_base(&shuffled).unwrap(), k);
}

#[test]
fn constant_ratio_accepts_every_proposal() {
    let task = wide_fake_task();
    let id = IdentityExtractor { dim: 1 };
    let settings = SamplerSettings {
        burn_in: 100,
        ..SamplerSettings::default()
    };
    let out = sample_label(&task, &id, &ConstantRatio(2.5), None, 0.0, 500, &settings, 3).unwrap();
    assert_eq!(out.session.acceptance_rate(), 1.0);
    assert_eq!(out.session.max_ratio, 2.5);
    for (i, s) in out.samples.iter().enumerate() {
        assert_eq!(s.proposal_index, i);
        assert_eq!(s.proposal.features, s.proposal.input);
    }
}

#[test]
fn oracle_rejection_sampling_recovers_real_moments() {
    let task = wide_fake_task();
    let id = IdentityExtractor { dim: 1 };
    let settings = SamplerSettings::default();
    let out = sample_label(&task, &id, &OracleRatio(&task), None, 0.0, 50_000, &settings, 11).unwrap();
    let xs: Vec<f64> = out.samples.iter().map(|s| s.proposal.input[0]).collect();
    assert!(mean(&xs).abs() < 0.03, "mean {}", mean(&xs));
    assert!((variance(&xs) - 1.0).abs() < 0.05, "variance {}", variance(&xs));
}

#[test]
fn frozen_acceptance_rate_is_one_over_m() {
    let task = wide_fake_task();
    let id = IdentityExtractor { dim: 1 };
    let settings = SamplerSettings {
        frozen_m: true,
        ..SamplerSettings::default()
    };
    let out = sample_label(&task, &id, &OracleRatio(&task), None, 0.0, 20_000, &settings, 12).unwrap();
    let m = out.session.max_ratio;
    assert!(m <= sup_ratio(&task) * (1.0 + 1e-9));
    let rate = out.session.acceptance_rate();
    assert!((rate * m - 1.0).abs() < 0.1, "rate {rate}, 1/M {}", 1.0 / m);
}

#[test]
fn burn_in_maximum_grows_with_more_draws() {
    let task = wide_fake_task();
    let id = IdentityExtractor { dim: 1 };
    let oracle = OracleRatio(&task);
    let mut last = 0.0;
    for n in [10, 100, 1000, 10_000] {
        let mut rng = cdrs::seed::derive_rng(5, "burn", None);
        let mut stream = ProposalStream::new(&task, &id, None, 0.0).unwrap();
        let m = burn_in_max(&oracle, &mut stream, n, usize::MAX, &mut rng).unwrap();
        assert!(m >= last);
        last = m;
    }
    assert!(last > 0.95 * sup_ratio(&task));
}

#[test]
fn infinite_zeta_matches_disabled_filter() {
    let task = ConditionalGaussianTask::new(TaskSpec::continuous_benchmark()).unwrap();
    let id = IdentityExtractor { dim: 2 };
    let settings = SamplerSettings {
        burn_in: 500,
        ..SamplerSettings::default()
    };
    let oracle = OracleRatio(&task);
    let off = sample_label(&task, &id, &oracle, None, 0.4, 300, &settings, 9).unwrap();
    let f = VicinityFilter::new(f64::INFINITY, &FirstAxis).unwrap();
    let inf = sample_label(&task, &id, &oracle, Some(f), 0.4, 300, &settings, 9).unwrap();
    assert_eq!(off, inf);
}

#[test]
fn filter_narrows_actual_labels() {
    let task = ConditionalGaussianTask::new(TaskSpec::continuous_benchmark()).unwrap();
    let id = IdentityExtractor { dim: 2 };
    let settings = SamplerSettings {
        burn_in: 500,
        ..SamplerSettings::default()
    };
    let f = VicinityFilter::new(0.05, &FirstAxis).unwrap();
    let out = sample_label(&task, &id, &ConstantRatio(1.0), Some(f), 0.5, 2000, &settings, 4).unwrap();
    assert!(out
        .samples
        .iter()
        .all(|s| (s.proposal.predicted.unwrap() - 0.5).abs() <= 0.05));
    assert!(out.raw_draws > 2000);
}

#[test]
fn results_do_not_depend_on_threads_or_label_order() {
    let task = ConditionalGaussianTask::new(TaskSpec::class_benchmark()).unwrap();
    let id = IdentityExtractor { dim: 2 };
    let settings = SamplerSettings {
        burn_in: 200,
        ..SamplerSettings::default()
    };
    let oracle = OracleRatio(&task);
    let labels = [0.0, 3.0, 7.0, 9.0];
    let serial = run_conditional_subsampling(&task, &id, &oracle, None, &labels, 100, &settings, 21, 1);
    let reversed: Vec<f64> = labels.iter().rev().copied().collect();
    let parallel = run_conditional_subsampling(&task, &id, &oracle, None, &reversed, 100, &settings, 21, 3);
    for (y, r) in &serial {
        let (_, p) = parallel.iter().find(|(z, _)| z == y).unwrap();
        assert_eq!(r.as_ref().unwrap(), p.as_ref().unwrap());
    }
}

#[test]
fn unreachable_vicinity_exhausts_the_budget() {
    let task = wide_fake_task();
    let id = IdentityExtractor { dim: 1 };
    let pred = Fixed(vec![100.0]);
    let f = VicinityFilter::new(0.1, &pred).unwrap();
    let settings = SamplerSettings {
        burn_in: 10,
        budget_factor: 20,
        frozen_m: false,
    };
    let err = sample_label(&task, &id, &ConstantRatio(1.0), Some(f), 0.0, 50, &settings, 1).unwrap_err();
    assert!(matches!(err, Error::BudgetExhausted { accepted: 0, .. }), "{err}");
}

#[test]
fn tiny_ratios_exhaust_the_budget_after_burn_in() {
    // One proposal in a million carries all the mass; the rest are near zero.
    struct Spiky;
    impl cdrs::sampler::RatioScorer for Spiky {
        fn score_batch(&self, f: ArrayView2<f64>, _y: f64) -> cdrs::Result<Vec<f64>> {
            Ok(f.column(0)
                .iter()
                .map(|v| if *v > 4.0 { 1e6 } else { 1e-9 })
                .collect())
        }
    }
    let task = ConditionalGaussianTask::new(TaskSpec::gaussian_1d(0.0, 0.0, 2)).unwrap();
    let id = IdentityExtractor { dim: 1 };
    let settings = SamplerSettings {
        burn_in: 100_000,
        budget_factor: 10,
        frozen_m: false,
    };
    let err = sample_label(&task, &id, &Spiky, None, 0.0, 1000, &settings, 2).unwrap_err();
    match err {
        Error::BudgetExhausted { proposed, .. } => assert!(proposed <= 10_000 + 4096),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn zero_ratio_model_is_degenerate() {
    let task = wide_fake_task();
    let id = IdentityExtractor { dim: 1 };
    let settings = SamplerSettings {
        burn_in: 50,
        ..SamplerSettings::default()
    };
    let err = sample_label(&task, &id, &ConstantRatio(0.0), None, 0.0, 10, &settings, 1).unwrap_err();
    assert!(matches!(err, Error::DegenerateModel { draws: 50, .. }), "{err}");
}

#[test]
fn mismatched_extractor_is_rejected() {
    let task = wide_fake_task();
    let id = IdentityExtractor { dim: 2 };
    assert!(ProposalStream::new(&task, &id, None, 0.0).is_err());
}
