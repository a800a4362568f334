use std::sync::OnceLock;

use cdrs::features::{
    sae_loss, train_classifier, train_sae, train_sae_from, ClassifierTrainConfig, FeatureExtractor,
    LabelPredictor, OptimizerKind, SaeTrainConfig, SparseAutoencoder,
};
use cdrs::synthetic::{ConditionalGaussianTask, TaskSpec};
use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// 16-pixel "images" holding one Gaussian bump whose position encodes the
/// label, plus pixel noise.
fn bump_images(n: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let x = Array2::from_shape_fn((n, 16), |(i, j)| {
        let centre = 2.0 + 11.0 * y[i];
        let z: f64 = StandardNormal.sample(&mut rng);
        (-(j as f64 - centre).powi(2) / 4.5).exp() + 0.05 * z
    });
    (x, y)
}

fn mse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    (&a - &b).mapv(|v| v * v).mean().unwrap()
}

fn image_config(lambda_prime: f64) -> SaeTrainConfig {
    SaeTrainConfig {
        lambda_prime,
        optimizer: OptimizerKind::Adam,
        lr: 1e-3,
        epochs: 60,
        lr_decay_every: 40,
        batch_size: 128,
        seed: 17,
        ..SaeTrainConfig::default()
    }
}

struct ImageRuns {
    train: (Array2<f64>, Vec<f64>),
    test: (Array2<f64>, Vec<f64>),
    /// Trained at λ′ = 0, 1e-3, 1e-2.
    saes: Vec<SparseAutoencoder>,
}

fn image_runs() -> &'static ImageRuns {
    static RUNS: OnceLock<ImageRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let train = bump_images(3000, 1);
        let test = bump_images(1000, 2);
        let saes = [0.0, 1e-3, 1e-2]
            .iter()
            .map(|&l| train_sae(train.0.view(), &train.1, &image_config(l)).unwrap().0)
            .collect();
        ImageRuns { train, test, saes }
    })
}

fn near_zero_fraction(sae: &SparseAutoencoder, x: ArrayView2<f64>) -> f64 {
    let h = sae.extract_batch(x).unwrap();
    h.iter().filter(|v| v.abs() < 1e-3).count() as f64 / h.len() as f64
}

#[test]
fn loss_examples() {
    assert_eq!(
        sae_loss(&[0.1, 0.2], &[0.1, 0.2], 0.4, 0.4, &[0.0, 0.0], 1e-3).unwrap(),
        0.0
    );
    assert!((sae_loss(&[0.0; 4], &[0.0; 4], 0.0, 0.0, &[1.0; 4], 1e-3).unwrap() - 1e-3).abs() < 1e-15);
    assert_eq!(
        sae_loss(&[1.0, 0.0], &[0.0, 0.0], 2.0, 1.0, &[0.0, 0.0], 0.0).unwrap(),
        1.5
    );
    // Doubling λ′ adds exactly λ′ ‖h‖₁ / D.
    let h = [0.5, 0.0, 2.0];
    let a = sae_loss(&[1.0, 2.0, 3.0], &[0.5, 2.0, 2.0], 0.2, 0.7, &h, 0.01).unwrap();
    let b = sae_loss(&[1.0, 2.0, 3.0], &[0.5, 2.0, 2.0], 0.2, 0.7, &h, 0.02).unwrap();
    assert!((b - a - 0.01 * 2.5 / 3.0).abs() < 1e-15);
}

#[test]
fn reconstruction_error_halves_on_held_out_images() {
    let runs = image_runs();
    let (x, y) = &runs.train;
    let (xt, _) = &runs.test;
    let untrained = train_sae(
        x.view(),
        y,
        &SaeTrainConfig {
            epochs: 0,
            ..image_config(1e-3)
        },
    )
    .unwrap()
    .0;
    let before = mse(untrained.reconstruct(xt.view()).unwrap().view(), xt.view());
    for sae in &runs.saes {
        let after = mse(sae.reconstruct(xt.view()).unwrap().view(), xt.view());
        println!("reconstruction {before:.4} -> {after:.4}");
        assert!(after <= 0.5 * before, "{before} -> {after}");
    }
}

#[test]
fn predictor_recovers_labels_on_held_out_images() {
    let runs = image_runs();
    let (xt, yt) = &runs.test;
    let sae = &runs.saes[1];
    let pred = sae.predict_batch(xt.view()).unwrap();
    let mae = pred.iter().zip(yt).map(|(p, y)| (p - y).abs()).sum::<f64>() / yt.len() as f64;
    println!("predictor MAE {mae:.4}");
    assert!(mae < 0.05, "MAE {mae}");
    assert!(pred.iter().all(|&p| p >= 0.0));
}

#[test]
fn sparsity_grows_with_lambda() {
    let runs = image_runs();
    let xt = runs.test.0.view();
    let fr: Vec<f64> = runs.saes.iter().map(|s| near_zero_fraction(s, xt)).collect();
    println!("near-zero fractions {fr:?}");
    assert!(fr.windows(2).all(|w| w[1] >= w[0]), "{fr:?}");
}

#[test]
fn features_are_nonnegative_equal_width_and_deterministic() {
    let runs = image_runs();
    let xt = runs.test.0.view();
    for sae in &runs.saes {
        let h = sae.extract_batch(xt).unwrap();
        assert_eq!(h.dim(), xt.dim());
        assert!(h.iter().all(|&v| v >= 0.0));
        assert_eq!(sae.extract_batch(xt).unwrap(), h);
        assert_eq!(sae.extract(&xt.row(3).to_vec()).unwrap(), h.row(3).to_vec());
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (x, y) = bump_images(300, 3);
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let cfg = SaeTrainConfig {
            lr: 0.0,
            epochs: 3,
            optimizer,
            ..SaeTrainConfig::default()
        };
        let start = SparseAutoencoder::init(16, 4).unwrap();
        let (end, history) = train_sae_from(start.clone(), x.view(), &y, &cfg).unwrap();
        assert_eq!(end, start);
        assert_eq!(history.len(), 3 * 2);
    }
}

#[test]
fn training_is_seed_deterministic() {
    let (x, y) = bump_images(400, 5);
    let cfg = SaeTrainConfig {
        epochs: 3,
        ..image_config(1e-3)
    };
    let (a, ha) = train_sae(x.view(), &y, &cfg).unwrap();
    let (b, hb) = train_sae(x.view(), &y, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
}

#[test]
fn training_rejects_bad_inputs() {
    let (x, y) = bump_images(50, 6);
    let cfg = SaeTrainConfig {
        epochs: 1,
        ..SaeTrainConfig::default()
    };
    let mut big = y.clone();
    big[0] = 1.5;
    assert!(train_sae(x.view(), &big, &cfg).is_err());
    assert!(train_sae(x.view(), &y[..10], &cfg).is_err());
    let neg = SaeTrainConfig {
        lambda_prime: -1.0,
        ..cfg
    };
    assert!(train_sae(x.view(), &y, &neg).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let runs = image_runs();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sae.ckpt");
    runs.saes[1].save(&path).unwrap();
    let back = SparseAutoencoder::load(&path).unwrap();
    assert_eq!(&back, &runs.saes[1]);
    let xt = runs.test.0.view();
    assert_eq!(
        back.extract_batch(xt).unwrap(),
        runs.saes[1].extract_batch(xt).unwrap()
    );
}

#[test]
fn classifier_features_separate_classes() {
    let task = ConditionalGaussianTask::new(TaskSpec::class_benchmark()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for k in 0..10 {
        for d in task.sample_real(k as f64, 300, &mut rng).unwrap() {
            rows.extend(d.features);
            classes.push(k as f64);
        }
    }
    let x = Array2::from_shape_vec((classes.len(), 2), rows).unwrap();
    let cfg = ClassifierTrainConfig {
        epochs: 20,
        ..ClassifierTrainConfig::default()
    };
    let (clf, history) = train_classifier(x.view(), &classes, 10, &cfg).unwrap();
    assert!(history.last().unwrap() < &history[0]);
    let h = clf.extract_batch(x.view()).unwrap();
    assert_eq!(h.ncols(), 2);
    assert!(h.iter().all(|&v| v >= 0.0));
    // Class means of the features move monotonically along the label axis on average.
    let first = h.slice(ndarray::s![..300, ..]).mean_axis(Axis(0)).unwrap();
    let last = h.slice(ndarray::s![2700.., ..]).mean_axis(Axis(0)).unwrap();
    assert!((&first - &last).mapv(f64::abs).sum() > 0.1);
}
