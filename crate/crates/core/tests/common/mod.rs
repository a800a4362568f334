#![allow(dead_code)]

use cdrs::cdre::{objective_grad, ConditionEmbedding, LabelNorm, RatioArchitecture, RatioModel};
use cdrs::features::{InputScaling, SparseAutoencoder};
use cdrs::nn::{FinalActivation, Gradients, MlpNetwork, Mode};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Gradients smaller than this are compared absolutely: relative error is
/// meaningless once finite-difference roundoff dominates.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Outcome of one finite-difference sweep over every parameter.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates where the step straddled a rectifier kink: the two step
    /// sizes disagree, so no derivative exists to compare against.
    pub kinks: usize,
}

impl GradCheck {
    pub fn merge(self, o: GradCheck) -> GradCheck {
        GradCheck {
            max_rel: self.max_rel.max(o.max_rel),
            checked: self.checked + o.checked,
            kinks: self.kinks + o.kinks,
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

/// Central differences of `f` against `analytic` for the parameters of the
/// network `get` selects inside `state`.
pub fn check_network<S>(
    state: &mut S,
    get: impl Fn(&mut S) -> &mut MlpNetwork,
    analytic: &Gradients,
    f: &mut dyn FnMut(&S) -> f64,
    step: f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    let lens = get(state).param_lens();
    let grads = analytic.slices();
    for (t, &len) in lens.iter().enumerate() {
        for j in 0..len {
            let mut eval = |delta: f64, state: &mut S| {
                get(state).param_slices_mut()[t][j] += delta;
                let v = f(state);
                get(state).param_slices_mut()[t][j] -= delta;
                v
            };
            let mut central = |h: f64| (eval(h, state) - eval(-h, state)) / (2.0 * h);
            let (d1, d2, d4) = (central(step), central(step / 2.0), central(step / 4.0));
            // Richardson extrapolation cancels the O(step²) truncation term;
            // two extrapolations that disagree mean a kink inside the step.
            let coarse = (4.0 * d2 - d1) / 3.0;
            let fd = (4.0 * d4 - d2) / 3.0;
            if (coarse - fd).abs() > 1e-8 + 1e-7 * fd.abs() {
                out.kinks += 1;
                continue;
            }
            out.checked += 1;
            out.max_rel = out.max_rel.max(rel_err(grads[t][j], fd));
        }
    }
    out
}

/// Random biases everywhere: the zero-bias init puts rows whose previous
/// layer is fully rectified exactly on a kink, where no derivative exists.
fn jitter_biases(net: &mut MlpNetwork, rng: &mut ChaCha8Rng) {
    for layer in net.layers_mut() {
        for b in layer.bias.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *b = 0.1 * z;
        }
    }
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// A random small ratio model with a random real/fake batch, checked in train
/// mode (dropout masks replayed from a cloned generator).
pub fn ratio_gradient_instance(seed: u64, step: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..=3);
    let classes = rng.random_range(2..=4);
    let embedding = if rng.random_bool(0.5) {
        ConditionEmbedding::OneHot { num_classes: classes }
    } else {
        ConditionEmbedding::Continuous {
            scales: vec![1.0, 2.0],
        }
    };
    let groups = [None, Some(2)][rng.random_range(0..2)];
    let depth = rng.random_range(1..=3);
    let arch = RatioArchitecture {
        hidden: (0..depth).map(|_| 2 * rng.random_range(2..=4)).collect(),
        norm_groups: groups,
        dropout: [0.0, 0.3][rng.random_range(0..2)],
    };
    let mut model = RatioModel::new(dim, embedding.clone(), LabelNorm::IDENTITY, &arch, &mut rng).unwrap();
    jitter_biases(model.network_mut(), &mut rng);
    // Positive output bias keeps the final rectifier active for most rows.
    model.network_mut().layers_mut().last_mut().unwrap().bias[0] = 0.5 + rng.random::<f64>();
    let nr = rng.random_range(2..=5);
    let nf = rng.random_range(2..=5);
    let features = normal_matrix(nr + nf, dim, 1.0, &mut rng);
    let labels: Vec<f64> = (0..nr + nf)
        .map(|_| match embedding {
            ConditionEmbedding::OneHot { num_classes } => rng.random_range(0..num_classes) as f64,
            ConditionEmbedding::Continuous { .. } => rng.random(),
        })
        .collect();
    let lambda = rng.random_range(0.0..0.1);
    let x = model.inputs(features.view(), &labels).unwrap();
    let dropout_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);

    let objective = |m: &RatioModel| {
        let (out, _) = m
            .network()
            .forward_batch(x.view(), Mode::Train, &mut dropout_rng.clone())
            .unwrap();
        let s = out.column(0).to_vec();
        objective_grad(&s[nr..], &s[..nr], lambda).unwrap().value
    };
    let (out, tape) = model
        .network()
        .forward_batch(x.view(), Mode::Train, &mut dropout_rng.clone())
        .unwrap();
    let s = out.column(0).to_vec();
    let g = objective_grad(&s[nr..], &s[..nr], lambda).unwrap();
    let og = Array2::from_shape_vec((nr + nf, 1), g.real.iter().chain(&g.fake).copied().collect()).unwrap();
    let (grads, _) = model.network().backward(&tape, og.view()).unwrap();
    check_network(
        &mut model,
        |m| m.network_mut(),
        &grads,
        &mut |m: &RatioModel| objective(m),
        step,
    )
}

/// A random small SAE with random inputs, labels and input scaling.
pub fn sae_gradient_instance(seed: u64, step: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..=3);
    let mut sae = SparseAutoencoder::init(dim, seed).unwrap();
    let shift = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let scale = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
    sae = sae
        .with_input_scaling(InputScaling::new(shift, scale).unwrap())
        .unwrap();
    for net in [&mut sae.encoder, &mut sae.decoder, &mut sae.predictor] {
        jitter_biases(net, &mut rng);
    }
    for net in [&mut sae.encoder, &mut sae.predictor] {
        for b in net.layers_mut().last_mut().unwrap().bias.iter_mut() {
            *b = 0.3 + rng.random::<f64>();
        }
    }
    let n = rng.random_range(2..=6);
    let x = normal_matrix(n, dim, 1.0, &mut rng);
    let y: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let lambda = [0.0, 1e-3, 1e-2, 0.5][rng.random_range(0..4)];
    let (_, g) = sae.loss_and_grads(x.view(), &y, lambda).unwrap();
    let mut loss = |s: &SparseAutoencoder| s.loss_and_grads(x.view(), &y, lambda).unwrap().0.total;
    check_network(&mut sae, |s| &mut s.encoder, &g.encoder, &mut loss, step)
        .merge(check_network(
            &mut sae,
            |s| &mut s.decoder,
            &g.decoder,
            &mut loss,
            step,
        ))
        .merge(check_network(
            &mut sae,
            |s| &mut s.predictor,
            &g.predictor,
            &mut loss,
            step,
        ))
}

/// Plain network gradient of `sum(c ⊙ output)`, used for the 4-8-1 and
/// group-norm checks.
pub fn network_gradient_instance(
    seed: u64,
    dims: &[usize],
    groups: Option<usize>,
    act: FinalActivation,
    step: f64,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = MlpNetwork::new(dims, groups, 0.0, act, &mut rng).unwrap();
    jitter_biases(&mut net, &mut rng);
    let x = normal_matrix(5, dims[0], 1.0, &mut rng);
    let c = normal_matrix(5, *dims.last().unwrap(), 1.0, &mut rng);
    let (_, tape) = net.forward_batch(x.view(), Mode::Eval, &mut rng).unwrap();
    let (grads, _) = net.backward(&tape, c.view()).unwrap();
    let mut f = |n: &MlpNetwork| (n.predict(x.view()).unwrap() * &c).sum();
    check_network(&mut net, |n| n, &grads, &mut f, step)
}
