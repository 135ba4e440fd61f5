mod common;

use ndcore::NdArray;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use repaintlab::denoiser::{Denoiser, DenoiserConfig};
use repaintlab::diffusion::{
    batch_gradients, generate, loss, train, train_with, NoSink, NoiseSchedule, TrainConfig,
};
use repaintlab::image::{ImagePatch, PatchKind};
use repaintlab::par::ExecMode;
use repaintlab::rng::SeedStream;

fn randn(shape: [usize; 4], rng: &mut repaintlab::rng::Rng) -> NdArray<f32> {
    NdArray::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z as f32
    })
}

/// Closed-form marginal against t applications of the one-step kernel:
/// both must give mean sqrt(abar) x0 and variance 1 - abar.
#[test]
fn marginal_matches_iterated_kernel() {
    let steps = 32;
    let s = NoiseSchedule::cosine(steps).unwrap();
    let n = 20_000;
    let x0 = NdArray::full([n, 1, 1, 1], 0.7f32);
    let mut rng = SeedStream::new(1).rng();
    for t in [1, steps / 2, steps] {
        let direct = s.q_sample(&x0, t, &randn([n, 1, 1, 1], &mut rng)).unwrap();
        let mut walk = x0.clone();
        for k in 1..=t {
            walk = s
                .forward_step(&walk, k, &randn([n, 1, 1, 1], &mut rng))
                .unwrap();
        }
        let ab = s.alpha_bar(t);
        for sample in [&direct, &walk] {
            let m = sample.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let v = sample
                .data()
                .iter()
                .map(|&v| (v as f64 - m).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            assert!((m - 0.7 * ab.sqrt()).abs() < 0.02, "t={t} mean {m}");
            assert!((v - (1.0 - ab)).abs() < 0.03, "t={t} var {v}");
        }
    }
}

/// With the true noise, the model mean equals the exact posterior mean.
#[test]
fn oracle_noise_gives_posterior_mean() {
    let s = NoiseSchedule::cosine(64).unwrap();
    let mut rng = SeedStream::new(2).rng();
    let x0 = NdArray::from_fn([1, 1, 4, 4], |_| rng.random_range(-0.9f32..0.9));
    let eps = randn([1, 1, 4, 4], &mut rng);
    for t in [2, 10, 40, 64] {
        let x_t = s.q_sample(&x0, t, &eps).unwrap();
        let from_eps = s.model_mean(&x_t, &eps, t).unwrap();
        let truth = s.posterior_mean(&x0, &x_t, t).unwrap();
        for (a, b) in from_eps.data().iter().zip(truth.data()) {
            assert!((a - b).abs() < 1e-5, "t={t}: {a} vs {b}");
        }
    }
}

#[test]
fn posterior_coefficients_match_scalar_formulas() {
    let s = NoiseSchedule::cosine(16).unwrap();
    for t in 2..=16 {
        let (b, a, ab, abp) = (s.beta(t), s.alpha(t), s.alpha_bar(t), s.alpha_bar(t - 1));
        assert!((s.posterior_coef_x0(t) - abp.sqrt() * b / (1.0 - ab)).abs() < 1e-12);
        assert!((s.posterior_coef_xt(t) - a.sqrt() * (1.0 - abp) / (1.0 - ab)).abs() < 1e-12);
        assert!((s.posterior_variance(t) - b * (1.0 - abp) / (1.0 - ab)).abs() < 1e-12);
    }
}

#[test]
fn fresh_network_loss_is_noise_energy() {
    // A zero noise prediction makes the simple loss the mean squared noise.
    let model = Denoiser::new(DenoiserConfig::micro(), 0).unwrap();
    let s = NoiseSchedule::cosine(model.config.diffusion_steps).unwrap();
    let x0 = NdArray::full([16, 1, 8, 8], 0.2f32);
    let terms = loss(&s, &model, &x0, 0.001, &mut SeedStream::new(3).rng()).unwrap();
    assert!((terms.simple - 1.0).abs() < 0.1, "{terms:?}");
}

#[test]
fn loss_terms_are_nonnegative() {
    let model = common::perturbed_micro(4);
    let s = NoiseSchedule::cosine(model.config.diffusion_steps).unwrap();
    for seed in 0..100 {
        let mut rng = SeedStream::new(seed).rng();
        let x0 = NdArray::from_fn([2, 1, 8, 8], |_| rng.random_range(-1.0f32..1.0));
        let terms = loss(&s, &model, &x0, 0.001, &mut rng).unwrap();
        assert!(
            terms.simple >= 0.0 && terms.vlb >= -1e-6 && terms.total >= 0.0,
            "seed {seed}: {terms:?}"
        );
    }
}

#[test]
fn micro_denoiser_matches_finite_differences() {
    for seed in 0..3 {
        let err = common::denoiser_gradcheck(seed, 6);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn shard_gradients_do_not_depend_on_mode() {
    let model = common::perturbed_micro(5);
    let s = NoiseSchedule::cosine(model.config.diffusion_steps).unwrap();
    let mut rng = SeedStream::new(6).rng();
    let x0 = NdArray::from_fn([7, 1, 8, 8], |_| rng.random_range(-1.0f32..1.0));
    let noise = randn([7, 1, 8, 8], &mut rng);
    let t = [1, 3, 5, 7, 9, 11, 16];
    let a = batch_gradients(
        &s,
        &model.config,
        &model.params,
        &x0,
        &t,
        &noise,
        0.001,
        ExecMode::Parallel,
    )
    .unwrap();
    let b = batch_gradients(
        &s,
        &model.config,
        &model.params,
        &x0,
        &t,
        &noise,
        0.001,
        ExecMode::Sequential,
    )
    .unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

fn tiny_data(n: usize) -> Vec<ImagePatch> {
    (0..n)
        .map(|i| {
            let mut rng = SeedStream::new(100 + i as u64).rng();
            let data = (0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            ImagePatch::from_vec(8, 8, data, PatchKind::Real).unwrap()
        })
        .collect()
}

#[test]
fn training_is_reproducible_across_modes() {
    let cfg = TrainConfig {
        steps: 6,
        batch_size: 5,
        learning_rate: 1e-3,
        seed: 9,
        ..Default::default()
    };
    let s = NoiseSchedule::cosine(16).unwrap();
    let data = tiny_data(12);
    let init = || Denoiser::new(DenoiserConfig::micro(), 1).unwrap();
    let a = train_with(&cfg, &s, init(), &data, &mut NoSink, ExecMode::Parallel).unwrap();
    let b = train_with(&cfg, &s, init(), &data, &mut NoSink, ExecMode::Sequential).unwrap();
    assert_eq!(a.ema.params, b.ema.params);
    assert_eq!(a.loss_simple, b.loss_simple);
    let c = train(&cfg, &s, init(), &data, &mut NoSink).unwrap();
    assert_eq!(a.ema.hash(), c.ema.hash());
    assert_ne!(a.last.params, init().params);
    let other = train(
        &TrainConfig { seed: 10, ..cfg },
        &s,
        init(),
        &data,
        &mut NoSink,
    )
    .unwrap();
    assert_ne!(other.ema.hash(), a.ema.hash());
}

#[test]
fn training_rejects_mismatched_inputs() {
    let cfg = TrainConfig {
        steps: 1,
        ..Default::default()
    };
    let model = || Denoiser::new(DenoiserConfig::micro(), 1).unwrap();
    let wrong = NoiseSchedule::cosine(8).unwrap();
    assert!(train(&cfg, &wrong, model(), &tiny_data(2), &mut NoSink).is_err());
    let s = NoiseSchedule::cosine(16).unwrap();
    let big = vec![ImagePatch::filled(16, 16, 0.0, PatchKind::Real)];
    assert!(train(&cfg, &s, model(), &big, &mut NoSink).is_err());
    assert!(train(&cfg, &s, model(), &[], &mut NoSink).is_err());
    let bad = TrainConfig {
        vlb_weight: 2.0,
        ..cfg
    };
    assert!(train(&bad, &s, model(), &tiny_data(2), &mut NoSink).is_err());
}

#[test]
fn samples_have_model_shape_and_range() {
    let model = common::perturbed_micro(7);
    let s = NoiseSchedule::cosine(model.config.diffusion_steps).unwrap();
    let a = generate(&s, &model, 3, 11, ExecMode::Parallel).unwrap();
    let b = generate(&s, &model, 3, 11, ExecMode::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    for p in &a {
        assert_eq!((p.height(), p.width()), (8, 8));
        assert!(p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert_ne!(a[0], a[1]);
}
