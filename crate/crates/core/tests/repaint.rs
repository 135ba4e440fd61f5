mod common;

use ndcore::NdArray;
use repaintlab::diffusion::{generate_one, NoiseSchedule};
use repaintlab::image::{ImagePatch, PatchKind};
use repaintlab::repaint::{composite, make_plan, repaint, repaint_seeded, Mask, Transition};
use repaintlab::rng::SeedStream;
use repaintlab::synthlab::{class_specs, generate_patch, make_mask};

#[test]
fn plan_invariants_hold_exhaustively() {
    for steps in 1..=64 {
        for jump in 1..=8 {
            let plan = make_plan(steps, jump).unwrap();
            assert_eq!(plan.len(), steps * (2 * jump - 1));
            assert_eq!(*plan.transitions.last().unwrap(), Transition::Denoise(1));
            for t in 1..=steps {
                let d = plan
                    .transitions
                    .iter()
                    .filter(|&&x| x == Transition::Denoise(t))
                    .count();
                let r = plan
                    .transitions
                    .iter()
                    .filter(|&&x| x == Transition::Renoise(t))
                    .count();
                assert_eq!((d, r), (jump, jump - 1), "T={steps} j={jump} t={t}");
            }
            // Walking the plan moves the chain one step at a time from T to 0.
            let mut cur = steps;
            for tr in &plan.transitions {
                match *tr {
                    Transition::Denoise(t) => {
                        assert_eq!(t, cur);
                        cur -= 1;
                    }
                    Transition::Renoise(t) => {
                        assert_eq!(t, cur + 1);
                        cur += 1;
                    }
                }
            }
            assert_eq!(cur, 0);
            assert_eq!(make_plan(steps, jump).unwrap(), plan);
        }
    }
}

/// Synthetic texture for generator sizes, a random raster for micro models.
fn synthetic(seed: u64, size: usize) -> ImagePatch {
    if size >= 32 {
        return generate_patch(&class_specs(8)[(seed % 8) as usize], size, seed)
            .unwrap()
            .0;
    }
    let data = state(seed, size)
        .map(|v| (0.5 * v).clamp(-1.0, 1.0))
        .into_data();
    ImagePatch::from_vec(size, size, data, PatchKind::Real).unwrap()
}

fn state(seed: u64, size: usize) -> NdArray<f32> {
    let mut rng = SeedStream::new(seed).rng();
    NdArray::from_fn([1, 1, size, size], |_| {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        z as f32
    })
}

#[test]
fn composite_endpoints_and_checkerboard() {
    let schedule = NoiseSchedule::cosine(16).unwrap();
    let size = 32;
    let x0 = synthetic(1, size);
    let x_t = state(2, size);
    let t = 7;
    let x0_4d = x0.pixels().clone().reshape([1, 1, size, size]).unwrap();

    let rng0 = SeedStream::new(17).rng();
    let noise = state_from(&mut rng0.clone(), size);
    let known_t = schedule.q_sample(&x0_4d, t, &noise).unwrap();

    let ones = composite(
        &schedule,
        &x_t,
        &x0,
        &Mask::all_known(size),
        t,
        &mut rng0.clone(),
    )
    .unwrap();
    assert_eq!(ones, known_t);
    let zeros = composite(
        &schedule,
        &x_t,
        &x0,
        &Mask::all_hole(size),
        t,
        &mut rng0.clone(),
    )
    .unwrap();
    assert_eq!(zeros, x_t);

    let checker: Vec<bool> = (0..size * size)
        .map(|i| (i % size + i / size) % 2 == 0)
        .collect();
    let mask = Mask::new(size, checker.clone()).unwrap();
    let mixed = composite(&schedule, &x_t, &x0, &mask, t, &mut rng0.clone()).unwrap();
    for (i, &c) in checker.iter().enumerate() {
        let want = if c { known_t.data()[i] } else { x_t.data()[i] };
        assert_eq!(mixed.data()[i], want, "pixel {i}");
    }
}

fn state_from(rng: &mut repaintlab::rng::Rng, size: usize) -> NdArray<f32> {
    NdArray::from_fn([1, 1, size, size], |_| {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        z as f32
    })
}

#[test]
fn composite_draws_fresh_noise_each_call() {
    let schedule = NoiseSchedule::cosine(16).unwrap();
    let x0 = synthetic(3, 32);
    let x_t = state(4, 32);
    let mut rng = SeedStream::new(5).rng();
    let a = composite(&schedule, &x_t, &x0, &Mask::all_known(32), 8, &mut rng).unwrap();
    let b = composite(&schedule, &x_t, &x0, &Mask::all_known(32), 8, &mut rng).unwrap();
    assert_ne!(a, b);
}

#[test]
fn composite_rejects_mismatched_mask() {
    let schedule = NoiseSchedule::cosine(16).unwrap();
    let x0 = synthetic(3, 32);
    let mut rng = SeedStream::new(5).rng();
    assert!(composite(
        &schedule,
        &state(1, 32),
        &x0,
        &Mask::all_known(16),
        8,
        &mut rng
    )
    .is_err());
}

#[test]
fn known_region_is_bit_identical() {
    let model = common::perturbed_micro(3);
    let schedule = NoiseSchedule::cosine(model.config.diffusion_steps).unwrap();
    for seed in 0..12u64 {
        let x0 = synthetic(seed, 8);
        let known: Vec<bool> = (0..64)
            .map(|i| !(i * 7 + seed as usize).is_multiple_of(5))
            .collect();
        let mask = Mask::new(8, known).unwrap();
        let out = repaint_seeded(&schedule, &model, &x0, &mask, 2, seed).unwrap();
        assert_eq!(out.kind(), PatchKind::Repainted);
        for i in 0..64 {
            if mask.known()[i] {
                assert_eq!(out.data()[i].to_bits(), x0.data()[i].to_bits());
            }
        }
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn fully_known_mask_returns_input() {
    let model = common::perturbed_micro(1);
    let schedule = NoiseSchedule::cosine(model.config.diffusion_steps).unwrap();
    let x0 = synthetic(2, 8);
    let out = repaint_seeded(&schedule, &model, &x0, &Mask::all_known(8), 5, 9).unwrap();
    assert_eq!(out.data(), x0.data());
}

#[test]
fn unconditional_single_jump_equals_generate() {
    let model = common::perturbed_micro(2);
    let schedule = NoiseSchedule::cosine(model.config.diffusion_steps).unwrap();
    let x0 = synthetic(4, 8);
    for seed in 0..3 {
        let stream = SeedStream::new(seed);
        let generated = generate_one(&schedule, &model, &mut stream.rng()).unwrap();
        let repainted = repaint(
            &schedule,
            &model,
            &x0,
            &Mask::all_hole(8),
            1,
            &mut stream.rng(),
            &mut stream.named("other").rng(),
        )
        .unwrap();
        assert_eq!(generated.data(), repainted.data());
    }
}

#[test]
fn repaint_is_deterministic_and_seed_sensitive() {
    let model = common::perturbed_micro(5);
    let schedule = NoiseSchedule::cosine(model.config.diffusion_steps).unwrap();
    let x0 = synthetic(6, 8);
    let mask = Mask::new(8, (0..64).map(|i| i % 3 != 0).collect()).unwrap();
    let a = repaint_seeded(&schedule, &model, &x0, &mask, 3, 1).unwrap();
    assert_eq!(
        a,
        repaint_seeded(&schedule, &model, &x0, &mask, 3, 1).unwrap()
    );
    assert_ne!(
        a,
        repaint_seeded(&schedule, &model, &x0, &mask, 3, 2).unwrap()
    );
}

#[test]
fn repaint_validates_inputs() {
    let model = common::perturbed_micro(5);
    let schedule = NoiseSchedule::cosine(model.config.diffusion_steps).unwrap();
    let x0 = synthetic(6, 32);
    let mask = make_mask(32, 0.2, 1).unwrap();
    assert!(repaint_seeded(&schedule, &model, &x0, &mask, 5, 1).is_err());
    let wrong = NoiseSchedule::cosine(8).unwrap();
    let small = synthetic(6, 8);
    assert!(repaint_seeded(&wrong, &model, &small, &Mask::all_hole(8), 5, 1).is_err());
    assert!(repaint_seeded(&schedule, &model, &small, &Mask::all_hole(8), 0, 1).is_err());
}
