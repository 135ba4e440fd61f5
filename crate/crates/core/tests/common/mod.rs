#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repaintlab::denoiser::{Denoiser, DenoiserConfig};

/// Micro denoiser whose zero-initialized projections are replaced by small
/// random weights, so its outputs are non-trivial without training.
pub fn perturbed_micro(seed: u64) -> Denoiser {
    let mut model = Denoiser::new(DenoiserConfig::micro(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, p) in model.params.iter_mut() {
        if p.data().iter().all(|&v| v == 0.0) {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.05..0.05));
        }
    }
    model
}

/// Worst norm-wise relative error between tape gradients and central finite
/// differences (f64, step 1e-5) of a loss on the micro denoiser that touches
/// both output heads. At most `probes` coordinates are probed per tensor.
pub fn denoiser_gradcheck(seed: u64, probes: usize) -> f64 {
    use ndcore::{NdArray, ParamSet, Tape};
    use repaintlab::denoiser::{bind, forward_tape};

    let model = perturbed_micro(seed);
    let cfg = model.config.clone();
    let params: ParamSet<f64> = model.params.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let s = cfg.input_size;
    let shape = [2, 1, s, s];
    let x = NdArray::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let target = NdArray::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let weight = NdArray::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let t = [
        rng.random_range(1..=cfg.diffusion_steps),
        rng.random_range(1..=cfg.diffusion_steps),
    ];

    let record = |tape: &mut Tape<f64>, p: &ParamSet<f64>, trainable: bool| {
        let bound = bind(tape, p, trainable);
        let xv = tape.constant(x.clone());
        let (eps, logits) = forward_tape(&cfg, tape, &bound, xv, &t).unwrap();
        let d = tape.add_const(eps, &target).unwrap();
        let sq = tape.square(d).unwrap();
        let a = tape.mean(sq).unwrap();
        let v = tape.sigmoid(logits).unwrap();
        let vw = tape.mul_const(v, weight.clone()).unwrap();
        let b = tape.mean(vw).unwrap();
        tape.add(a, b).unwrap()
    };
    let eval = |p: &ParamSet<f64>| {
        let mut tape = Tape::new();
        let loss = record(&mut tape, p, false);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let loss = record(&mut tape, &params, true);
    let grads = tape.backprop_all(loss).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, value) in params.iter() {
        let g = grads.get(name).unwrap();
        let stride = (value.len() / probes).max(1);
        let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
        for i in (0..value.len()).step_by(stride) {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = g.data()[i];
            diff += (a - fd).powi(2);
            na += a * a;
            nf += fd * fd;
        }
        let scale = na.sqrt().max(nf.sqrt());
        if scale > 1e-10 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    worst
}

/// A 32x32 denoiser small enough for end-to-end tests, perturbed like
/// [`perturbed_micro`].
pub fn perturbed_small(seed: u64) -> Denoiser {
    let cfg = DenoiserConfig {
        input_size: 32,
        base_channels: 4,
        channel_mult: vec![1, 2],
        res_blocks_encoder: vec![1, 1],
        attention_resolutions: vec![],
        time_embed_dim: 8,
        diffusion_steps: 4,
        ..DenoiserConfig::default()
    };
    let mut model = Denoiser::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, p) in model.params.iter_mut() {
        if p.data().iter().all(|&v| v == 0.0) {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.05..0.05));
        }
    }
    model
}
