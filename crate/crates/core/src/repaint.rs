//! Inpainting with an unconditional denoiser: at every reverse step the known
//! pixels are replaced by a forward-noised copy of the intact image, and each
//! step is repeated `j` times with re-noising in between.

use std::fmt;

use ndcore::NdArray;

use crate::denoiser::Denoiser;
use crate::diffusion::{randn_like, reverse_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::{ImagePatch, PatchKind};
use crate::par::{self, ExecMode};
use crate::rng::{Rng, SeedStream};

pub use crate::synthlab::Mask;

/// One move of the resampling schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transition {
    /// Reverse step `t -> t-1`.
    Denoise(usize),
    /// Forward kernel step `t-1 -> t`.
    Renoise(usize),
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Transition::Denoise(t) => write!(f, "d({t}->{})", t - 1),
            Transition::Renoise(t) => write!(f, "r({}->{t})", t - 1),
        }
    }
}

/// Ordered transitions for `steps` timesteps with jump length `jump`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepaintPlan {
    pub steps: usize,
    pub jump: usize,
    pub transitions: Vec<Transition>,
}

impl RepaintPlan {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// For t = T..1, `jump` denoise steps separated by `jump - 1` renoise steps.
pub fn make_plan(steps: usize, jump: usize) -> Result<RepaintPlan> {
    if steps == 0 || jump == 0 {
        return Err(Error::invalid(format!(
            "plan needs T >= 1 and j >= 1, got T={steps}, j={jump}"
        )));
    }
    let mut transitions = Vec::with_capacity(steps * (2 * jump - 1));
    for t in (1..=steps).rev() {
        for r in 1..=jump {
            transitions.push(Transition::Denoise(t));
            if r < jump {
                transitions.push(Transition::Renoise(t));
            }
        }
    }
    Ok(RepaintPlan {
        steps,
        jump,
        transitions,
    })
}

fn check_mask(x0: &ImagePatch, mask: &Mask) -> Result<()> {
    if x0.height() != mask.size() || x0.width() != mask.size() {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match patch {}x{}",
            mask.size(),
            mask.size(),
            x0.height(),
            x0.width()
        )));
    }
    Ok(())
}

/// Selects known pixels from `known_t` and the rest from `x_t`.
pub fn select(mask: &Mask, known_t: &NdArray<f32>, x_t: &NdArray<f32>) -> Result<NdArray<f32>> {
    known_t.expect_same_shape(x_t, "composite")?;
    if known_t.len() != mask.known().len() {
        return Err(Error::invalid("mask and state sizes differ"));
    }
    let data = mask
        .known()
        .iter()
        .zip(known_t.data().iter().zip(x_t.data()))
        .map(|(&k, (&a, &b))| if k { a } else { b })
        .collect();
    Ok(NdArray::new(x_t.shape().to_vec(), data)?)
}

/// `M * q_sample(x0_known, t, fresh noise) + (1 - M) * x_t`.
pub fn composite(
    schedule: &NoiseSchedule,
    x_t: &NdArray<f32>,
    x0_known: &ImagePatch,
    mask: &Mask,
    t: usize,
    rng: &mut Rng,
) -> Result<NdArray<f32>> {
    check_mask(x0_known, mask)?;
    let x0 = x0_known.pixels().clone().reshape(x_t.shape().to_vec())?;
    let noise = randn_like(x_t.shape(), rng);
    let known_t = schedule.q_sample(&x0, t, &noise)?;
    select(mask, &known_t, x_t)
}

/// Repaints the hole of `x0_known`. `rng` drives the generative chain
/// (initial noise, reverse-step noise, re-noising); `known_rng` supplies
/// the forward noise of the known image at every composite.
pub fn repaint(
    schedule: &NoiseSchedule,
    model: &Denoiser,
    x0_known: &ImagePatch,
    mask: &Mask,
    jump: usize,
    rng: &mut Rng,
    known_rng: &mut Rng,
) -> Result<ImagePatch> {
    check_mask(x0_known, mask)?;
    if model.config.input_size != mask.size() || model.config.in_channels != 1 {
        return Err(Error::invalid(format!(
            "model expects {0}x{0} single-channel input, patch is {1}x{1}",
            model.config.input_size,
            mask.size()
        )));
    }
    if schedule.steps() != model.config.diffusion_steps {
        return Err(Error::invalid(format!(
            "schedule has {} steps, model was built for {}",
            schedule.steps(),
            model.config.diffusion_steps
        )));
    }
    if model.is_untrained() {
        log::warn!("repainting with an untrained denoiser");
    }
    let plan = make_plan(schedule.steps(), jump)?;
    if mask.hole_pixels() == 0 {
        return Ok(x0_known.clone().with_kind(PatchKind::Repainted));
    }
    let s = mask.size();
    let mut x = randn_like(&[1, 1, s, s], rng);
    for step in &plan.transitions {
        x = match *step {
            Transition::Denoise(t) => {
                let merged = composite(schedule, &x, x0_known, mask, t, known_rng)?;
                reverse_step(schedule, model, &merged, t, rng)?
            }
            Transition::Renoise(t) => {
                let noise = randn_like(x.shape(), rng);
                schedule.forward_step(&x, t, &noise)?
            }
        };
    }
    let out = select(mask, &x0_known.pixels().clone().reshape([1, 1, s, s])?, &x)?;
    ImagePatch::new(out.reshape([1, s, s])?, PatchKind::Repainted)
}

/// The two random streams of a repaint derived from one seed.
pub fn repaint_streams(seed: u64) -> (Rng, Rng) {
    let root = SeedStream::new(seed).named("repaint");
    (root.named("sample").rng(), root.named("known").rng())
}

/// [`repaint`] with streams derived from `seed`.
pub fn repaint_seeded(
    schedule: &NoiseSchedule,
    model: &Denoiser,
    x0_known: &ImagePatch,
    mask: &Mask,
    jump: usize,
    seed: u64,
) -> Result<ImagePatch> {
    let (mut rng, mut known) = repaint_streams(seed);
    repaint(schedule, model, x0_known, mask, jump, &mut rng, &mut known)
}

/// Repaints independent `(patch, mask)` pairs; pair `i` uses seed `seeds[i]`.
pub fn repaint_many(
    schedule: &NoiseSchedule,
    model: &Denoiser,
    jobs: &[(ImagePatch, Mask)],
    jump: usize,
    seeds: &[u64],
    mode: ExecMode,
) -> Result<Vec<ImagePatch>> {
    if jobs.len() != seeds.len() {
        return Err(Error::invalid("one seed per repaint job is required"));
    }
    par::try_map_indexed(mode, jobs.len(), |i| {
        repaint_seeded(schedule, model, &jobs[i].0, &jobs[i].1, jump, seeds[i])
    })
}

/// Mean squared difference across 4-adjacent (known, hole) pixel pairs.
/// `None` when the mask has no such pair.
pub fn boundary_discontinuity(patch: &ImagePatch, mask: &Mask) -> Option<f64> {
    let s = mask.size();
    let known = mask.known();
    let data = patch.data();
    let (mut acc, mut n) = (0.0f64, 0usize);
    for y in 0..s {
        for x in 0..s {
            let p = y * s + x;
            // Visit each unordered pair once via right and down neighbors.
            for q in [(x + 1 < s).then(|| p + 1), (y + 1 < s).then(|| p + s)]
                .into_iter()
                .flatten()
            {
                if known[p] != known[q] {
                    acc += (data[p] as f64 - data[q] as f64).powi(2);
                    n += 1;
                }
            }
        }
    }
    (n > 0).then(|| acc / n as f64)
}

/// Fills the hole with the mean intensity of the known pixels.
pub fn mean_fill(x0_known: &ImagePatch, mask: &Mask) -> Result<ImagePatch> {
    check_mask(x0_known, mask)?;
    let known: Vec<f64> = x0_known
        .data()
        .iter()
        .zip(mask.known())
        .filter(|(_, &k)| k)
        .map(|(&v, _)| v as f64)
        .collect();
    let fill = if known.is_empty() {
        0.0
    } else {
        (known.iter().sum::<f64>() / known.len() as f64) as f32
    };
    let data = x0_known
        .data()
        .iter()
        .zip(mask.known())
        .map(|(&v, &k)| if k { v } else { fill })
        .collect();
    ImagePatch::from_vec(mask.size(), mask.size(), data, PatchKind::Repainted)
}
