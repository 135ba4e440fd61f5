//! Denoising diffusion: cosine noise schedule, closed-form forward process,
//! learned-variance reverse steps, the hybrid training loss, the training
//! loop with an exponential moving average, and unconditional sampling.

use ndcore::{Adam, NdArray, NdError, ParamSet, Tape};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{bind, forward_tape, Denoiser};
use crate::error::{Error, Result};
use crate::image::{ImagePatch, PatchKind};
use crate::par::{self, ExecMode};
use crate::rng::{Rng, SeedStream};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Per-step noise levels. Index 0 is the clean image (`alpha_bar[0] = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_variance: Vec<f64>,
    posterior_coef_x0: Vec<f64>,
    posterior_coef_xt: Vec<f64>,
}

fn cosine_f(t: f64, steps: usize) -> f64 {
    let u = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
}

impl NoiseSchedule {
    /// Cosine schedule; betas are capped at 0.999 and `alpha_bar` is their
    /// cumulative product, so it stays strictly positive.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let f0 = cosine_f(0.0, steps);
        let target: Vec<f64> = (0..=steps)
            .map(|t| cosine_f(t as f64, steps) / f0)
            .collect();
        let mut beta = vec![0.0; steps + 1];
        let mut alpha = vec![1.0; steps + 1];
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            beta[t] = (1.0 - target[t] / target[t - 1]).min(MAX_BETA);
            alpha[t] = 1.0 - beta[t];
            alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        }
        let mut posterior_variance = vec![0.0; steps + 1];
        let mut posterior_coef_x0 = vec![0.0; steps + 1];
        let mut posterior_coef_xt = vec![0.0; steps + 1];
        for t in 1..=steps {
            let denom = 1.0 - alpha_bar[t];
            posterior_variance[t] = beta[t] * (1.0 - alpha_bar[t - 1]) / denom;
            posterior_coef_x0[t] = beta[t] * alpha_bar[t - 1].sqrt() / denom;
            posterior_coef_xt[t] = (1.0 - alpha_bar[t - 1]) * alpha[t].sqrt() / denom;
        }
        Ok(Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            posterior_variance,
            posterior_coef_x0,
            posterior_coef_xt,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t]
    }

    pub fn posterior_coef_x0(&self, t: usize) -> f64 {
        self.posterior_coef_x0[t]
    }

    pub fn posterior_coef_xt(&self, t: usize) -> f64 {
        self.posterior_coef_xt[t]
    }

    /// Finite stand-in for `log posterior_variance`, which is `-inf` at t = 1.
    fn log_posterior_variance(&self, t: usize) -> f64 {
        if t == 1 && self.steps > 1 {
            self.posterior_variance[2].ln()
        } else {
            self.posterior_variance[t].max(1e-20).ln()
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }

    /// `sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) noise`.
    pub fn q_sample(
        &self,
        x0: &NdArray<f32>,
        t: usize,
        noise: &NdArray<f32>,
    ) -> Result<NdArray<f32>> {
        self.check_t(t)?;
        Ok(q_sample_with(self.alpha_bar[t], x0, noise)?)
    }

    /// One forward kernel step `sqrt(alpha[t]) x_{t-1} + sqrt(beta[t]) noise`.
    pub fn forward_step(
        &self,
        x_prev: &NdArray<f32>,
        t: usize,
        noise: &NdArray<f32>,
    ) -> Result<NdArray<f32>> {
        self.check_t(t)?;
        let (a, b) = (self.alpha[t].sqrt(), self.beta[t].sqrt());
        Ok(x_prev.zip_map(noise, |x, e| (a * x as f64 + b * e as f64) as f32)?)
    }

    /// Mean of `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_mean(
        &self,
        x0: &NdArray<f32>,
        x_t: &NdArray<f32>,
        t: usize,
    ) -> Result<NdArray<f32>> {
        self.check_t(t)?;
        let (c0, ct) = (self.posterior_coef_x0[t], self.posterior_coef_xt[t]);
        Ok(x0.zip_map(x_t, |a, b| (c0 * a as f64 + ct * b as f64) as f32)?)
    }

    /// Variance `exp(v log beta + (1 - v) log posterior_variance)` for a coefficient `v`.
    pub fn interpolated_variance(&self, t: usize, v: f64) -> f64 {
        if v == 0.0 {
            return self.posterior_variance[t];
        }
        if v == 1.0 {
            return self.beta[t];
        }
        (v * self.beta[t].ln() + (1.0 - v) * self.log_posterior_variance(t)).exp()
    }

    /// `x0` reconstructed from a noise prediction, clipped to [-1, 1].
    pub fn predict_x0(
        &self,
        x_t: &NdArray<f32>,
        eps: &NdArray<f32>,
        t: usize,
    ) -> Result<NdArray<f32>> {
        let ab = self.alpha_bar[t];
        let (a, b) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t.zip_map(eps, |x, e| {
            ((a * (x as f64 - b * e as f64)).clamp(-1.0, 1.0)) as f32
        })?)
    }

    /// Reverse-step mean from a noise prediction via the reconstructed (clipped) `x0`.
    pub fn model_mean(
        &self,
        x_t: &NdArray<f32>,
        eps: &NdArray<f32>,
        t: usize,
    ) -> Result<NdArray<f32>> {
        self.check_t(t)?;
        let x0 = self.predict_x0(x_t, eps, t)?;
        self.posterior_mean(&x0, x_t, t)
    }

    /// Draws `x_{t-1}` given network outputs. No noise is added at t = 1,
    /// and only that final state is clamped to [-1, 1].
    pub fn posterior_step(
        &self,
        x_t: &NdArray<f32>,
        eps: &NdArray<f32>,
        v: &NdArray<f32>,
        t: usize,
        rng: &mut Rng,
    ) -> Result<NdArray<f32>> {
        let mean = self.model_mean(x_t, eps, t)?;
        if t == 1 {
            return Ok(mean.map(|m| m.clamp(-1.0, 1.0)));
        }
        let mut out = mean.into_data();
        for (o, &vi) in out.iter_mut().zip(v.data()) {
            let sd = self.interpolated_variance(t, vi as f64).sqrt();
            let z: f64 = rng.sample(StandardNormal);
            *o = (*o as f64 + sd * z) as f32;
        }
        Ok(NdArray::new(x_t.shape().to_vec(), out)?)
    }
}

fn q_sample_with(
    alpha_bar: f64,
    x0: &NdArray<f32>,
    noise: &NdArray<f32>,
) -> ndcore::Result<NdArray<f32>> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.zip_map(noise, |x, e| (a * x as f64 + b * e as f64) as f32)
}

pub(crate) fn randn_like(shape: &[usize], rng: &mut Rng) -> NdArray<f32> {
    crate::denoiser::randn(shape, rng)
}

/// One reverse step `x_t -> x_{t-1}` for a batch sharing the timestep `t`.
pub fn reverse_step(
    schedule: &NoiseSchedule,
    model: &Denoiser,
    x_t: &NdArray<f32>,
    t: usize,
    rng: &mut Rng,
) -> Result<NdArray<f32>> {
    schedule.check_t(t)?;
    let n = x_t.dims4("reverse_step")?.0;
    let (eps, v) = model.forward(x_t, &vec![t; n]).map_err(|e| match e {
        Error::Nd(NdError::NonFinite { .. }) => Error::NonFiniteOutput { t },
        other => other,
    })?;
    if !eps.is_finite() || !v.is_finite() {
        return Err(Error::NonFiniteOutput { t });
    }
    schedule.posterior_step(x_t, &eps, &v, t, rng)
}

/// Runs the full reverse chain from standard normal noise for one sample.
pub fn generate_one(
    schedule: &NoiseSchedule,
    model: &Denoiser,
    rng: &mut Rng,
) -> Result<ImagePatch> {
    let s = model.config.input_size;
    let mut x = randn_like(&[1, model.config.in_channels, s, s], rng);
    for t in (1..=schedule.steps()).rev() {
        x = reverse_step(schedule, model, &x, t, rng)?;
    }
    ImagePatch::new(x.reshape([1, s, s])?, PatchKind::Generated)
}

/// `n` independent samples; sample `i` uses the stream `seed/generate/i`.
pub fn generate(
    schedule: &NoiseSchedule,
    model: &Denoiser,
    n: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<ImagePatch>> {
    let stream = SeedStream::new(seed).named("generate");
    par::try_map_indexed(mode, n, |i| {
        generate_one(schedule, model, &mut stream.indexed(i as u64).rng())
    })
}

/// Training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub ema_decay: f64,
    /// Weight of the variational term in the hybrid loss.
    pub vlb_weight: f64,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            steps: 8000,
            ema_decay: 0.999,
            vlb_weight: 0.001,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("/train/{f}"), m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay", "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.vlb_weight) {
            return bad("vlb_weight", "must lie in [0, 1]");
        }
        if self.log_every == 0 {
            return bad("log_every", "must be positive");
        }
        Ok(())
    }
}

/// Loss values of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub simple: f64,
    pub vlb: f64,
    pub total: f64,
}

/// Records the hybrid loss on `tape` for given timesteps and noise. Returns
/// the loss variable and its terms. The KL term sees the predicted mean as a
/// constant, so only the variance head receives its gradient; it is zero for
/// samples at t = 1, where the true posterior is a point mass.
pub fn record_loss(
    schedule: &NoiseSchedule,
    model_cfg: &crate::denoiser::DenoiserConfig,
    tape: &mut Tape<f32>,
    bound: &crate::denoiser::Bound,
    x0: &NdArray<f32>,
    t: &[usize],
    noise: &NdArray<f32>,
    vlb_weight: f64,
) -> Result<(ndcore::Var, LossTerms)> {
    let (n, c, h, w) = x0.dims4("loss")?;
    if n == 0 || t.len() != n {
        return Err(Error::invalid(
            "loss needs a non-empty batch with one timestep per sample",
        ));
    }
    let plane = c * h * w;
    let mut x_t = vec![0f32; x0.len()];
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_t(ti)?;
        let ab = schedule.alpha_bar(ti);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for k in i * plane..(i + 1) * plane {
            x_t[k] = (a * x0.data()[k] as f64 + b * noise.data()[k] as f64) as f32;
        }
    }
    let x_t = NdArray::new(x0.shape().to_vec(), x_t)?;
    let xv = tape.constant(x_t.clone());
    let (eps_hat, logits) = forward_tape(model_cfg, tape, bound, xv, t)?;

    let neg_noise = noise.map(|e| -e);
    let diff = tape.add_const(eps_hat, &neg_noise)?;
    let sq = tape.square(diff)?;
    let simple = tape.mean(sq)?;

    // KL(q || p) per element = 0.5 (logvar - log_post - 1 + (post + (mu_true - mu_model)^2) / var),
    // with logvar = log_post + v (log beta - log_post) and mu_model held constant.
    let eps_val = tape.value(eps_hat).clone();
    let len = x0.len();
    let (mut span, mut log_post, mut numer, mut live) = (
        vec![0f32; len],
        vec![0f32; len],
        vec![0f32; len],
        vec![0f32; len],
    );
    for (i, &ti) in t.iter().enumerate() {
        let (beta, ab, alpha) = (
            schedule.beta(ti),
            schedule.alpha_bar(ti),
            schedule.alpha(ti),
        );
        let lp = schedule.log_posterior_variance(ti);
        let post = schedule.posterior_variance(ti);
        let (c0, ct) = (
            schedule.posterior_coef_x0(ti),
            schedule.posterior_coef_xt(ti),
        );
        for k in i * plane..(i + 1) * plane {
            let xt = x_t.data()[k] as f64;
            let mu_true = c0 * x0.data()[k] as f64 + ct * xt;
            let mu_model =
                (xt - beta * eps_val.data()[k] as f64 / (1.0 - ab).sqrt()) / alpha.sqrt();
            span[k] = (beta.ln() - lp) as f32;
            log_post[k] = lp as f32;
            numer[k] = (post + (mu_true - mu_model).powi(2)) as f32;
            live[k] = if ti > 1 { 1.0 } else { 0.0 };
        }
    }
    let shape = x0.shape().to_vec();
    let v = tape.sigmoid(logits)?;
    let rel = tape.mul_const(v, NdArray::new(shape.clone(), span)?)?;
    let logvar = tape.add_const(rel, &NdArray::new(shape.clone(), log_post)?)?;
    let neg = tape.scale(logvar, -1.0)?;
    let inv_var = tape.exp(neg)?;
    let ratio = tape.mul_const(inv_var, NdArray::new(shape.clone(), numer)?)?;
    let part = tape.add_const(rel, &NdArray::full(shape.clone(), -1.0))?;
    let kl = tape.add(part, ratio)?;
    let kl = tape.scale(kl, 0.5)?;
    let kl = tape.mul_const(kl, NdArray::new(shape, live)?)?;
    let vlb = tape.mean(kl)?;
    let weighted = tape.scale(vlb, vlb_weight as f32)?;
    let total = tape.add(simple, weighted)?;
    let terms = LossTerms {
        simple: tape.value(simple).item() as f64,
        vlb: tape.value(vlb).item() as f64,
        total: tape.value(total).item() as f64,
    };
    Ok((total, terms))
}

/// Hybrid loss for a batch with timesteps and noise drawn from `rng`.
pub fn loss(
    schedule: &NoiseSchedule,
    model: &Denoiser,
    x0: &NdArray<f32>,
    vlb_weight: f64,
    rng: &mut Rng,
) -> Result<LossTerms> {
    let (n, ..) = x0.dims4("loss")?;
    let t: Vec<usize> = (0..n)
        .map(|_| rng.random_range(1..=schedule.steps()))
        .collect();
    let noise = randn_like(x0.shape(), rng);
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &model.params, false);
    let (_, terms) = record_loss(
        schedule,
        &model.config,
        &mut tape,
        &bound,
        x0,
        &t,
        &noise,
        vlb_weight,
    )?;
    Ok(terms)
}

/// Metrics row written every `log_every` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_simple: f64,
    pub loss_vlb: f64,
    pub lr: f64,
}

/// Mutable training state handed to checkpoint sinks.
pub struct TrainState<'a> {
    pub step: usize,
    pub params: &'a ParamSet<f32>,
    pub ema: &'a ParamSet<f32>,
}

/// Observer of training progress.
pub trait TrainSink {
    fn metrics(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _state: &TrainState<'_>) -> Result<()> {
        Ok(())
    }
}

/// A sink that ignores everything.
pub struct NoSink;

impl TrainSink for NoSink {}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Exponential moving average of the parameters, used for sampling.
    pub ema: Denoiser,
    /// Raw parameters after the last update.
    pub last: Denoiser,
    /// Per-step simple (noise regression) loss.
    pub loss_simple: Vec<f64>,
    pub loss_vlb: Vec<f64>,
}

/// Number of fixed batch shards whose gradients are evaluated independently.
/// The shard layout does not depend on the thread count, so parallel and
/// sequential runs produce bit-identical parameters.
pub const TRAIN_SHARDS: usize = 4;

/// Loss terms and parameter gradients of a batch, summed over fixed shards
/// in shard order. Shards run concurrently in parallel mode.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    schedule: &NoiseSchedule,
    model_cfg: &crate::denoiser::DenoiserConfig,
    params: &ParamSet<f32>,
    x0: &NdArray<f32>,
    t: &[usize],
    noise: &NdArray<f32>,
    vlb_weight: f64,
    mode: ExecMode,
) -> Result<(ParamSet<f32>, LossTerms)> {
    let (n, c, h, w) = x0.dims4("batch_gradients")?;
    if n == 0 || t.len() != n {
        return Err(Error::invalid(
            "loss needs a non-empty batch with one timestep per sample",
        ));
    }
    let plane = c * h * w;
    let shards = TRAIN_SHARDS.min(n);
    let parts = par::try_map_indexed(mode, shards, |i| {
        let (lo, hi) = (i * n / shards, (i + 1) * n / shards);
        let rows = |a: &NdArray<f32>| {
            NdArray::new(
                [hi - lo, c, h, w],
                a.data()[lo * plane..hi * plane].to_vec(),
            )
        };
        let (xs, ns) = (rows(x0)?, rows(noise)?);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, params, true);
        let (total, terms) = record_loss(
            schedule,
            model_cfg,
            &mut tape,
            &bound,
            &xs,
            &t[lo..hi],
            &ns,
            vlb_weight,
        )?;
        let grads = tape.backprop_all(total)?;
        Ok::<_, Error>((grads, terms, (hi - lo) as f64 / n as f64))
    })?;
    let mut sum: Option<ParamSet<f32>> = None;
    let mut terms = LossTerms {
        simple: 0.0,
        vlb: 0.0,
        total: 0.0,
    };
    for (grads, part, weight) in parts {
        terms.simple += weight * part.simple;
        terms.vlb += weight * part.vlb;
        terms.total += weight * part.total;
        let wf = weight as f32;
        match sum.as_mut() {
            None => {
                let mut g = grads;
                for (_, a) in g.iter_mut() {
                    a.data_mut().iter_mut().for_each(|v| *v *= wf);
                }
                sum = Some(g);
            }
            Some(acc) => {
                for ((_, a), (_, b)) in acc.iter_mut().zip(grads.iter()) {
                    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += wf * y;
                    }
                }
            }
        }
    }
    Ok((sum.expect("at least one shard"), terms))
}

/// Trains `init` on `data` (patches of the model's input size). Batch
/// indices, timesteps and noise come from named sub-streams of `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    init: Denoiser,
    data: &[ImagePatch],
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    train_with(cfg, schedule, init, data, sink, ExecMode::Parallel)
}

/// [`train`] with an explicit execution mode for the batch shards.
pub fn train_with(
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    init: Denoiser,
    data: &[ImagePatch],
    sink: &mut dyn TrainSink,
    mode: ExecMode,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if schedule.steps() != init.config.diffusion_steps {
        return Err(Error::invalid(format!(
            "schedule has {} steps, model expects {}",
            schedule.steps(),
            init.config.diffusion_steps
        )));
    }
    if data.is_empty() && cfg.steps > 0 {
        return Err(Error::invalid("training data is empty"));
    }
    let size = init.config.input_size;
    if let Some(p) = data
        .iter()
        .find(|p| p.height() != size || p.width() != size)
    {
        return Err(Error::invalid(format!(
            "training patch is {}x{}, model expects {size}x{size}",
            p.height(),
            p.width()
        )));
    }
    let root = SeedStream::new(cfg.seed).named("train");
    let mut batch_rng = root.named("batches").rng();
    let mut noise_rng = root.named("noise").rng();
    let config = init.config.clone();
    let mut params = init.params;
    let mut ema = params.clone();
    let mut adam = Adam::new(cfg.learning_rate);
    let mut loss_simple = Vec::with_capacity(cfg.steps);
    let mut loss_vlb = Vec::with_capacity(cfg.steps);
    let decay = cfg.ema_decay as f32;

    for step in 1..=cfg.steps {
        let picks: Vec<ImagePatch> = (0..cfg.batch_size)
            .map(|_| data[batch_rng.random_range(0..data.len())].clone())
            .collect();
        let x0 = ImagePatch::stack(&picks)?;
        let t: Vec<usize> = (0..cfg.batch_size)
            .map(|_| noise_rng.random_range(1..=schedule.steps()))
            .collect();
        let noise = randn_like(x0.shape(), &mut noise_rng);

        let (grads, terms) = batch_gradients(
            schedule,
            &config,
            &params,
            &x0,
            &t,
            &noise,
            cfg.vlb_weight,
            mode,
        )
        .map_err(|e| match e {
            Error::Nd(NdError::NonFinite { .. }) => Error::NanLoss { step },
            other => other,
        })?;
        if !terms.total.is_finite() {
            return Err(Error::NanLoss { step });
        }
        adam.update(&mut params, &grads).map_err(|e| match e {
            NdError::NonFiniteGradient(_) => Error::NanLoss { step },
            other => other.into(),
        })?;
        for ((_, e), (_, p)) in ema.iter_mut().zip(params.iter()) {
            for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
                *ev = decay * *ev + (1.0 - decay) * pv;
            }
        }
        loss_simple.push(terms.simple);
        loss_vlb.push(terms.vlb);

        if step % cfg.log_every == 0 {
            let row = MetricsRow {
                step,
                loss_simple: terms.simple,
                loss_vlb: terms.vlb,
                lr: cfg.learning_rate,
            };
            log::info!(
                "step {step}: loss_simple {:.5} loss_vlb {:.5}",
                terms.simple,
                terms.vlb
            );
            sink.metrics(&row)?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            sink.checkpoint(&TrainState {
                step,
                params: &params,
                ema: &ema,
            })?;
        }
    }
    Ok(TrainOutcome {
        ema: Denoiser {
            config: config.clone(),
            params: ema,
        },
        last: Denoiser { config, params },
        loss_simple,
        loss_vlb,
    })
}

/// Median of a window of values.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
