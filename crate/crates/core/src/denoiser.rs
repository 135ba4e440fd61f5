//! Residual U-Net that predicts the noise and a variance-interpolation
//! coefficient from a noisy image and its timestep.
//!
//! Encoder levels hold residual blocks (plus self-attention where the feature
//! map side matches an attention resolution) and a stride-2 convolution
//! between levels. Every encoder block output is kept as a skip connection;
//! the decoder mirrors the encoder block for block, concatenating one skip per
//! block, and upsamples with nearest-neighbour doubling followed by a conv.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndcore::{Element, NdArray, ParamSet, Tape, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::rng::SeedStream;

const GN_EPS: f64 = 1e-5;

/// Architecture hyperparameters. Serialized as a checkpoint's `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub res_blocks_encoder: Vec<usize>,
    /// Feature-map side lengths that get a self-attention layer.
    pub attention_resolutions: Vec<usize>,
    pub time_embed_dim: usize,
    /// Output channels per input channel: noise and variance coefficient.
    pub out_channels: usize,
    /// Diffusion step count `T`; timesteps must lie in `1..=T`.
    pub diffusion_steps: usize,
    pub attention_heads: usize,
    /// Group-norm group count; defaults to the largest divisor of every width up to 32.
    pub norm_groups: Option<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            in_channels: 1,
            base_channels: 32,
            channel_mult: vec![1, 2, 2, 4],
            res_blocks_encoder: vec![2, 2, 2, 1],
            attention_resolutions: vec![8, 16, 32],
            time_embed_dim: 128,
            out_channels: 2,
            diffusion_steps: 64,
            attention_heads: 1,
            norm_groups: None,
        }
    }
}

impl DenoiserConfig {
    /// Small configuration used by gradient checks and fast tests.
    pub fn micro() -> Self {
        Self {
            input_size: 8,
            base_channels: 4,
            channel_mult: vec![1, 2],
            res_blocks_encoder: vec![1, 1],
            attention_resolutions: vec![4],
            time_embed_dim: 8,
            diffusion_steps: 16,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.input_size >> level
    }

    pub fn encoder_blocks(&self) -> usize {
        self.res_blocks_encoder.iter().sum()
    }

    pub fn decoder_blocks(&self) -> usize {
        // Mirrored by construction.
        self.encoder_blocks()
    }

    pub fn groups(&self) -> usize {
        self.norm_groups.unwrap_or_else(|| {
            let widths: Vec<usize> = (0..self.levels()).map(|l| self.level_channels(l)).collect();
            (1..=32)
                .rev()
                .find(|g| widths.iter().all(|w| w % g == 0))
                .unwrap_or(1)
        })
    }

    fn has_attention(&self, level: usize) -> bool {
        self.attention_resolutions.contains(&self.level_size(level))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("/denoiser/{field}"), msg));
        let levels = self.levels();
        if levels == 0 {
            return bad("channel_mult", "at least one level is required".into());
        }
        if self.res_blocks_encoder.len() != levels {
            return bad(
                "res_blocks_encoder",
                format!(
                    "{} entries for {levels} levels",
                    self.res_blocks_encoder.len()
                ),
            );
        }
        if self.res_blocks_encoder.contains(&0) || self.channel_mult.contains(&0) {
            return bad(
                "res_blocks_encoder",
                "every level needs blocks and a nonzero width".into(),
            );
        }
        if !self.input_size.is_power_of_two() || self.input_size < 1 << levels {
            return bad(
                "input_size",
                format!("{} is not a power of two >= 2^{levels}", self.input_size),
            );
        }
        if self.in_channels == 0 {
            return bad("in_channels", "must be positive".into());
        }
        if self.base_channels == 0 || !self.base_channels.is_multiple_of(2) {
            return bad("base_channels", "must be positive and even".into());
        }
        if self.time_embed_dim == 0 {
            return bad("time_embed_dim", "must be positive".into());
        }
        if self.out_channels != 2 {
            return bad(
                "out_channels",
                "the head predicts exactly noise and variance".into(),
            );
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps", "must be positive".into());
        }
        let sizes: Vec<usize> = (0..levels).map(|l| self.level_size(l)).collect();
        for &r in &self.attention_resolutions {
            if !sizes.contains(&r) {
                return bad(
                    "attention_resolutions",
                    format!("resolution {r} is not produced by the levels {sizes:?}"),
                );
            }
        }
        let groups = self.groups();
        for l in 0..levels {
            let c = self.level_channels(l);
            if !c.is_multiple_of(groups) {
                return bad(
                    "norm_groups",
                    format!("{groups} groups do not divide width {c}"),
                );
            }
            if self.has_attention(l)
                && (self.attention_heads == 0 || !c.is_multiple_of(self.attention_heads))
            {
                return bad(
                    "attention_heads",
                    format!("{} heads do not divide width {c}", self.attention_heads),
                );
            }
        }
        Ok(())
    }
}

/// Closed-form number of scalars in the parameter set of `cfg`.
pub fn parameter_count(cfg: &DenoiserConfig) -> usize {
    let e = cfg.time_embed_dim;
    let b = cfg.base_channels;
    let res = |ci: usize, co: usize| {
        2 * ci
            + co * ci * 9
            + co
            + co * e
            + co
            + 2 * co
            + co * co * 9
            + co
            + if ci != co { co * ci + co } else { 0 }
    };
    let attn = |c: usize| 2 * c + 3 * c * c + 3 * c + c * c + c;
    let conv3 = |ci: usize, co: usize| co * ci * 9 + co;

    let mut total = e * b + e + e * e + e;
    total += conv3(cfg.in_channels, b);
    let mut ch = b;
    let mut skips = Vec::new();
    for l in 0..cfg.levels() {
        let out = cfg.level_channels(l);
        for _ in 0..cfg.res_blocks_encoder[l] {
            total += res(ch, out);
            ch = out;
            if cfg.has_attention(l) {
                total += attn(ch);
            }
            skips.push(ch);
        }
        if l + 1 < cfg.levels() {
            total += conv3(ch, ch);
        }
    }
    for l in (0..cfg.levels()).rev() {
        let out = cfg.level_channels(l);
        for _ in 0..cfg.res_blocks_encoder[l] {
            total += res(ch + skips.pop().unwrap(), out);
            ch = out;
            if cfg.has_attention(l) {
                total += attn(ch);
            }
        }
        if l > 0 {
            total += conv3(ch, ch);
        }
    }
    total + 2 * ch + conv3(ch, cfg.out_channels * cfg.in_channels)
}

/// Interleaved `(sin, cos)` pairs of `t` at geometric frequencies from 1 down to 1/10000.
pub fn timestep_embedding(t: usize, dim: usize, steps: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "embedding dimension {dim} must be even"
        )));
    }
    if t > steps {
        return Err(Error::invalid(format!("timestep {t} outside 0..={steps}")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            10000f64.powf(-(k as f64) / (half - 1) as f64)
        };
        let a = t as f64 * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

struct Init<'a> {
    params: ParamSet<f32>,
    rng: &'a mut crate::rng::Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let std = (1.0 / fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let a = NdArray::from_fn(shape.to_vec(), |_| {
            let z: f64 = StandardNormal.sample(rng);
            (std * z) as f32
        });
        self.params.insert(name, a);
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.params.insert(name, NdArray::zeros(shape.to_vec()));
    }

    fn ones(&mut self, name: String, shape: &[usize]) {
        self.params.insert(name, NdArray::ones(shape.to_vec()));
    }

    fn conv(&mut self, p: &str, ci: usize, co: usize, k: usize, zero: bool) {
        if zero {
            self.zeros(format!("{p}.w"), &[co, ci, k, k]);
        } else {
            self.normal(format!("{p}.w"), &[co, ci, k, k], ci * k * k);
        }
        self.zeros(format!("{p}.b"), &[co]);
    }

    fn linear(&mut self, p: &str, i: usize, o: usize) {
        self.normal(format!("{p}.w"), &[o, i], i);
        self.zeros(format!("{p}.b"), &[o]);
    }

    fn norm(&mut self, p: &str, c: usize) {
        self.ones(format!("{p}.gain"), &[c]);
        self.zeros(format!("{p}.bias"), &[c]);
    }

    fn res_block(&mut self, p: &str, ci: usize, co: usize, e: usize) {
        self.norm(&format!("{p}.norm1"), ci);
        self.conv(&format!("{p}.conv1"), ci, co, 3, false);
        self.linear(&format!("{p}.temb"), e, co);
        self.norm(&format!("{p}.norm2"), co);
        self.conv(&format!("{p}.conv2"), co, co, 3, true);
        if ci != co {
            self.conv(&format!("{p}.skip"), ci, co, 1, false);
        }
    }

    fn attention(&mut self, p: &str, c: usize) {
        self.norm(&format!("{p}.norm"), c);
        self.normal(format!("{p}.qkv.w"), &[3 * c, c], c);
        self.zeros(format!("{p}.qkv.b"), &[3 * c]);
        self.zeros(format!("{p}.out.w"), &[c, c]);
        self.zeros(format!("{p}.out.b"), &[c]);
    }
}

/// Deterministic initialization; the output projection and the last layer of
/// every residual branch start at zero.
pub fn build(cfg: &DenoiserConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut rng = SeedStream::new(seed).named("denoiser-init").rng();
    let mut init = Init {
        params: ParamSet::new(),
        rng: &mut rng,
    };
    let e = cfg.time_embed_dim;
    init.linear("time.fc1", cfg.base_channels, e);
    init.linear("time.fc2", e, e);
    init.conv("in", cfg.in_channels, cfg.base_channels, 3, false);
    let mut ch = cfg.base_channels;
    let mut skips = Vec::new();
    for l in 0..cfg.levels() {
        let out = cfg.level_channels(l);
        for b in 0..cfg.res_blocks_encoder[l] {
            init.res_block(&format!("enc{l}.{b}"), ch, out, e);
            ch = out;
            if cfg.has_attention(l) {
                init.attention(&format!("enc{l}.{b}.attn"), ch);
            }
            skips.push(ch);
        }
        if l + 1 < cfg.levels() {
            init.conv(&format!("down{l}"), ch, ch, 3, false);
        }
    }
    for l in (0..cfg.levels()).rev() {
        let out = cfg.level_channels(l);
        for b in 0..cfg.res_blocks_encoder[l] {
            let skip = skips.pop().expect("mirrored skip stack");
            init.res_block(&format!("dec{l}.{b}"), ch + skip, out, e);
            ch = out;
            if cfg.has_attention(l) {
                init.attention(&format!("dec{l}.{b}.attn"), ch);
            }
        }
        if l > 0 {
            init.conv(&format!("up{l}"), ch, ch, 3, false);
        }
    }
    init.norm("out.norm", ch);
    init.conv("out", ch, cfg.out_channels * cfg.in_channels, 3, true);
    Ok(init.params)
}

/// Parameters bound to tape variables.
pub type Bound = BTreeMap<String, Var>;

/// Records parameters on `tape`, as differentiable parameters or as constants.
pub fn bind<T: Element>(tape: &mut Tape<T>, params: &ParamSet<T>, trainable: bool) -> Bound {
    if trainable {
        tape.params_from(params)
    } else {
        params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect()
    }
}

struct Net<'a, T: Element> {
    cfg: &'a DenoiserConfig,
    tape: &'a mut Tape<T>,
    p: &'a Bound,
    groups: usize,
}

impl<T: Element> Net<'_, T> {
    fn v(&self, name: &str) -> Result<Var> {
        self.p
            .get(name)
            .copied()
            .ok_or_else(|| ndcore::NdError::UnknownParam(name.to_string()).into())
    }

    fn conv(&mut self, x: Var, p: &str, stride: usize) -> Result<Var> {
        let w = self.v(&format!("{p}.w"))?;
        let b = self.v(&format!("{p}.b"))?;
        let k = self.tape.shape(w)[2];
        let y = self.tape.conv2d(x, w, stride, (k - 1) / 2)?;
        Ok(self.tape.channel_bias(y, b)?)
    }

    fn norm(&mut self, x: Var, p: &str) -> Result<Var> {
        let g = self.v(&format!("{p}.gain"))?;
        let b = self.v(&format!("{p}.bias"))?;
        Ok(self
            .tape
            .group_norm(x, g, b, self.groups, T::from_f64(GN_EPS))?)
    }

    fn linear(&mut self, x: Var, p: &str) -> Result<Var> {
        let w = self.v(&format!("{p}.w"))?;
        let b = self.v(&format!("{p}.b"))?;
        Ok(self.tape.linear(x, w, b)?)
    }

    fn res_block(&mut self, x: Var, temb: Var, p: &str) -> Result<Var> {
        let h = self.norm(x, &format!("{p}.norm1"))?;
        let h = self.tape.silu(h)?;
        let h = self.conv(h, &format!("{p}.conv1"), 1)?;
        let e = self.linear(temb, &format!("{p}.temb"))?;
        let h = self.tape.add_sample_channels(h, e)?;
        let h = self.norm(h, &format!("{p}.norm2"))?;
        let h = self.tape.silu(h)?;
        let h = self.conv(h, &format!("{p}.conv2"), 1)?;
        let skip_name = format!("{p}.skip");
        let skip = if self.p.contains_key(&format!("{skip_name}.w")) {
            self.conv(x, &skip_name, 1)?
        } else {
            x
        };
        Ok(self.tape.add(skip, h)?)
    }

    fn attention(&mut self, x: Var, p: &str) -> Result<Var> {
        let h = self.norm(x, &format!("{p}.norm"))?;
        let a = self.tape.self_attention(
            h,
            self.v(&format!("{p}.qkv.w"))?,
            self.v(&format!("{p}.qkv.b"))?,
            self.v(&format!("{p}.out.w"))?,
            self.v(&format!("{p}.out.b"))?,
            self.cfg.attention_heads,
        )?;
        Ok(self.tape.add(x, a)?)
    }
}

/// Records the network on `tape`. Returns the predicted noise and the raw
/// (pre-sigmoid) variance logits, both shaped like `x`.
pub fn forward_tape<T: Element>(
    cfg: &DenoiserConfig,
    tape: &mut Tape<T>,
    params: &Bound,
    x: Var,
    t: &[usize],
) -> Result<(Var, Var)> {
    let (n, c, h, w) = tape.value(x).dims4("denoiser")?;
    if c != cfg.in_channels || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::invalid(format!(
            "denoiser expects [N,{},{s},{s}], got {:?}",
            cfg.in_channels,
            tape.shape(x),
            s = cfg.input_size
        )));
    }
    if t.len() != n {
        return Err(Error::invalid(format!(
            "{} timesteps for a batch of {n}",
            t.len()
        )));
    }
    if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > cfg.diffusion_steps) {
        return Err(Error::invalid(format!(
            "timestep {bad} outside 1..={}",
            cfg.diffusion_steps
        )));
    }
    let dim = cfg.base_channels;
    let mut sinus = Vec::with_capacity(n * dim);
    for &s in t {
        sinus.extend(
            timestep_embedding(s, dim, cfg.diffusion_steps)?
                .into_iter()
                .map(T::from_f64),
        );
    }
    let mut net = Net {
        cfg,
        tape,
        p: params,
        groups: cfg.groups(),
    };
    let s = net.tape.constant(NdArray::new([n, dim], sinus)?);
    let temb = net.linear(s, "time.fc1")?;
    let temb = net.tape.silu(temb)?;
    let temb = net.linear(temb, "time.fc2")?;
    let temb = net.tape.silu(temb)?;

    let mut hcur = net.conv(x, "in", 1)?;
    let mut skips = Vec::new();
    for l in 0..cfg.levels() {
        for b in 0..cfg.res_blocks_encoder[l] {
            hcur = net.res_block(hcur, temb, &format!("enc{l}.{b}"))?;
            if cfg.has_attention(l) {
                hcur = net.attention(hcur, &format!("enc{l}.{b}.attn"))?;
            }
            skips.push(hcur);
        }
        if l + 1 < cfg.levels() {
            hcur = net.conv(hcur, &format!("down{l}"), 2)?;
        }
    }
    for l in (0..cfg.levels()).rev() {
        for b in 0..cfg.res_blocks_encoder[l] {
            let skip = skips.pop().expect("mirrored skip stack");
            let cat = net.tape.concat_channels(hcur, skip)?;
            hcur = net.res_block(cat, temb, &format!("dec{l}.{b}"))?;
            if cfg.has_attention(l) {
                hcur = net.attention(hcur, &format!("dec{l}.{b}.attn"))?;
            }
        }
        if l > 0 {
            let up = net.tape.upsample2x(hcur)?;
            hcur = net.conv(up, &format!("up{l}"), 1)?;
        }
    }
    let hcur = net.norm(hcur, "out.norm")?;
    let hcur = net.tape.silu(hcur)?;
    let out = net.conv(hcur, "out", 1)?;
    let eps = net.tape.slice_channels(out, 0, c)?;
    let logits = net.tape.slice_channels(out, c, c)?;
    Ok((eps, logits))
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamSet<f32>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let params = build(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Predicted noise and variance coefficient in [0, 1] for an `[N,C,H,W]` batch.
    pub fn forward(&self, x: &NdArray<f32>, t: &[usize]) -> Result<(NdArray<f32>, NdArray<f32>)> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.params, false);
        let xv = tape.constant(x.clone());
        let (eps, logits) = forward_tape(&self.config, &mut tape, &bound, xv, t)?;
        let v = tape.sigmoid(logits)?;
        Ok((tape.value(eps).clone(), tape.value(v).clone()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let cfg = serde_json::to_string_pretty(&self.config)?;
        fs::write(dir.join("config.json"), cfg).at(dir.join("config.json"))?;
        fs::write(dir.join("params.ndt"), self.params.to_bytes()).at(dir.join("params.ndt"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("config.json")).at(dir.join("config.json"))?;
        let config: DenoiserConfig = serde_json::from_str(&text)?;
        config.validate()?;
        let bytes = fs::read(dir.join("params.ndt")).at(dir.join("params.ndt"))?;
        let params = ParamSet::read_from(&mut &bytes[..])?;
        let expected = build(&config, 0)?;
        for (name, value) in expected.iter() {
            let got = params.get(name)?;
            if got.shape() != value.shape() {
                return Err(Error::invalid(format!(
                    "checkpoint parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    value.shape()
                )));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::invalid("checkpoint has unexpected parameters"));
        }
        Ok(Self { config, params })
    }

    /// SHA-256 over the serialized config and parameters.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.params.to_bytes());
        hex(&h.finalize())
    }

    /// True when the output projection is still all zeros (untrained network).
    pub fn is_untrained(&self) -> bool {
        self.params
            .get("out.w")
            .map(|w| w.data().iter().all(|&v| v == 0.0))
            .unwrap_or(false)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Random `[N,C,H,W]` standard-normal array.
pub(crate) fn randn(shape: &[usize], rng: &mut crate::rng::Rng) -> NdArray<f32> {
    NdArray::from_fn(shape.to_vec(), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z as f32
    })
}
