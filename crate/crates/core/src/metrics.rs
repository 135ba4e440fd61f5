//! Fréchet distance in the latent space of a small texture classifier, and
//! the perturbation battery that validates it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndcore::{Adam, NdArray, NdError, ParamSet, Tape, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::hex;
use crate::error::{Error, IoContext, Result};
use crate::image::{ImagePatch, PatchKind};
use crate::par::{self, ExecMode};
use crate::rng::SeedStream;
use crate::synthlab::{alien_patch, Corpus};

/// Fewest images accepted by [`embed_stats`].
pub const EMBED_FLOOR: usize = 64;
/// Images per forward pass during feature extraction.
const CHUNK: usize = 32;
const GN_EPS: f64 = 1e-5;

/// Architecture of the embedding classifier: four stride-2 conv stages, global
/// average pooling to a `widths[3]`-dimensional feature, then a class head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub input_size: usize,
    pub classes: usize,
    pub widths: [usize; 4],
    pub norm_groups: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            classes: 8,
            widths: [16, 32, 64, 128],
            norm_groups: 8,
        }
    }
}

impl EmbedderConfig {
    /// Feature dimension D.
    pub fn dim(&self) -> usize {
        self.widths[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(
                "/metrics/embedder/classes",
                "needs at least two classes",
            ));
        }
        if self.input_size < 16 || !self.input_size.is_power_of_two() {
            return Err(Error::config(
                "/metrics/embedder/input_size",
                "must be a power of two >= 16",
            ));
        }
        if self
            .widths
            .iter()
            .any(|&w| w == 0 || w % self.norm_groups != 0)
        {
            return Err(Error::config(
                "/metrics/embedder/widths",
                format!(
                    "every width must be a positive multiple of {} groups",
                    self.norm_groups
                ),
            ));
        }
        Ok(())
    }
}

/// Training schedule of the embedding classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Minimum eval accuracy before the model may be used.
    pub accuracy_floor: f64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            learning_rate: 2e-3,
            seed: 0,
            accuracy_floor: 0.95,
        }
    }
}

/// A frozen texture classifier whose pooled activations serve as embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingModel {
    pub config: EmbedderConfig,
    pub params: ParamSet<f32>,
    /// Held-out accuracy measured after training.
    pub eval_accuracy: f64,
}

pub fn build_embedder(cfg: &EmbedderConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut rng = SeedStream::new(seed).named("embedder-init").rng();
    let mut params = ParamSet::new();
    let mut normal = |shape: Vec<usize>, fan_in: usize| {
        let std = (1.0 / fan_in as f64).sqrt();
        NdArray::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (std * z) as f32
        })
    };
    let mut ci = 1;
    for (s, &co) in cfg.widths.iter().enumerate() {
        params.insert(
            format!("stage{s}.conv.w"),
            normal(vec![co, ci, 3, 3], ci * 9),
        );
        params.insert(format!("stage{s}.conv.b"), NdArray::zeros([co]));
        params.insert(format!("stage{s}.norm.gain"), NdArray::ones([co]));
        params.insert(format!("stage{s}.norm.bias"), NdArray::zeros([co]));
        ci = co;
    }
    params.insert("head.w", normal(vec![cfg.classes, ci], ci));
    params.insert("head.b", NdArray::zeros([cfg.classes]));
    Ok(params)
}

/// Records the classifier; returns `(features [N,D], logits [N,K])`.
fn forward_tape(
    cfg: &EmbedderConfig,
    tape: &mut Tape<f32>,
    p: &BTreeMap<String, Var>,
    x: Var,
) -> Result<(Var, Var)> {
    let get = |name: String| p.get(&name).copied().ok_or(NdError::UnknownParam(name));
    let mut h = x;
    for s in 0..cfg.widths.len() {
        h = tape.conv2d(h, get(format!("stage{s}.conv.w"))?, 2, 1)?;
        h = tape.channel_bias(h, get(format!("stage{s}.conv.b"))?)?;
        h = tape.group_norm(
            h,
            get(format!("stage{s}.norm.gain"))?,
            get(format!("stage{s}.norm.bias"))?,
            cfg.norm_groups,
            GN_EPS as f32,
        )?;
        h = tape.silu(h)?;
    }
    let features = tape.spatial_mean(h)?;
    let logits = tape.linear(features, get("head.w".into())?, get("head.b".into())?)?;
    Ok((features, logits))
}

fn bind(tape: &mut Tape<f32>, params: &ParamSet<f32>, trainable: bool) -> BTreeMap<String, Var> {
    if trainable {
        tape.params_from(params)
    } else {
        params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect()
    }
}

impl EmbeddingModel {
    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    fn check_images(&self, images: &[ImagePatch]) -> Result<()> {
        let s = self.config.input_size;
        if let Some(p) = images.iter().find(|p| p.height() != s || p.width() != s) {
            return Err(Error::invalid(format!(
                "embedder expects {s}x{s} images, got {}x{}",
                p.height(),
                p.width()
            )));
        }
        Ok(())
    }

    fn run(&self, images: &[ImagePatch]) -> Result<(NdArray<f32>, NdArray<f32>)> {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, false);
        let x = tape.constant(ImagePatch::stack(images)?);
        let (f, l) = forward_tape(&self.config, &mut tape, &p, x)?;
        Ok((tape.value(f).clone(), tape.value(l).clone()))
    }

    /// Features and logits for every image, computed in fixed chunks.
    pub fn evaluate(
        &self,
        images: &[ImagePatch],
        mode: ExecMode,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check_images(images)?;
        let chunks: Vec<&[ImagePatch]> = images.chunks(CHUNK).collect();
        let parts = par::try_map_indexed(mode, chunks.len(), |i| self.run(chunks[i]))?;
        let (mut feats, mut logits) = (
            Vec::with_capacity(images.len()),
            Vec::with_capacity(images.len()),
        );
        let (d, k) = (self.dim(), self.config.classes);
        for (f, l) in parts {
            feats.extend(
                f.data()
                    .chunks_exact(d)
                    .map(|r| r.iter().map(|&v| v as f64).collect()),
            );
            logits.extend(
                l.data()
                    .chunks_exact(k)
                    .map(|r| r.iter().map(|&v| v as f64).collect()),
            );
        }
        Ok((feats, logits))
    }

    pub fn features(&self, images: &[ImagePatch], mode: ExecMode) -> Result<Vec<Vec<f64>>> {
        Ok(self.evaluate(images, mode)?.0)
    }

    pub fn logits(&self, images: &[ImagePatch], mode: ExecMode) -> Result<Vec<Vec<f64>>> {
        Ok(self.evaluate(images, mode)?.1)
    }

    pub fn predict(&self, images: &[ImagePatch], mode: ExecMode) -> Result<Vec<usize>> {
        Ok(self
            .logits(images, mode)?
            .iter()
            .map(|l| top_k(l, 1)[0])
            .collect())
    }

    pub fn accuracy(&self, images: &[ImagePatch], labels: &[usize], mode: ExecMode) -> Result<f64> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::invalid("accuracy needs one label per image"));
        }
        let pred = self.predict(images, mode)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let meta = EmbedderFile {
            config: self.config.clone(),
            eval_accuracy: self.eval_accuracy,
        };
        let cfg = dir.join("embedder.json");
        fs::write(&cfg, serde_json::to_string_pretty(&meta)?).at(&cfg)?;
        let params = dir.join("params.ndt");
        fs::write(&params, self.params.to_bytes()).at(&params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = dir.join("embedder.json");
        let meta: EmbedderFile = serde_json::from_str(&fs::read_to_string(&cfg).at(&cfg)?)?;
        meta.config.validate()?;
        let path = dir.join("params.ndt");
        let params = ParamSet::read_from(&mut &fs::read(&path).at(&path)?[..])?;
        let expected = build_embedder(&meta.config, 0)?;
        if params.len() != expected.len()
            || expected.iter().any(|(k, v)| {
                params
                    .get(k)
                    .map(|p| p.shape() != v.shape())
                    .unwrap_or(true)
            })
        {
            return Err(Error::invalid(format!(
                "{} does not match the embedder config",
                path.display()
            )));
        }
        Ok(Self {
            config: meta.config,
            params,
            eval_accuracy: meta.eval_accuracy,
        })
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.params.to_bytes());
        hex(&h.finalize())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbedderFile {
    config: EmbedderConfig,
    eval_accuracy: f64,
}

/// Indices of the `k` largest values, ties broken toward the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn flip_horizontal(p: &ImagePatch) -> ImagePatch {
    let (h, w) = (p.height(), p.width());
    let data = (0..h * w).map(|i| p.get(w - 1 - i % w, i / w)).collect();
    ImagePatch::from_vec(h, w, data, p.kind()).expect("same shape")
}

/// Supervised training on the corpus train split with random horizontal
/// flips. Fails with [`Error::AccuracyFloor`] when held-out accuracy stays
/// below the floor.
pub fn train_embedder(
    corpus: &Corpus,
    cfg: &EmbedderConfig,
    train: &EmbedderTrainConfig,
    mode: ExecMode,
) -> Result<EmbeddingModel> {
    if cfg.classes != corpus.specs.len() {
        return Err(Error::config(
            "/metrics/embedder/classes",
            format!(
                "corpus has {} classes, embedder expects {}",
                corpus.specs.len(),
                cfg.classes
            ),
        ));
    }
    if corpus.train.is_empty() || corpus.eval.is_empty() {
        return Err(Error::invalid(
            "embedder training needs non-empty train and eval splits",
        ));
    }
    let mut params = build_embedder(cfg, train.seed)?;
    let mut adam = Adam::new(train.learning_rate);
    let mut rng = SeedStream::new(train.seed).named("embedder-train").rng();
    let mut order: Vec<usize> = corpus.train.clone();
    let mut cursor = order.len();
    for step in 1..=train.steps {
        let mut batch = Vec::with_capacity(train.batch_size);
        let mut labels = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let item = &corpus.items[order[cursor]];
            cursor += 1;
            batch.push(if rng.random_bool(0.5) {
                flip_horizontal(&item.patch)
            } else {
                item.patch.clone()
            });
            labels.push(item.class_id);
        }
        let mut tape = Tape::new();
        let p = bind(&mut tape, &params, true);
        let x = tape.constant(ImagePatch::stack(&batch)?);
        let (_, logits) = forward_tape(cfg, &mut tape, &p, x)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        if step % 100 == 0 {
            log::info!(
                "embedder step {step}: cross-entropy {:.4}",
                tape.value(loss).item()
            );
        }
        let grads = tape.backprop_all(loss)?;
        adam.update(&mut params, &grads)?;
    }
    let mut model = EmbeddingModel {
        config: cfg.clone(),
        params,
        eval_accuracy: 0.0,
    };
    let acc = model.accuracy(&corpus.eval_patches(), &corpus.labels(&corpus.eval), mode)?;
    model.eval_accuracy = acc;
    if acc < train.accuracy_floor {
        return Err(Error::AccuracyFloor {
            accuracy: acc,
            floor: train.accuracy_floor,
        });
    }
    Ok(model)
}

/// Gaussian fit of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    /// Sample mean and covariance (n - 1 normalization) of feature rows.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::invalid(
                "moment estimation needs at least two samples",
            ));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::invalid("feature rows differ in length"));
        }
        let mut mu = DVector::zeros(d);
        for f in features {
            for (m, &v) in mu.iter_mut().zip(f) {
                *m += v;
            }
        }
        mu /= n as f64;
        let mut sigma = DMatrix::zeros(d, d);
        let mut centered = vec![0.0; d];
        for f in features {
            for ((c, &v), &m) in centered.iter_mut().zip(f).zip(mu.iter()) {
                *c = v - m;
            }
            for i in 0..d {
                let ci = centered[i];
                for j in i..d {
                    sigma[(i, j)] += ci * centered[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = sigma[(i, j)] / (n - 1) as f64;
                sigma[(i, j)] = v;
                sigma[(j, i)] = v;
            }
        }
        Ok(Self { mu, sigma, n })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Gaussian statistics of the embeddings of at least [`EMBED_FLOOR`] images.
pub fn embed_stats(
    model: &EmbeddingModel,
    images: &[ImagePatch],
    mode: ExecMode,
) -> Result<GaussianStats> {
    if images.len() < EMBED_FLOOR {
        return Err(Error::invalid(format!(
            "embedding statistics need at least {EMBED_FLOOR} images, got {}",
            images.len()
        )));
    }
    GaussianStats::from_features(&model.features(images, mode)?)
}

fn check_symmetric(m: &DMatrix<f64>, which: &str) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in i + 1..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::invalid(format!(
                    "covariance {which} is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Square root of a symmetric matrix with negative eigenvalues clipped to 0.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared Fréchet distance between two Gaussians,
/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, clamped at 0.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    check_symmetric(&a.sigma, "a")?;
    check_symmetric(&b.sigma, "b")?;
    let root_a = sqrt_psd(&a.sigma);
    let inner = &root_a * &b.sigma * &root_a;
    let cross = sqrt_psd(&inner).trace();
    let diff = (&a.mu - &b.mu).norm_squared();
    let d2 = diff + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
    Ok(d2.max(0.0))
}

/// FCD between two image sets. Both sets must hold at least D/2 images.
pub fn fcd(
    model: &EmbeddingModel,
    a: &[ImagePatch],
    b: &[ImagePatch],
    mode: ExecMode,
) -> Result<f64> {
    let floor = (model.dim() / 2).max(EMBED_FLOOR);
    if a.len() < floor || b.len() < floor {
        return Err(Error::invalid(format!(
            "FCD needs at least {floor} images per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    frechet_distance(&embed_stats(model, a, mode)?, &embed_stats(model, b, mode)?)
}

/// Disturbance applied by the perturbation battery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    GaussianNoise,
    GaussianBlur,
    SaltPepper,
    DatasetMix,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 4] = [
        PerturbationKind::GaussianNoise,
        PerturbationKind::GaussianBlur,
        PerturbationKind::SaltPepper,
        PerturbationKind::DatasetMix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::GaussianNoise => "gaussian_noise",
            PerturbationKind::GaussianBlur => "gaussian_blur",
            PerturbationKind::SaltPepper => "salt_pepper",
            PerturbationKind::DatasetMix => "dataset_mix",
        }
    }

    /// Accepts the full name or its last word (`noise`, `blur`, `pepper`, `mix`).
    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s || k.name().rsplit('_').next() == Some(s))
            .ok_or_else(|| Error::invalid(format!("unknown perturbation kind {s:?}")))
    }

    /// Default disturbance levels, starting with the identity.
    pub fn default_levels(self) -> Vec<f64> {
        match self {
            PerturbationKind::GaussianNoise => vec![0.0, 0.05, 0.1, 0.2, 0.4],
            PerturbationKind::GaussianBlur => vec![0.0, 0.5, 1.0, 1.5, 2.5],
            PerturbationKind::SaltPepper => vec![0.0, 0.01, 0.03, 0.1, 0.2],
            PerturbationKind::DatasetMix => vec![0.0, 0.1, 0.25, 0.5, 1.0],
        }
    }
}

/// A perturbation kind with its level sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub levels: Vec<f64>,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 4 {
            return Err(Error::invalid(
                "a perturbation curve needs at least four levels",
            ));
        }
        if levels[0] != 0.0 {
            return Err(Error::invalid(
                "the first perturbation level must be 0 (identity)",
            ));
        }
        if levels.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("perturbation levels must increase strictly"));
        }
        if matches!(
            kind,
            PerturbationKind::SaltPepper | PerturbationKind::DatasetMix
        ) && levels[levels.len() - 1] > 1.0
        {
            return Err(Error::invalid("fractions must not exceed 1"));
        }
        Ok(Self { kind, levels })
    }

    pub fn default_for(kind: PerturbationKind) -> Self {
        Self::new(kind, kind.default_levels()).expect("default levels are valid")
    }
}

fn blur_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(p: &ImagePatch, sigma: f64) -> ImagePatch {
    if sigma <= 0.0 {
        return p.clone();
    }
    let (h, w) = (p.height() as isize, p.width() as isize);
    let k = blur_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mirror = |i: isize, n: isize| -> usize {
        let period = 2 * n;
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - 1 - m }) as usize
    };
    let src = p.data();
    let mut tmp = vec![0.0f64; (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            tmp[(y * w + x) as usize] = (-r..=r)
                .map(|d| {
                    k[(d + r) as usize] * src[y as usize * w as usize + mirror(x + d, w)] as f64
                })
                .sum();
        }
    }
    let mut out = vec![0f32; (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            out[(y * w + x) as usize] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[mirror(y + d, h) * w as usize + x as usize])
                .sum::<f64>() as f32;
        }
    }
    ImagePatch::from_vec(h as usize, w as usize, out, p.kind()).expect("same shape")
}

/// Applies one disturbance level to a set. Randomness comes from `seed`;
/// mixing replaces image `i` by `alien[i]` for a seeded subset of indices.
pub fn perturb(
    images: &[ImagePatch],
    kind: PerturbationKind,
    level: f64,
    alien: &[ImagePatch],
    seed: u64,
) -> Result<Vec<ImagePatch>> {
    let root = SeedStream::new(seed).named("perturb").named(kind.name());
    match kind {
        PerturbationKind::GaussianNoise => images
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = root.indexed(i as u64).rng();
                let data = p
                    .data()
                    .iter()
                    .map(|&v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (v as f64 + level * z) as f32
                    })
                    .collect();
                ImagePatch::from_vec(p.height(), p.width(), data, p.kind())
            })
            .collect(),
        PerturbationKind::GaussianBlur => {
            Ok(images.iter().map(|p| gaussian_blur(p, level)).collect())
        }
        PerturbationKind::SaltPepper => images
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = root.indexed(i as u64).rng();
                let data = p
                    .data()
                    .iter()
                    .map(|&v| {
                        let hit = rng.random::<f64>() < level;
                        let white = rng.random_bool(0.5);
                        match (hit, white) {
                            (false, _) => v,
                            (true, true) => 1.0,
                            (true, false) => -1.0,
                        }
                    })
                    .collect();
                ImagePatch::from_vec(p.height(), p.width(), data, p.kind())
            })
            .collect(),
        PerturbationKind::DatasetMix => {
            if alien.len() < images.len() {
                return Err(Error::invalid(format!(
                    "mixing needs {} out-of-domain images, got {}",
                    images.len(),
                    alien.len()
                )));
            }
            let mut order: Vec<usize> = (0..images.len()).collect();
            order.shuffle(&mut root.rng());
            let replaced = (level * images.len() as f64).round() as usize;
            let mut out = images.to_vec();
            for &i in &order[..replaced.min(images.len())] {
                out[i] = alien[i].clone();
            }
            Ok(out)
        }
    }
}

/// `n` out-of-domain images from the built-in generator.
pub fn alien_set(n: usize, size: usize, seed: u64) -> Result<Vec<ImagePatch>> {
    let root = SeedStream::new(seed).named("alien-set");
    (0..n)
        .map(|i| alien_patch(size, root.indexed(i as u64).seed()))
        .collect()
}

/// Pure standard-normal noise images clamped to [-1, 1].
pub fn noise_set(n: usize, size: usize, seed: u64) -> Result<Vec<ImagePatch>> {
    let root = SeedStream::new(seed).named("noise-set");
    (0..n)
        .map(|i| {
            let mut rng = root.indexed(i as u64).rng();
            let data = (0..size * size)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z as f32
                })
                .collect();
            ImagePatch::from_vec(size, size, data, PatchKind::Synthetic)
        })
        .collect()
}

/// One point of a perturbation curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub level: f64,
    pub fcd: f64,
}

/// FCD between `real` and each disturbance level of `real`.
pub fn perturbation_battery(
    model: &EmbeddingModel,
    real: &[ImagePatch],
    spec: &PerturbationSpec,
    alien: &[ImagePatch],
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<CurvePoint>> {
    let spec = PerturbationSpec::new(spec.kind, spec.levels.clone())?;
    let base = embed_stats(model, real, mode)?;
    spec.levels
        .iter()
        .map(|&level| {
            let moved = perturb(real, spec.kind, level, alien, seed)?;
            let fcd = frechet_distance(&base, &embed_stats(model, &moved, mode)?)?;
            Ok(CurvePoint { level, fcd })
        })
        .collect()
}

/// True when FCD rises strictly from level to level.
pub fn strictly_increasing(curve: &[CurvePoint]) -> bool {
    curve.windows(2).all(|w| w[1].fcd > w[0].fcd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturbation_kinds_parse_by_full_or_short_name() {
        for k in PerturbationKind::ALL {
            assert_eq!(PerturbationKind::parse(k.name()).unwrap(), k);
        }
        assert_eq!(
            PerturbationKind::parse("blur").unwrap(),
            PerturbationKind::GaussianBlur
        );
        assert_eq!(
            PerturbationKind::parse("mix").unwrap(),
            PerturbationKind::DatasetMix
        );
        assert!(PerturbationKind::parse("gaussian").is_err());
    }

    fn stats(mu: &[f64], diag: &[f64]) -> GaussianStats {
        GaussianStats {
            mu: DVector::from_row_slice(mu),
            sigma: DMatrix::from_diagonal(&DVector::from_row_slice(diag)),
            n: 100,
        }
    }

    #[test]
    fn scalar_closed_form() {
        let d = frechet_distance(&stats(&[0.0], &[1.0]), &stats(&[1.0], &[4.0])).unwrap();
        assert!((d - 2.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn rejects_asymmetric_covariance() {
        let mut a = stats(&[0.0, 0.0], &[1.0, 1.0]);
        a.sigma[(0, 1)] = 0.5;
        assert!(frechet_distance(&a, &stats(&[0.0, 0.0], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn two_sample_moments() {
        let s = GaussianStats::from_features(&[vec![1.0, 2.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(s.mu.as_slice(), &[2.0, 4.0]);
        // Deviations (-1,-2) and (1,2), n-1 = 1.
        assert_eq!(
            s.sigma,
            DMatrix::from_row_slice(2, 2, &[2.0, 4.0, 4.0, 8.0])
        );
    }

    #[test]
    fn levels_must_start_at_identity_and_increase() {
        let k = PerturbationKind::GaussianNoise;
        assert!(PerturbationSpec::new(k, vec![0.0, 0.1, 0.2, 0.3]).is_ok());
        assert!(PerturbationSpec::new(k, vec![0.0, 0.2, 0.1, 0.3]).is_err());
        assert!(PerturbationSpec::new(k, vec![0.1, 0.2, 0.3, 0.4]).is_err());
        assert!(PerturbationSpec::new(k, vec![0.0, 0.1, 0.2]).is_err());
    }

    #[test]
    fn blur_preserves_constant_images() {
        let p = ImagePatch::filled(16, 16, 0.25, PatchKind::Real);
        for (a, b) in gaussian_blur(&p, 1.5).data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn top_k_breaks_ties_low() {
        assert_eq!(top_k(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
    }
}
