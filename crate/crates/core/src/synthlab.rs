//! Procedural cytoarchitecture-like patches with exact cell ground truth, the
//! labeled corpus built from them, and irregular brush-stroke artifact masks.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::image::{write_gray_png, ImagePatch, PatchKind};
use crate::par::{self, ExecMode};
use crate::rng::{Rng, SeedStream};

/// Standard deviation of the additive film grain.
pub const FILM_GRAIN: f64 = 0.02;
/// A candidate cell is rejected when it would cover more than this fraction
/// of an already placed cell (or vice versa).
pub const MAX_OVERLAP: f64 = 0.6;

/// Parameters of one texture family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    pub class_id: usize,
    /// Interior layer boundaries as fractions of the patch height, strictly increasing in (0, 1).
    pub layer_bounds: Vec<f64>,
    /// Cells per pixel of area, one entry per layer.
    pub density: Vec<f64>,
    pub radius_mean: Vec<f64>,
    pub radius_sd: Vec<f64>,
    /// Range of ellipse eccentricities.
    pub eccentricity: (f64, f64),
    /// Strength of the horizontal density modulation in [0, 1].
    pub columnarity: f64,
    /// Column period in pixels.
    pub column_period: f64,
    pub background: f64,
    pub cell_intensity: f64,
    /// Per-patch jitter of the layer boundaries (fraction of the height).
    pub boundary_jitter: f64,
}

impl TextureSpec {
    pub fn layers(&self) -> usize {
        self.density.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layers();
        if n == 0 {
            return Err(Error::invalid("texture spec has no layers"));
        }
        if self.layer_bounds.len() + 1 != n
            || self.radius_mean.len() != n
            || self.radius_sd.len() != n
        {
            return Err(Error::invalid(format!(
                "texture spec with {n} layers needs {} boundaries and {n} radii",
                n - 1
            )));
        }
        let mut prev = 0.0;
        for &b in &self.layer_bounds {
            if !(b > prev && b < 1.0) {
                return Err(Error::invalid(
                    "layer boundaries must increase strictly within (0, 1)",
                ));
            }
            prev = b;
        }
        if self.density.iter().any(|&d| !(d >= 0.0 && d.is_finite())) {
            return Err(Error::invalid("densities must be finite and non-negative"));
        }
        if self.radius_mean.iter().any(|&r| !(r > 0.0))
            || self.radius_sd.iter().any(|&s| !(s >= 0.0))
        {
            return Err(Error::invalid("radii must be positive"));
        }
        let (e0, e1) = self.eccentricity;
        if !(0.0..1.0).contains(&e0) || !(e0..1.0).contains(&e1) {
            return Err(Error::invalid("eccentricity range must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.columnarity) || !(self.column_period > 0.0) {
            return Err(Error::invalid(
                "columnarity must lie in [0, 1] with a positive period",
            ));
        }
        Ok(())
    }

    /// Layer edges `[0, b1, ..., 1]`.
    fn edges(&self) -> Vec<f64> {
        let mut e = vec![0.0];
        e.extend_from_slice(&self.layer_bounds);
        e.push(1.0);
        e
    }

    /// Expected cell density per row band, averaged over columns.
    pub fn density_profile(&self, bins: usize) -> Vec<f64> {
        let edges = self.edges();
        (0..bins)
            .map(|i| {
                let (lo, hi) = (i as f64 / bins as f64, (i + 1) as f64 / bins as f64);
                let mut acc = 0.0;
                for l in 0..self.layers() {
                    let overlap = (hi.min(edges[l + 1]) - lo.max(edges[l])).max(0.0);
                    acc += overlap * self.density[l];
                }
                acc * bins as f64
            })
            .collect()
    }
}

/// Bins of the vertical density profile used to compare classes.
pub const PROFILE_BINS: usize = 16;
/// Smallest allowed mean absolute difference between two class density profiles.
pub const MIN_PROFILE_DISTANCE: f64 = 0.002;

/// Mean absolute difference of the expected vertical density profiles.
pub fn profile_distance(a: &TextureSpec, b: &TextureSpec) -> f64 {
    let (pa, pb) = (
        a.density_profile(PROFILE_BINS),
        b.density_profile(PROFILE_BINS),
    );
    pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / PROFILE_BINS as f64
}

/// The built-in family of `k` texture classes. Classes differ in layering,
/// density, cell size and columnar organization.
pub fn class_specs(k: usize) -> Vec<TextureSpec> {
    #[allow(clippy::type_complexity)]
    let table: [(&[f64], &[f64], &[f64], f64, f64, f64); 8] = [
        (&[0.5], &[0.005, 0.016], &[2.4, 3.0], 0.0, 16.0, 0.62),
        (&[0.5], &[0.016, 0.005], &[3.0, 2.4], 0.0, 16.0, 0.62),
        (
            &[0.3, 0.7],
            &[0.003, 0.018, 0.007],
            &[2.6, 3.4, 2.6],
            0.9,
            16.0,
            0.58,
        ),
        (&[], &[0.004], &[3.8], 0.0, 16.0, 0.8),
        (&[], &[0.026], &[2.2], 0.9, 10.7, 0.55),
        (
            &[0.25, 0.55],
            &[0.015, 0.003, 0.015],
            &[2.8, 2.8, 2.8],
            0.0,
            16.0,
            0.60,
        ),
        (
            &[0.2, 0.45, 0.7],
            &[0.004, 0.017, 0.004, 0.017],
            &[2.6, 2.6, 2.6, 2.6],
            0.6,
            21.3,
            0.64,
        ),
        (&[0.3], &[0.0005, 0.014], &[2.4, 3.4], 0.0, 16.0, 0.72),
    ];
    (0..k)
        .map(|c| {
            let (bounds, dens, radii, col, period, bg) = table[c % table.len()];
            // Beyond eight classes, variants rescale density and size.
            let variant = (c / table.len()) as f64;
            let scale = 1.0 + 0.35 * variant;
            TextureSpec {
                class_id: c,
                layer_bounds: bounds.to_vec(),
                density: dens.iter().map(|d| d * scale + 0.004 * variant).collect(),
                radius_mean: radii.iter().map(|r| r / scale.sqrt()).collect(),
                radius_sd: radii.iter().map(|r| 0.12 * r).collect(),
                eccentricity: (0.0, 0.75),
                columnarity: col,
                column_period: period,
                background: bg,
                cell_intensity: -0.55,
                boundary_jitter: 0.04,
            }
        })
        .collect()
}

/// One rendered cell body.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub x: f64,
    pub y: f64,
    /// Semi-axes in pixels, `a >= b`.
    pub a: f64,
    pub b: f64,
    /// Orientation of the major axis in radians.
    pub theta: f64,
    pub layer: usize,
}

impl CellRecord {
    pub fn area(&self) -> f64 {
        PI * self.a * self.b
    }

    fn mean_radius(&self) -> f64 {
        (self.a * self.b).sqrt()
    }
}

/// Cell statistics of a region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub count: usize,
    /// Cells per pixel.
    pub density: f64,
    /// Mean cell area in pixels (0 without cells).
    pub mean_size: f64,
    pub region_area: usize,
}

impl CellStats {
    pub fn from_sizes(sizes: &[f64], region_area: usize) -> Self {
        let count = sizes.len();
        Self {
            count,
            density: if region_area > 0 {
                count as f64 / region_area as f64
            } else {
                0.0
            },
            mean_size: if count > 0 {
                sizes.iter().sum::<f64>() / count as f64
            } else {
                0.0
            },
            region_area,
        }
    }
}

/// Every cell rendered into a patch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub cells: Vec<CellRecord>,
}

impl GroundTruth {
    /// Statistics of the cells whose center pixel satisfies `in_region(x, y)`.
    pub fn stats(&self, size: usize, in_region: impl Fn(usize, usize) -> bool) -> CellStats {
        let area = (0..size * size)
            .filter(|&i| in_region(i % size, i / size))
            .count();
        let sizes: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| {
                let (px, py) = (c.x.floor(), c.y.floor());
                px >= 0.0
                    && py >= 0.0
                    && (px as usize) < size
                    && (py as usize) < size
                    && in_region(px as usize, py as usize)
            })
            .map(CellRecord::area)
            .collect();
        CellStats::from_sizes(&sizes, area)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.cells {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let cells = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<serde_json::Result<_>>()?;
        Ok(Self { cells })
    }
}

/// Intersection area of two discs.
fn disc_overlap(r1: f64, r2: f64, d: f64) -> f64 {
    if d >= r1 + r2 {
        return 0.0;
    }
    if d <= (r1 - r2).abs() {
        let r = r1.min(r2);
        return PI * r * r;
    }
    let a1 = r1
        * r1
        * ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1))
            .clamp(-1.0, 1.0)
            .acos();
    let a2 = r2
        * r2
        * ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2))
            .clamp(-1.0, 1.0)
            .acos();
    let k = 0.5
        * ((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
            .max(0.0)
            .sqrt();
    a1 + a2 - k
}

/// Places cells by thinning a homogeneous Poisson process per layer.
pub fn place_cells(spec: &TextureSpec, size: usize, rng: &mut Rng) -> Result<Vec<CellRecord>> {
    spec.validate()?;
    let s = size as f64;
    let mut edges = spec.edges();
    for e in edges.iter_mut().take(spec.layers()).skip(1) {
        *e += spec.boundary_jitter * (2.0 * rng.random::<f64>() - 1.0);
    }
    for i in 1..edges.len() {
        edges[i] = edges[i].max(edges[i - 1]);
    }
    let phase = rng.random::<f64>() * spec.column_period;
    let mut cells: Vec<CellRecord> = Vec::new();
    for layer in 0..spec.layers() {
        let (y0, y1) = (edges[layer] * s, edges[layer + 1] * s);
        let band = (y1 - y0) * s;
        let peak = spec.density[layer] * (1.0 + spec.columnarity);
        let mean = peak * band;
        if mean <= 0.0 {
            continue;
        }
        let candidates = Poisson::new(mean)
            .map_err(|e| Error::invalid(e.to_string()))?
            .sample(rng) as usize;
        let radius = Normal::new(spec.radius_mean[layer], spec.radius_sd[layer])
            .map_err(|e| Error::invalid(e.to_string()))?;
        for _ in 0..candidates {
            let x = rng.random::<f64>() * s;
            let y = y0 + rng.random::<f64>() * (y1 - y0);
            let keep = (1.0
                + spec.columnarity * (2.0 * PI * (x + phase) / spec.column_period).cos())
                / (1.0 + spec.columnarity);
            let accept: f64 = rng.random();
            let r = radius.sample(rng).max(1.0);
            let e = spec.eccentricity.0
                + rng.random::<f64>() * (spec.eccentricity.1 - spec.eccentricity.0);
            let squash = (1.0 - e * e).sqrt().sqrt();
            let tilt: f64 = rng.sample(StandardNormal);
            if accept >= keep {
                continue;
            }
            let cell = CellRecord {
                x,
                y,
                a: r / squash,
                b: r * squash,
                theta: PI / 2.0 + 0.35 * tilt,
                layer,
            };
            let rc = cell.mean_radius();
            let clash = cells.iter().any(|o| {
                let ro = o.mean_radius();
                let d = ((o.x - x).powi(2) + (o.y - y).powi(2)).sqrt();
                if d >= rc + ro {
                    return false;
                }
                let inter = disc_overlap(rc, ro, d);
                inter > MAX_OVERLAP * PI * rc.min(ro).powi(2)
            });
            if !clash {
                cells.push(cell);
            }
        }
    }
    Ok(cells)
}

/// Anti-aliased coverage of pixel centers by the union of cells, in [0, 1].
pub fn cell_coverage(cells: &[CellRecord], size: usize) -> Vec<f64> {
    let mut cov = vec![0.0f64; size * size];
    for c in cells {
        let (cs, sn) = (c.theta.cos(), c.theta.sin());
        let r = c.mean_radius();
        let ext = c.a + 1.5;
        let x0 = (c.x - ext).floor().max(0.0) as usize;
        let y0 = (c.y - ext).floor().max(0.0) as usize;
        let x1 = ((c.x + ext).ceil() as usize).min(size);
        let y1 = ((c.y + ext).ceil() as usize).min(size);
        for py in y0..y1 {
            for px in x0..x1 {
                let (dx, dy) = (px as f64 + 0.5 - c.x, py as f64 + 0.5 - c.y);
                let u = dx * cs + dy * sn;
                let v = -dx * sn + dy * cs;
                let rho = ((u / c.a).powi(2) + (v / c.b).powi(2)).sqrt();
                let k = (0.5 - (rho - 1.0) * r).clamp(0.0, 1.0);
                let slot = &mut cov[py * size + px];
                *slot = slot.max(k);
            }
        }
    }
    cov
}

/// Renders cells on the spec background, optionally with film grain.
pub fn render(
    spec: &TextureSpec,
    cells: &[CellRecord],
    size: usize,
    grain: Option<&mut Rng>,
) -> Result<ImagePatch> {
    let cov = cell_coverage(cells, size);
    let (bg, fg) = (spec.background, spec.cell_intensity);
    let mut data: Vec<f32> = cov.iter().map(|&k| (bg + (fg - bg) * k) as f32).collect();
    if let Some(rng) = grain {
        for v in &mut data {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 + FILM_GRAIN * z) as f32;
        }
    }
    ImagePatch::from_vec(size, size, data, PatchKind::Synthetic)
}

/// Draws one patch and its ground truth.
pub fn generate_patch(
    spec: &TextureSpec,
    size: usize,
    seed: u64,
) -> Result<(ImagePatch, GroundTruth)> {
    if size < 32 {
        return Err(Error::invalid(format!("patch size {size} is below 32")));
    }
    let stream = SeedStream::new(seed).named("patch");
    let cells = place_cells(spec, size, &mut stream.named("cells").rng())?;
    let patch = render(spec, &cells, size, Some(&mut stream.named("grain").rng()))?;
    Ok((patch, GroundTruth { cells }))
}

/// A labeled patch of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub name: String,
    pub class_id: usize,
    pub seed: u64,
    pub patch: ImagePatch,
    pub truth: GroundTruth,
}

/// Labeled patches with a per-class 85/15 train/eval split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub size: usize,
    pub seed: u64,
    pub specs: Vec<TextureSpec>,
    pub items: Vec<CorpusItem>,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ManifestItem {
    file: String,
    class_id: usize,
    seed: u64,
}

/// `corpus.json`.
#[derive(Serialize, Deserialize)]
struct Manifest {
    size: usize,
    seed: u64,
    classes: Vec<TextureSpec>,
    items: Vec<ManifestItem>,
    train: Vec<String>,
    eval: Vec<String>,
}

/// Number of eval items of a class with `n` patches.
pub fn eval_count(n: usize) -> usize {
    (n * 15 + 50) / 100
}

impl Corpus {
    pub fn train_patches(&self) -> Vec<ImagePatch> {
        self.train
            .iter()
            .map(|&i| self.items[i].patch.clone())
            .collect()
    }

    pub fn eval_patches(&self) -> Vec<ImagePatch> {
        self.eval
            .iter()
            .map(|&i| self.items[i].patch.clone())
            .collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.items[i].class_id).collect()
    }

    /// Writes PNGs, per-patch ground truth (`*.cells.jsonl`) and `corpus.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        for item in &self.items {
            item.patch
                .save_png(&dir.join(format!("{}.png", item.name)))?;
            let gt = dir.join(format!("{}.cells.jsonl", item.name));
            let mut f = fs::File::create(&gt).at(&gt)?;
            f.write_all(item.truth.to_jsonl()?.as_bytes()).at(&gt)?;
        }
        let manifest = Manifest {
            size: self.size,
            seed: self.seed,
            classes: self.specs.clone(),
            items: self
                .items
                .iter()
                .map(|i| ManifestItem {
                    file: format!("{}.png", i.name),
                    class_id: i.class_id,
                    seed: i.seed,
                })
                .collect(),
            train: self
                .train
                .iter()
                .map(|&i| self.items[i].name.clone())
                .collect(),
            eval: self
                .eval
                .iter()
                .map(|&i| self.items[i].name.clone())
                .collect(),
        };
        let path = dir.join("corpus.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("corpus.json");
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path).at(&path)?)?;
        let mut items = Vec::with_capacity(manifest.items.len());
        for m in &manifest.items {
            let name = m.file.trim_end_matches(".png").to_string();
            let patch = ImagePatch::load_png(&dir.join(&m.file), PatchKind::Synthetic)?;
            let gt = dir.join(format!("{name}.cells.jsonl"));
            let truth = GroundTruth::from_jsonl(&fs::read_to_string(&gt).at(&gt)?)?;
            items.push(CorpusItem {
                name,
                class_id: m.class_id,
                seed: m.seed,
                patch,
                truth,
            });
        }
        let index = |names: &[String]| -> Result<Vec<usize>> {
            names
                .iter()
                .map(|n| {
                    items
                        .iter()
                        .position(|i| &i.name == n)
                        .ok_or_else(|| Error::invalid(format!("split names unknown patch {n}")))
                })
                .collect()
        };
        let train = index(&manifest.train)?;
        let eval = index(&manifest.eval)?;
        Ok(Self {
            size: manifest.size,
            seed: manifest.seed,
            specs: manifest.classes,
            items,
            train,
            eval,
        })
    }
}

/// `k` classes of `n_per_class` patches each. Every class is split 85/15
/// into disjoint train and eval sets.
pub fn make_corpus(
    k: usize,
    n_per_class: usize,
    size: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<Corpus> {
    if k < 2 {
        return Err(Error::invalid("a corpus needs at least two classes"));
    }
    let specs = class_specs(k);
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            let d = profile_distance(a, b);
            if d < MIN_PROFILE_DISTANCE {
                return Err(Error::invalid(format!(
                    "classes {} and {} are not separable (profile distance {d:.4})",
                    a.class_id, b.class_id
                )));
            }
        }
    }
    let root = SeedStream::new(seed).named("corpus");
    let items = par::try_map_indexed(mode, k * n_per_class, |i| {
        let (class_id, j) = (i / n_per_class, i % n_per_class);
        let item_seed = root.indexed(i as u64).seed();
        let (patch, truth) = generate_patch(&specs[class_id], size, item_seed)?;
        Ok::<_, Error>(CorpusItem {
            name: format!("c{class_id}_{j:05}"),
            class_id,
            seed: item_seed,
            patch,
            truth,
        })
    })?;
    let mut split_rng = root.named("split").rng();
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for c in 0..k {
        let mut idx: Vec<usize> = (c * n_per_class..(c + 1) * n_per_class).collect();
        idx.shuffle(&mut split_rng);
        let ne = eval_count(n_per_class);
        let mut e = idx[..ne].to_vec();
        let mut t = idx[ne..].to_vec();
        e.sort_unstable();
        t.sort_unstable();
        eval.extend(e);
        train.extend(t);
    }
    Ok(Corpus {
        size,
        seed,
        specs,
        items,
        train,
        eval,
    })
}

/// Binary raster; `true` marks a known pixel, `false` a hole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    size: usize,
    known: Vec<bool>,
}

impl Mask {
    pub fn new(size: usize, known: Vec<bool>) -> Result<Self> {
        if known.len() != size * size {
            return Err(Error::invalid(format!(
                "mask of {} pixels is not {size}x{size}",
                known.len()
            )));
        }
        Ok(Self { size, known })
    }

    pub fn all_known(size: usize) -> Self {
        Self {
            size,
            known: vec![true; size * size],
        }
    }

    pub fn all_hole(size: usize) -> Self {
        Self {
            size,
            known: vec![false; size * size],
        }
    }

    /// Builds a mask from 0/1 values; anything else is an error.
    pub fn from_values(size: usize, values: &[f32]) -> Result<Self> {
        let known = values
            .iter()
            .map(|&v| match v {
                1.0 => Ok(true),
                0.0 => Ok(false),
                other => Err(Error::invalid(format!("mask value {other} is not binary"))),
            })
            .collect::<Result<_>>()?;
        Self::new(size, known)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_known(&self, x: usize, y: usize) -> bool {
        self.known[y * self.size + x]
    }

    pub fn known(&self) -> &[bool] {
        &self.known
    }

    /// 1 for known, 0 for hole.
    pub fn values(&self) -> Vec<f32> {
        self.known
            .iter()
            .map(|&k| if k { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn hole_pixels(&self) -> usize {
        self.known.iter().filter(|&&k| !k).count()
    }

    /// Fraction of hole pixels.
    pub fn coverage(&self) -> f64 {
        self.hole_pixels() as f64 / self.known.len() as f64
    }

    /// 8-bit PNG with 255 for known pixels and 0 for holes.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .known
            .iter()
            .map(|&k| if k { 255 } else { 0 })
            .collect();
        write_gray_png(path, self.size, self.size, &bytes)
    }

    /// Reads a square 8-bit mask PNG; values at or above 128 count as known.
    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, bytes) = crate::image::read_gray_png(path)?;
        if w != h {
            return Err(Error::invalid(format!(
                "mask {} is {w}x{h}, not square",
                path.display()
            )));
        }
        Self::new(w, bytes.iter().map(|&b| b >= 128).collect())
    }

    /// Known pixels reachable from the border through 4-connected known pixels.
    pub fn border_connected_known(&self) -> Vec<bool> {
        let s = self.size;
        let mut seen = vec![false; s * s];
        let mut queue = VecDeque::new();
        for i in 0..s {
            for (x, y) in [(i, 0), (i, s - 1), (0, i), (s - 1, i)] {
                let p = y * s + x;
                if self.known[p] && !seen[p] {
                    seen[p] = true;
                    queue.push_back(p);
                }
            }
        }
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % s, p / s);
            let mut visit = |q: usize| {
                if self.known[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < s {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - s);
            }
            if y + 1 < s {
                visit(p + s);
            }
        }
        seen
    }

    /// Pixels in a one-pixel ring just outside the hole (known, 4-adjacent to a hole pixel).
    pub fn boundary_ring(&self) -> Vec<usize> {
        let s = self.size;
        (0..s * s)
            .filter(|&p| self.known[p] && neighbors(p, s).any(|q| !self.known[q]))
            .collect()
    }
}

fn neighbors(p: usize, s: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % s, p / s);
    [
        (x > 0).then(|| p - 1),
        (x + 1 < s).then(|| p + 1),
        (y > 0).then(|| p - s),
        (y + 1 < s).then(|| p + s),
    ]
    .into_iter()
    .flatten()
}

const MASK_TOLERANCE: f64 = 0.01;
const MASK_ROUNDS: usize = 64;

fn stamp_disc(hole: &mut [bool], s: usize, cx: f64, cy: f64, r: f64) {
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil().max(0.0) as usize).min(s);
    let y1 = ((cy + r).ceil().max(0.0) as usize).min(s);
    for y in y0..y1 {
        for x in x0..x1 {
            if (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= r * r {
                hole[y * s + x] = true;
            }
        }
    }
}

/// One random-walk brush stroke: random width in [4, 16] px, random turns.
fn brush_stroke(hole: &mut [bool], s: usize, rng: &mut Rng) {
    let width = rng.random_range(4.0..=16.0);
    let mut x = rng.random::<f64>() * s as f64;
    let mut y = rng.random::<f64>() * s as f64;
    let mut angle = rng.random::<f64>() * 2.0 * PI;
    for _ in 0..rng.random_range(2..=6) {
        angle += rng.random_range(-PI / 2.0..PI / 2.0);
        let len = rng.random_range(4.0..=0.3 * s as f64);
        let steps = len.ceil() as usize;
        for _ in 0..steps {
            stamp_disc(hole, s, x, y, width / 2.0);
            x = (x + angle.cos()).clamp(0.0, s as f64);
            y = (y + angle.sin()).clamp(0.0, s as f64);
        }
        stamp_disc(hole, s, x, y, width / 2.0);
    }
}

/// Irregular artifact mask with hole coverage within ±1 % of `target`.
/// Known pixels always stay connected to the border.
pub fn make_mask(size: usize, target: f64, seed: u64) -> Result<Mask> {
    if !(0.05..=0.50).contains(&target) {
        return Err(Error::invalid(format!(
            "target coverage {target} outside [0.05, 0.50]"
        )));
    }
    let mut rng = SeedStream::new(seed).named("mask").rng();
    let area = size * size;
    let goal = (target * area as f64).round() as usize;
    let mut hole = vec![false; area];
    while hole.iter().filter(|&&h| h).count() < goal {
        brush_stroke(&mut hole, size, &mut rng);
    }
    let mut mask = Mask {
        size,
        known: hole.iter().map(|&h| !h).collect(),
    };
    for _ in 0..MASK_ROUNDS {
        // Fill known islands cut off from the border.
        let reach = mask.border_connected_known();
        for (k, r) in mask.known.iter_mut().zip(&reach) {
            *k = *k && *r;
        }
        let count = mask.hole_pixels();
        if count == goal {
            break;
        }
        // Move one boundary pixel at a time toward the goal.
        let grow = count < goal;
        let mut frontier: Vec<usize> = (0..area)
            .filter(|&p| mask.known[p] == grow && neighbors(p, size).any(|q| mask.known[q] != grow))
            .collect();
        frontier.shuffle(&mut rng);
        let delta = count.abs_diff(goal);
        for &p in frontier.iter().take(delta) {
            mask.known[p] = !grow;
        }
    }
    let achieved = mask.coverage();
    if (achieved - target).abs() > MASK_TOLERANCE || mask.border_connected_known() != mask.known {
        return Err(Error::CoverageUnreachable {
            target,
            achieved,
            iterations: MASK_ROUNDS,
        });
    }
    Ok(mask)
}

/// Out-of-domain images (random rectangles and stripes) used for dataset mixing.
pub fn alien_patch(size: usize, seed: u64) -> Result<ImagePatch> {
    let mut rng = SeedStream::new(seed).named("alien").rng();
    let mut data = vec![rng.random_range(-1.0..1.0f32); size * size];
    for _ in 0..rng.random_range(3..8) {
        let v = rng.random_range(-1.0..1.0f32);
        if rng.random_bool(0.5) {
            let (x0, y0) = (rng.random_range(0..size), rng.random_range(0..size));
            let (w, h) = (
                rng.random_range(4..=size / 2),
                rng.random_range(4..=size / 2),
            );
            for y in y0..(y0 + h).min(size) {
                for x in x0..(x0 + w).min(size) {
                    data[y * size + x] = v;
                }
            }
        } else {
            let period = rng.random_range(4.0..16.0f64);
            let angle = rng.random::<f64>() * PI;
            let (c, s) = (angle.cos(), angle.sin());
            for y in 0..size {
                for x in 0..size {
                    if ((x as f64 * c + y as f64 * s) / period).fract() < 0.5 {
                        data[y * size + x] = 0.5 * (data[y * size + x] + v);
                    }
                }
            }
        }
    }
    ImagePatch::from_vec(size, size, data, PatchKind::Synthetic)
}
