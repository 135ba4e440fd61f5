//! Downstream validation of repairs: cell statistics inside the hole and
//! classification consistency of the whole patch, binned by hole coverage.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{median, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::metrics::{fcd, top_k, EmbeddingModel, EMBED_FLOOR};
use crate::par::{self, ExecMode};
use crate::repaint::{boundary_discontinuity, mean_fill, repaint_seeded, Mask};
use crate::rng::SeedStream;
use crate::synthlab::{make_mask, CellStats, Corpus};

/// Smallest and largest component areas counted as cells.
pub const CELL_AREA: (usize, usize) = (4, 400);
/// Regions below this many pixels give low-confidence statistics.
pub const MIN_REGION: usize = 64;
/// Minimum gap between the two intensity class means for any foreground.
pub const MIN_CONTRAST: f64 = 0.25;
const REL_EPS: f64 = 1e-9;

/// A connected dark component accepted as a cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedCell {
    pub x: f64,
    pub y: f64,
    pub area: usize,
}

/// Cells detected in a region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub stats: CellStats,
    pub cells: Vec<DetectedCell>,
    pub threshold: Option<f64>,
    pub low_confidence: bool,
}

/// Two-means threshold of the intensity histogram, `None` when the image
/// has no second mode.
pub fn two_means_threshold(data: &[f32]) -> Option<f64> {
    if data.is_empty() {
        return None;
    }
    let mut t = data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64;
    let (mut lo, mut hi) = (t, t);
    for _ in 0..100 {
        let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
        for &v in data {
            let v = v as f64;
            if v < t {
                s0 += v;
                n0 += 1;
            } else {
                s1 += v;
                n1 += 1;
            }
        }
        if n0 == 0 || n1 == 0 {
            return None;
        }
        lo = s0 / n0 as f64;
        hi = s1 / n1 as f64;
        let next = 0.5 * (lo + hi);
        if (next - t).abs() < 1e-9 {
            t = next;
            break;
        }
        t = next;
    }
    (hi - lo >= MIN_CONTRAST).then_some(t)
}

/// Dark 4-connected components with area in [`CELL_AREA`] over the whole patch.
pub fn find_cells(patch: &ImagePatch) -> (Vec<DetectedCell>, Option<f64>) {
    let (h, w) = (patch.height(), patch.width());
    let Some(t) = two_means_threshold(patch.data()) else {
        return (Vec::new(), None);
    };
    let dark: Vec<bool> = patch.data().iter().map(|&v| (v as f64) < t).collect();
    let mut label = vec![false; h * w];
    let mut cells = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !dark[start] || label[start] {
            continue;
        }
        label[start] = true;
        queue.push_back(start);
        let (mut area, mut sx, mut sy) = (0usize, 0.0f64, 0.0f64);
        while let Some(p) = queue.pop_front() {
            let (x, y) = (p % w, p / w);
            area += 1;
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            let mut push = |q: usize| {
                if dark[q] && !label[q] {
                    label[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        if (CELL_AREA.0..=CELL_AREA.1).contains(&area) {
            cells.push(DetectedCell {
                x: sx / area as f64,
                y: sy / area as f64,
                area,
            });
        }
    }
    (cells, Some(t))
}

/// Cells whose centroid pixel lies in `region` (row-major, `true` = inside).
pub fn detect_cells(patch: &ImagePatch, region: &[bool]) -> Result<Detection> {
    let (h, w) = (patch.height(), patch.width());
    if region.len() != h * w {
        return Err(Error::invalid("region raster does not match the patch"));
    }
    let area = region.iter().filter(|&&r| r).count();
    if area == 0 {
        return Err(Error::invalid("cell detection region is empty"));
    }
    let (all, threshold) = find_cells(patch);
    let cells: Vec<DetectedCell> = all
        .into_iter()
        .filter(|c| region[(c.y as usize).min(h - 1) * w + (c.x as usize).min(w - 1)])
        .collect();
    let sizes: Vec<f64> = cells.iter().map(|c| c.area as f64).collect();
    Ok(Detection {
        stats: CellStats::from_sizes(&sizes, area),
        cells,
        threshold,
        low_confidence: area < MIN_REGION,
    })
}

/// The hole of a mask as a region raster.
pub fn hole_region(mask: &Mask) -> Vec<bool> {
    mask.known().iter().map(|&k| !k).collect()
}

/// Relative errors of density and mean size inside a hole.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStatError {
    pub density: f64,
    pub size: f64,
    /// The intact hole had no cells but the repair did.
    pub degenerate: bool,
    pub low_confidence: bool,
    pub intact: CellStats,
    pub repaired: CellStats,
}

fn relative(repaired: f64, intact: f64) -> (f64, bool) {
    if intact == 0.0 {
        return if repaired == 0.0 {
            (0.0, false)
        } else {
            (1.0, true)
        };
    }
    ((repaired - intact).abs() / intact.max(REL_EPS), false)
}

pub fn cellstat_error(
    intact: &ImagePatch,
    repaired: &ImagePatch,
    mask: &Mask,
) -> Result<CellStatError> {
    if intact.height() != repaired.height() || intact.width() != repaired.width() {
        return Err(Error::invalid(
            "intact and repaired patches differ in shape",
        ));
    }
    let hole = hole_region(mask);
    let a = detect_cells(intact, &hole)?;
    let b = detect_cells(repaired, &hole)?;
    let (density, d1) = relative(b.stats.density, a.stats.density);
    let (size, d2) = relative(b.stats.mean_size, a.stats.mean_size);
    Ok(CellStatError {
        density,
        size,
        degenerate: d1 || d2,
        low_confidence: a.low_confidence,
        intact: a.stats,
        repaired: b.stats,
    })
}

/// `(k1, k2)`: top-1 agreement, and intact top-1 within repaired top-2.
pub fn consistency_from_logits(intact: &[f64], repaired: &[f64]) -> (bool, bool) {
    let want = top_k(intact, 1)[0];
    let got = top_k(repaired, 2);
    (got[0] == want, got.contains(&want))
}

pub fn classification_consistency(
    model: &EmbeddingModel,
    intact: &ImagePatch,
    repaired: &ImagePatch,
) -> Result<(bool, bool)> {
    let logits = model.logits(&[intact.clone(), repaired.clone()], ExecMode::Sequential)?;
    Ok(consistency_from_logits(&logits[0], &logits[1]))
}

/// Parameters of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n: usize,
    pub jump: usize,
    pub seed: u64,
    pub coverage_min: f64,
    pub coverage_max: f64,
    pub bin_width: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n: 400,
            jump: 5,
            seed: 0,
            coverage_min: 0.05,
            coverage_max: 0.50,
            bin_width: 0.05,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jump == 0 {
            return Err(Error::config("/evaluate/jump", "must be at least 1"));
        }
        if !(0.05 <= self.coverage_min
            && self.coverage_min < self.coverage_max
            && self.coverage_max <= 0.50)
        {
            return Err(Error::config(
                "/evaluate/coverage_min",
                "coverage range must lie within [0.05, 0.50]",
            ));
        }
        if !(self.bin_width > 0.0) {
            return Err(Error::config("/evaluate/bin_width", "must be positive"));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        ((self.coverage_max - self.coverage_min) / self.bin_width - 1e-9).ceil() as usize
    }

    /// Bin of a realized coverage; values outside the range go to the end bins.
    pub fn bin_of(&self, coverage: f64) -> usize {
        let raw = ((coverage - self.coverage_min) / self.bin_width).floor();
        (raw.max(0.0) as usize).min(self.bins() - 1)
    }

    pub fn bin_range(&self, bin: usize) -> (f64, f64) {
        let lo = self.coverage_min + bin as f64 * self.bin_width;
        (lo, (lo + self.bin_width).min(self.coverage_max))
    }
}

/// Everything measured for one evaluated patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchResult {
    pub index: usize,
    pub item: String,
    pub seed: u64,
    pub target_coverage: f64,
    pub coverage: f64,
    pub bin: usize,
    pub repaint: CellStatError,
    pub baseline: CellStatError,
    pub k1: bool,
    pub k2: bool,
    pub boundary: Option<f64>,
}

/// Aggregates of one coverage bin. Rates and medians are absent for empty bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub range: (f64, f64),
    pub n: usize,
    pub k1_rate: Option<f64>,
    pub k2_rate: Option<f64>,
    pub density_err_median: Option<f64>,
    pub size_err_median: Option<f64>,
    pub baseline_density_err_median: Option<f64>,
    pub baseline_size_err_median: Option<f64>,
}

/// Per-bin consistency and cell statistics of an evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub config: EvalConfig,
    pub checkpoint: String,
    pub embedder: String,
    pub bins: Vec<BinReport>,
    pub pooled_k1_rate: Option<f64>,
    pub pooled_k2_rate: Option<f64>,
    pub density_err_median: Option<f64>,
    pub size_err_median: Option<f64>,
    pub baseline_density_err_median: Option<f64>,
    pub baseline_size_err_median: Option<f64>,
    /// Spearman correlation of per-bin k1 rate with bin midpoints.
    pub k1_trend: Option<f64>,
    pub fcd_repaired_vs_intact: Option<f64>,
    pub fcd_baseline_vs_intact: Option<f64>,
    pub patches: Vec<PatchResult>,
}

fn rate(flags: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for f in flags {
        hit += f as usize;
        n += 1;
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

fn med(values: Vec<f64>) -> Option<f64> {
    (!values.is_empty()).then(|| median(&values))
}

/// Ranks with ties averaged, 1-based.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side is constant or
/// fewer than two pairs exist.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Aggregates patch results into bins.
pub fn summarize(cfg: &EvalConfig, patches: &[PatchResult]) -> Vec<BinReport> {
    (0..cfg.bins())
        .map(|b| {
            let inside: Vec<&PatchResult> = patches.iter().filter(|p| p.bin == b).collect();
            BinReport {
                range: cfg.bin_range(b),
                n: inside.len(),
                k1_rate: rate(inside.iter().map(|p| p.k1)),
                k2_rate: rate(inside.iter().map(|p| p.k2)),
                density_err_median: med(inside.iter().map(|p| p.repaint.density).collect()),
                size_err_median: med(inside.iter().map(|p| p.repaint.size).collect()),
                baseline_density_err_median: med(inside
                    .iter()
                    .map(|p| p.baseline.density)
                    .collect()),
                baseline_size_err_median: med(inside.iter().map(|p| p.baseline.size).collect()),
            }
        })
        .collect()
}

/// Repaints `cfg.n` eval patches (cycling through the split) under random
/// masks, and compares each repair and a mean-fill baseline with the intact
/// patch. Patch `i` is replayable from its recorded seed.
pub fn run_evaluation(
    schedule: &NoiseSchedule,
    model: &Denoiser,
    embedder: &EmbeddingModel,
    corpus: &Corpus,
    cfg: &EvalConfig,
    mode: ExecMode,
) -> Result<ConsistencyReport> {
    cfg.validate()?;
    if cfg.n > 0 && corpus.eval.is_empty() {
        return Err(Error::invalid("corpus has no eval split"));
    }
    let results = par::try_map_indexed(mode, cfg.n, |i| {
        let seed = patch_seed(cfg, i);
        evaluate_patch(schedule, model, embedder, corpus, cfg, i, seed).map_err(|e| Error::Stage {
            patch: i,
            seed,
            source: Box::new(e),
        })
    })?;
    let (patches, images): (Vec<PatchResult>, Vec<(ImagePatch, ImagePatch, ImagePatch)>) =
        results.into_iter().unzip();

    let (mut fcd_rep, mut fcd_base) = (None, None);
    if patches.len() >= EMBED_FLOOR.max(embedder.dim() / 2) {
        let intact: Vec<ImagePatch> = images.iter().map(|t| t.0.clone()).collect();
        let repaired: Vec<ImagePatch> = images.iter().map(|t| t.1.clone()).collect();
        let baseline: Vec<ImagePatch> = images.iter().map(|t| t.2.clone()).collect();
        fcd_rep = Some(fcd(embedder, &repaired, &intact, mode)?);
        fcd_base = Some(fcd(embedder, &baseline, &intact, mode)?);
    }

    let bins = summarize(cfg, &patches);
    let (mids, k1s): (Vec<f64>, Vec<f64>) = bins
        .iter()
        .filter_map(|b| b.k1_rate.map(|r| (0.5 * (b.range.0 + b.range.1), r)))
        .unzip();
    Ok(ConsistencyReport {
        config: cfg.clone(),
        checkpoint: model.hash(),
        embedder: embedder.hash(),
        pooled_k1_rate: rate(patches.iter().map(|p| p.k1)),
        pooled_k2_rate: rate(patches.iter().map(|p| p.k2)),
        density_err_median: med(patches.iter().map(|p| p.repaint.density).collect()),
        size_err_median: med(patches.iter().map(|p| p.repaint.size).collect()),
        baseline_density_err_median: med(patches.iter().map(|p| p.baseline.density).collect()),
        baseline_size_err_median: med(patches.iter().map(|p| p.baseline.size).collect()),
        k1_trend: spearman(&mids, &k1s),
        fcd_repaired_vs_intact: fcd_rep,
        fcd_baseline_vs_intact: fcd_base,
        bins,
        patches,
    })
}

/// Target coverage and mask of evaluation patch `seed`.
pub fn eval_mask(cfg: &EvalConfig, size: usize, seed: u64) -> Result<(f64, Mask)> {
    let stream = SeedStream::new(seed);
    let target = stream
        .named("coverage")
        .rng()
        .random_range(cfg.coverage_min..=cfg.coverage_max);
    Ok((
        target,
        make_mask(size, target, stream.named("mask").seed())?,
    ))
}

fn evaluate_patch(
    schedule: &NoiseSchedule,
    model: &Denoiser,
    embedder: &EmbeddingModel,
    corpus: &Corpus,
    cfg: &EvalConfig,
    index: usize,
    seed: u64,
) -> Result<(PatchResult, (ImagePatch, ImagePatch, ImagePatch))> {
    let item = &corpus.items[corpus.eval[index % corpus.eval.len()]];
    let intact = &item.patch;
    let (target, mask) = eval_mask(cfg, intact.height(), seed)?;
    let repaired = repaint_seeded(
        schedule,
        model,
        intact,
        &mask,
        cfg.jump,
        SeedStream::new(seed).named("repaint").seed(),
    )?;
    let baseline = mean_fill(intact, &mask)?;
    let logits = embedder.logits(&[intact.clone(), repaired.clone()], ExecMode::Sequential)?;
    let (k1, k2) = consistency_from_logits(&logits[0], &logits[1]);
    let result = PatchResult {
        index,
        item: item.name.clone(),
        seed,
        target_coverage: target,
        coverage: mask.coverage(),
        bin: cfg.bin_of(mask.coverage()),
        repaint: cellstat_error(intact, &repaired, &mask)?,
        baseline: cellstat_error(intact, &baseline, &mask)?,
        k1,
        k2,
        boundary: boundary_discontinuity(&repaired, &mask),
    };
    Ok((result, (intact.clone(), repaired, baseline)))
}

/// Per-patch seed of evaluation patch `index`.
pub fn patch_seed(cfg: &EvalConfig, index: usize) -> u64 {
    SeedStream::new(cfg.seed)
        .named("evaluate")
        .indexed(index as u64)
        .seed()
}

/// Boundary-ring discontinuity of repairs with jump `jump` on the first `n`
/// (patch, mask, seed) triples of the evaluation defined by `cfg`. Index `i`
/// matches `PatchResult::boundary` of [`run_evaluation`] when `jump == cfg.jump`.
pub fn boundary_discontinuities(
    schedule: &NoiseSchedule,
    model: &Denoiser,
    corpus: &Corpus,
    cfg: &EvalConfig,
    jump: usize,
    n: usize,
    mode: ExecMode,
) -> Result<Vec<Option<f64>>> {
    cfg.validate()?;
    if corpus.eval.is_empty() {
        return Err(Error::invalid("corpus has no eval split"));
    }
    par::try_map_indexed(mode, n, |i| {
        let seed = patch_seed(cfg, i);
        let patch = &corpus.items[corpus.eval[i % corpus.eval.len()]].patch;
        let (_, mask) = eval_mask(cfg, patch.height(), seed)?;
        let out = repaint_seeded(
            schedule,
            model,
            patch,
            &mask,
            jump,
            SeedStream::new(seed).named("repaint").seed(),
        )?;
        Ok(boundary_discontinuity(&out, &mask))
    })
}

/// Mean of the defined values, `None` when there are none.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_of_monotone_sequences() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), None);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn bins_partition_the_range() {
        let cfg = EvalConfig::default();
        assert_eq!(cfg.bins(), 9);
        assert_eq!(cfg.bin_of(0.04), 0);
        assert_eq!(cfg.bin_of(0.0999), 0);
        assert_eq!(cfg.bin_of(0.10), 1);
        assert_eq!(cfg.bin_of(0.50), 8);
        assert_eq!(cfg.bin_of(0.51), 8);
        for b in 0..8 {
            assert!((cfg.bin_range(b).1 - cfg.bin_range(b + 1).0).abs() < 1e-12);
        }
        assert!((cfg.bin_range(8).1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn consistency_flags() {
        assert_eq!(
            consistency_from_logits(&[0.0, 2.0, 1.0], &[0.0, 2.0, 1.0]),
            (true, true)
        );
        assert_eq!(
            consistency_from_logits(&[0.0, 2.0, 1.0], &[0.0, 1.0, 2.0]),
            (false, true)
        );
        assert_eq!(
            consistency_from_logits(&[0.0, 2.0, 1.0], &[3.0, 1.0, 2.0]),
            (false, false)
        );
    }

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative(0.0, 0.0), (0.0, false));
        assert_eq!(relative(2.0, 0.0), (1.0, true));
        assert_eq!(relative(0.0, 2.0), (1.0, false));
        assert_eq!(relative(3.0, 2.0), (0.5, false));
    }
}
