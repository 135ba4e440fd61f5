//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 7-10 train the compact denoiser twice and repaint hundreds of
//! patches, which takes hours on a single core. Set `ACCEPTANCE_ONLY` to a
//! comma-separated list of criterion numbers to run a subset (criteria 8-10
//! need 7). A failing criterion is reported, not panicked on; the process
//! exits non-zero only when `ACCEPTANCE_STRICT` is set.

mod common;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng as _;
use repaintlab::denoiser::{Denoiser, DenoiserConfig};
use repaintlab::diffusion::{median, train_with, NoSink, NoiseSchedule, TrainConfig};
use repaintlab::evalharness::{
    boundary_discontinuities, cellstat_error, eval_mask, mean_defined, patch_seed, run_evaluation,
    ConsistencyReport, EvalConfig,
};
use repaintlab::image::{ImagePatch, PatchKind};
use repaintlab::metrics::{
    alien_set, fcd, frechet_distance, noise_set, perturbation_battery, strictly_increasing,
    train_embedder, EmbedderConfig, EmbedderTrainConfig, EmbeddingModel, GaussianStats,
    PerturbationKind, PerturbationSpec,
};
use repaintlab::par::ExecMode;
use repaintlab::repaint::{make_plan, repaint_seeded, Transition};
use repaintlab::rng::SeedStream;
use repaintlab::synthlab::{class_specs, generate_patch, make_corpus, make_mask, Corpus};

const CORPUS_SEED: u64 = 0;
const LOSS_CEILING: f64 = 0.15;
const CELLSTAT_CEILING: f64 = 0.15;
const K1_FLOOR: f64 = 0.70;

/// Desk-scale denoiser used by the end-to-end criteria.
fn compact_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        input_size: 64,
        in_channels: 1,
        base_channels: 8,
        channel_mult: vec![1, 1, 2, 4],
        res_blocks_encoder: vec![1, 2, 2, 2],
        attention_resolutions: vec![8, 16],
        time_embed_dim: 32,
        out_channels: 2,
        diffusion_steps: 64,
        attention_heads: 1,
        ..DenoiserConfig::default()
    }
}

fn compact_training() -> TrainConfig {
    TrainConfig {
        learning_rate: 5e-4,
        batch_size: 16,
        steps: 8000,
        seed: 0,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Shared artifacts of the end-to-end criteria.
#[derive(Default)]
struct Shared {
    corpus: Option<Corpus>,
    embedder: Option<EmbeddingModel>,
    denoiser: Option<Denoiser>,
    report: Option<ConsistencyReport>,
}

impl Shared {
    fn corpus(&mut self) -> &Corpus {
        self.corpus.get_or_insert_with(|| {
            make_corpus(8, 500, 64, CORPUS_SEED, ExecMode::Parallel).unwrap()
        })
    }

    fn embedder(&mut self) -> EmbeddingModel {
        if self.embedder.is_none() {
            let corpus = self.corpus().clone();
            let model = train_embedder(
                &corpus,
                &EmbedderConfig::default(),
                &EmbedderTrainConfig::default(),
                ExecMode::Parallel,
            )
            .unwrap();
            self.embedder = Some(model);
        }
        self.embedder.clone().unwrap()
    }
}

fn out_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn hand_cosine_betas(steps: usize) -> Vec<f64> {
    let s = 0.008;
    let f = |t: f64| {
        (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2)
    };
    (1..=steps)
        .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999))
        .collect()
}

fn c1_schedule() -> Outcome {
    let s = NoiseSchedule::cosine(4).unwrap();
    let want = hand_cosine_betas(4);
    let worst = (1..=4)
        .map(|t| (s.beta(t) - want[t - 1]).abs())
        .fold(0.0, f64::max);
    let decreasing = [4, 64, 256].iter().all(|&t| {
        let s = NoiseSchedule::cosine(t).unwrap();
        (1..=t).all(|k| s.alpha_bar(k) < s.alpha_bar(k - 1))
    });
    outcome(
        worst < 1e-12 && decreasing,
        format!("max |beta - hand| = {worst:.1e}, alpha_bar strictly decreasing: {decreasing}"),
    )
}

fn c2_gradients() -> Outcome {
    let errs: Vec<f64> = (0..20)
        .map(|seed| common::denoiser_gradcheck(seed, 8))
        .collect();
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst < 1e-4,
        format!("worst relative error over 20 seeds {worst:.2e}"),
    )
}

fn c3_plan() -> Outcome {
    use Transition::{Denoise as D, Renoise as R};
    let small = make_plan(2, 2).unwrap().transitions == vec![D(2), R(2), D(2), D(1), R(1), D(1)];
    let mut lengths = true;
    for steps in 1..=64 {
        for jump in 1..=8 {
            lengths &= make_plan(steps, jump).unwrap().len() == steps * (2 * jump - 1);
        }
    }
    outcome(
        small && lengths,
        format!("make_plan(2,2) exact: {small}, lengths T(2j-1): {lengths}"),
    )
}

fn c4_known_region() -> Outcome {
    let model = common::perturbed_small(11);
    let s = NoiseSchedule::cosine(model.config.diffusion_steps).unwrap();
    let specs = class_specs(8);
    let mut rng = SeedStream::new(4).rng();
    let mut mismatched = 0usize;
    let mut checked = 0usize;
    for i in 0..100u64 {
        let patch = generate_patch(&specs[(i % 8) as usize], 32, 100 + i)
            .unwrap()
            .0;
        let mask = make_mask(32, rng.random_range(0.05..=0.5), 200 + i).unwrap();
        let out = repaint_seeded(&s, &model, &patch, &mask, rng.random_range(1..=3), i).unwrap();
        for (k, (a, b)) in mask.known().iter().zip(out.data().iter().zip(patch.data())) {
            if *k {
                checked += 1;
                mismatched += (a.to_bits() != b.to_bits()) as usize;
            }
        }
        mismatched += (out.kind() != PatchKind::Repainted) as usize;
    }
    outcome(
        mismatched == 0,
        format!("{checked} known pixels over 100 pairs, {mismatched} differ"),
    )
}

fn c5_frechet() -> Outcome {
    use nalgebra::{DMatrix, DVector};
    let g = |mu: Vec<f64>, diag: Vec<f64>| GaussianStats {
        mu: DVector::from_vec(mu),
        sigma: DMatrix::from_diagonal(&DVector::from_vec(diag)),
        n: 100,
    };
    let mut rng = SeedStream::new(5).rng();
    let dim = 12;
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    let spd = &a * a.transpose();
    let same = GaussianStats {
        mu: DVector::from_fn(dim, |_, _| rng.random()),
        sigma: spd,
        n: 100,
    };
    let zero = frechet_distance(&same, &same).unwrap();
    let scalar = frechet_distance(&g(vec![0.0], vec![1.0]), &g(vec![1.0], vec![4.0])).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let d = rng.random_range(1..16);
        let (ma, mb): (Vec<f64>, Vec<f64>) = (0..d)
            .map(|_| (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .unzip();
        let (la, lb): (Vec<f64>, Vec<f64>) = (0..d)
            .map(|_| (rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)))
            .unzip();
        let want: f64 = (0..d)
            .map(|i| (ma[i] - mb[i]).powi(2) + (la[i].sqrt() - lb[i].sqrt()).powi(2))
            .sum();
        let got = frechet_distance(&g(ma, la), &g(mb, lb)).unwrap();
        worst = worst.max((got - want).abs());
    }
    outcome(
        zero < 1e-8 && (scalar - 2.0).abs() < 1e-9 && worst < 1e-6,
        format!("self {zero:.1e}, 1-D {scalar:.12}, diagonal max error {worst:.1e}"),
    )
}

fn c6_battery(shared: &mut Shared) -> Outcome {
    let model = shared.embedder();
    let corpus = shared.corpus();
    let real = corpus.eval_patches();
    let alien = alien_set(real.len(), 64, 6).unwrap();
    let mut lines = Vec::new();
    let mut all = true;
    for kind in PerturbationKind::ALL {
        let curve = perturbation_battery(
            &model,
            &real,
            &PerturbationSpec::default_for(kind),
            &alien,
            6,
            ExecMode::Parallel,
        )
        .unwrap();
        let up = strictly_increasing(&curve) && curve.len() >= 4;
        all &= up;
        let values: Vec<String> = curve.iter().map(|p| format!("{:.3}", p.fcd)).collect();
        lines.push(format!("{} [{}]", kind.name(), values.join(", ")));
    }
    // Interleaved halves keep every class in both.
    let even: Vec<_> = real.iter().step_by(2).cloned().collect();
    let odd: Vec<_> = real.iter().skip(1).step_by(2).cloned().collect();
    let own = fcd(&model, &even, &odd, ExecMode::Parallel).unwrap();
    let noise = fcd(
        &model,
        &real,
        &noise_set(real.len(), 64, 6).unwrap(),
        ExecMode::Parallel,
    )
    .unwrap();
    let ratio = own / noise;
    outcome(
        all && ratio < 0.05,
        format!(
            "n={} embedder acc {:.3}; {}; self {own:.4} / noise {noise:.2} = {ratio:.5}",
            real.len(),
            model.eval_accuracy,
            lines.join("; ")
        ),
    )
}

fn c7_training(shared: &mut Shared) -> Outcome {
    let corpus = shared.corpus().clone();
    let data = corpus.train_patches();
    let cfg = compact_training();
    let schedule = NoiseSchedule::cosine(compact_denoiser().diffusion_steps).unwrap();
    let init = || Denoiser::new(compact_denoiser(), cfg.seed).unwrap();
    let a = train_with(
        &cfg,
        &schedule,
        init(),
        &data,
        &mut NoSink,
        ExecMode::Parallel,
    )
    .unwrap();
    let tail = median(&a.loss_simple[a.loss_simple.len() - 500..]);
    let dir = out_dir();
    a.ema.save(&dir.join("denoiser")).unwrap();
    let losses: String = a
        .loss_simple
        .iter()
        .zip(&a.loss_vlb)
        .enumerate()
        .map(|(i, (s, v))| format!("{},{s},{v}\n", i + 1))
        .collect();
    std::fs::write(
        dir.join("train_loss.csv"),
        format!("step,loss_simple,loss_vlb\n{losses}"),
    )
    .unwrap();

    let b = train_with(
        &cfg,
        &schedule,
        init(),
        &data,
        &mut NoSink,
        ExecMode::Sequential,
    )
    .unwrap();
    b.ema.save(&dir.join("denoiser-rerun")).unwrap();
    let bytes = |sub: &str| std::fs::read(dir.join(sub).join("params.ndt")).unwrap();
    let identical = bytes("denoiser") == bytes("denoiser-rerun") && a.ema.hash() == b.ema.hash();
    shared.denoiser = Some(a.ema);
    outcome(
        tail < LOSS_CEILING && identical,
        format!("median L_simple over last 500 steps {tail:.4} (< {LOSS_CEILING}); re-run byte-identical: {identical}"),
    )
}

fn eval_config() -> EvalConfig {
    EvalConfig {
        n: 400,
        jump: 5,
        seed: 0,
        ..EvalConfig::default()
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.3}"))
}

/// Pooled medians for a perfect sampler: each hole is filled from an
/// independent patch of the same class, on the evaluation's own masks.
fn oracle_floor(corpus: &Corpus, cfg: &EvalConfig) -> (f64, f64) {
    let (mut d, mut s) = (Vec::new(), Vec::new());
    for i in 0..cfg.n {
        let seed = patch_seed(cfg, i);
        let item = &corpus.items[corpus.eval[i % corpus.eval.len()]];
        let size = item.patch.width();
        let (_, mask) = eval_mask(cfg, size, seed).unwrap();
        let other = generate_patch(&corpus.specs[item.class_id], size, seed ^ 0x5eed)
            .unwrap()
            .0;
        let data = item
            .patch
            .data()
            .iter()
            .zip(other.data())
            .zip(mask.known())
            .map(|((&a, &b), &k)| if k { a } else { b })
            .collect();
        let fill = ImagePatch::from_vec(size, size, data, PatchKind::Repainted).unwrap();
        let e = cellstat_error(&item.patch, &fill, &mask).unwrap();
        d.push(e.density);
        s.push(e.size);
    }
    (median(&d), median(&s))
}

fn c8_quality(shared: &mut Shared) -> Outcome {
    let Some(model) = shared.denoiser.clone() else {
        return outcome(false, "needs the trained denoiser of criterion 7");
    };
    let emb = shared.embedder();
    let corpus = shared.corpus().clone();
    let schedule = NoiseSchedule::cosine(model.config.diffusion_steps).unwrap();
    let report = run_evaluation(
        &schedule,
        &model,
        &emb,
        &corpus,
        &eval_config(),
        ExecMode::Parallel,
    )
    .unwrap();
    std::fs::write(
        out_dir().join("report.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )
    .unwrap();

    let mut bins_ok = true;
    let mut per_bin = Vec::new();
    for b in &report.bins {
        let ok = b.n > 0
            && b.density_err_median.is_some_and(|v| v < CELLSTAT_CEILING)
            && b.size_err_median.is_some_and(|v| v < CELLSTAT_CEILING);
        bins_ok &= ok;
        per_bin.push(format!(
            "[{:.2},{:.2}) n={} d={} s={}",
            b.range.0,
            b.range.1,
            b.n,
            fmt(b.density_err_median),
            fmt(b.size_err_median)
        ));
    }
    let beats = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(a), Some(b)) if a < b);
    let density = beats(
        report.density_err_median,
        report.baseline_density_err_median,
    );
    let size = beats(report.size_err_median, report.baseline_size_err_median);
    let fcd_ok = beats(report.fcd_repaired_vs_intact, report.fcd_baseline_vs_intact);
    let detail = format!(
        "per-bin medians < {CELLSTAT_CEILING}: {bins_ok} ({}); pooled density {} vs baseline {}, size {} vs {}; FCD repaired {} vs baseline {}",
        per_bin.join("; "),
        fmt(report.density_err_median),
        fmt(report.baseline_density_err_median),
        fmt(report.size_err_median),
        fmt(report.baseline_size_err_median),
        fmt(report.fcd_repaired_vs_intact),
        fmt(report.fcd_baseline_vs_intact),
    );
    let (od, os) = oracle_floor(&corpus, &eval_config());
    let detail = format!("{detail}; perfect-sampler floor density {od:.3}, size {os:.3}");
    shared.report = Some(report);
    outcome(bins_ok && density && size && fcd_ok, detail)
}

fn c9_consistency(shared: &mut Shared) -> Outcome {
    let Some(report) = &shared.report else {
        return outcome(false, "needs the evaluation of criterion 8");
    };
    let k2_ge_k1 = report
        .bins
        .iter()
        .all(|b| matches!((b.k1_rate, b.k2_rate), (Some(k1), Some(k2)) if k2 >= k1) || b.n == 0);
    let pooled = report.pooled_k1_rate.unwrap_or(0.0);
    let trend_ok = report.k1_trend.is_none_or(|r| r <= 0.0);
    let rates: Vec<String> = report
        .bins
        .iter()
        .map(|b| format!("{}/{}", fmt(b.k1_rate), fmt(b.k2_rate)))
        .collect();
    outcome(
        k2_ge_k1 && pooled >= K1_FLOOR && trend_ok,
        format!(
            "k1/k2 per bin [{}]; k2 >= k1: {k2_ge_k1}; pooled k1 {pooled:.3} (>= {K1_FLOOR}); spearman {}",
            rates.join(", "),
            fmt(report.k1_trend)
        ),
    )
}

fn c10_resampling(shared: &mut Shared) -> Outcome {
    let (Some(model), Some(report)) = (shared.denoiser.clone(), shared.report.clone()) else {
        return outcome(false, "needs criteria 7 and 8");
    };
    let corpus = shared.corpus().clone();
    let cfg = eval_config();
    let n = 100;
    let schedule = NoiseSchedule::cosine(model.config.diffusion_steps).unwrap();
    // The j=5 repairs of the first n evaluation patches are reused.
    let with_jumps: Vec<Option<f64>> = report.patches[..n].iter().map(|p| p.boundary).collect();
    let single =
        boundary_discontinuities(&schedule, &model, &corpus, &cfg, 1, n, ExecMode::Parallel)
            .unwrap();
    let (j5, j1) = (
        mean_defined(&with_jumps).unwrap(),
        mean_defined(&single).unwrap(),
    );
    outcome(
        j5 <= j1,
        format!("mean boundary discontinuity over {n} patches: j=5 {j5:.5}, j=1 {j1:.5}"),
    )
}

fn main() {
    // Ignore libtest flags such as --nocapture or test filters.
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|s| s.contains(&n));
    let mut shared = Shared::default();
    type Criterion = fn(&mut Shared) -> Outcome;
    let criteria: [(usize, &str, Criterion); 10] = [
        (1, "schedule exactness", |_| c1_schedule()),
        (2, "gradient correctness", |_| c2_gradients()),
        (3, "repaint plan exactness", |_| c3_plan()),
        (4, "known-region fidelity", |_| c4_known_region()),
        (5, "Frechet distance correctness", |_| c5_frechet()),
        (6, "FCD battery monotonicity", c6_battery),
        (7, "end-to-end training", c7_training),
        (8, "repaint quality", c8_quality),
        (9, "classification consistency", c9_consistency),
        (10, "resampling benefit", c10_resampling),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let o = run(&mut shared);
        let secs = start.elapsed().as_secs_f64();
        failed += !o.pass as usize;
        println!(
            "{} criterion {n:>2} {name} ({secs:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!("acceptance: {failed} failing");
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
