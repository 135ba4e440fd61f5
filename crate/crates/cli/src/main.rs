//! `repaintlab`: corpus synthesis, denoiser training, sampling, repainting,
//! FCD and downstream evaluation from one binary.

mod config;
mod provenance;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use repaintlab::denoiser::Denoiser;
use repaintlab::diffusion::{self, MetricsRow, NoiseSchedule, TrainSink, TrainState};
use repaintlab::evalharness::run_evaluation;
use repaintlab::image::{ImagePatch, PatchKind};
use repaintlab::metrics::{
    alien_set, fcd, perturbation_battery, strictly_increasing, train_embedder, EmbeddingModel,
    PerturbationKind, PerturbationSpec,
};
use repaintlab::par::{self, ExecMode};
use repaintlab::repaint::{repaint_seeded, Mask};
use repaintlab::synthlab::{make_corpus, Corpus};
use serde_json::json;

use config::RunConfig;
use provenance::Provenance;

#[derive(Parser)]
#[command(
    name = "repaintlab",
    version,
    about = "Diffusion inpainting of synthetic cytoarchitecture patches"
)]
struct Cli {
    /// Worker threads; falls back to REPAINTLAB_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus.
    Synth {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the embedding classifier used by FCD and consistency checks.
    TrainEmbedder {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a corpus train split or a directory of PNGs.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw unconditional samples from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill the holes of one image.
    Repaint {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Meaning of white (255) mask pixels.
        #[arg(long, value_enum, default_value_t = MaskConvention::Known)]
        mask_convention: MaskConvention,
        #[arg(long)]
        jump: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// FCD between two directories of PNG patches.
    Fcd {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        set_a: PathBuf,
        #[arg(long)]
        set_b: PathBuf,
    },
    /// FCD of a set against increasingly disturbed copies of itself.
    FcdBattery {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of real patches.
        #[arg(long)]
        set: PathBuf,
        /// gaussian_noise, gaussian_blur, salt_pepper, dataset_mix (or noise, blur, pepper, mix) or all.
        #[arg(long, default_value = "all")]
        kind: String,
        /// Comma-separated levels starting at 0; defaults per kind.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        /// Out-of-domain patches for mixing; built-in generator when absent.
        #[arg(long)]
        mix_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repaint eval patches under random masks and report downstream metrics.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        jump: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskConvention {
    /// 255 marks intact pixels.
    Known,
    /// 255 marks pixels to fill.
    Hole,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match threads(cli.threads) {
        Ok(Some(n)) => par::set_threads(n),
        Ok(None) => {}
        Err(e) => return fail(&e),
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("REPAINTLAB_THREADS") {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| {
            format!("REPAINTLAB_THREADS={v:?} is not a count")
        })?)),
        Err(_) => Ok(None),
    }
}

/// Prints a one-line JSON error to standard error and returns exit code 1.
fn fail(e: &anyhow::Error) -> ExitCode {
    let mut body = json!({ "error": format!("{e:#}") });
    if let Some(repaintlab::Error::Config { pointer, msg }) = e.downcast_ref::<repaintlab::Error>()
    {
        body["pointer"] = json!(pointer);
        body["message"] = json!(msg);
    }
    eprintln!("{body}");
    ExitCode::from(1)
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    Ok(RunConfig::load(arg.config.as_deref())?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".prov.json");
    PathBuf::from(s)
}

/// All PNGs in a directory in file-name order.
fn load_png_dir(dir: &Path) -> Result<Vec<ImagePatch>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "png"));
    paths.sort();
    if paths.is_empty() {
        bail!("{} contains no PNG files", dir.display());
    }
    paths
        .iter()
        .map(|p| Ok(ImagePatch::load_png(p, PatchKind::Real)?))
        .collect()
}

/// Writes a row per logging interval and EMA checkpoints to `checkpoints/`.
struct FileSink {
    metrics: BufWriter<File>,
    dir: PathBuf,
    model: repaintlab::denoiser::DenoiserConfig,
}

impl TrainSink for FileSink {
    fn metrics(&mut self, row: &MetricsRow) -> repaintlab::Result<()> {
        let line = serde_json::to_string(row)?;
        writeln!(self.metrics, "{line}")
            .and_then(|_| self.metrics.flush())
            .map_err(|source| repaintlab::Error::Io {
                path: self.dir.join("metrics.jsonl"),
                source,
            })
    }

    fn checkpoint(&mut self, state: &TrainState<'_>) -> repaintlab::Result<()> {
        let model = Denoiser {
            config: self.model.clone(),
            params: state.ema.clone(),
        };
        model.save(
            &self
                .dir
                .join("checkpoints")
                .join(format!("step-{:06}", state.step)),
        )
    }
}

fn run(command: Command) -> Result<()> {
    let mode = ExecMode::Parallel;
    match command {
        Command::Synth {
            cfg,
            classes,
            per_class,
            size,
            seed,
            out,
        } => {
            let mut rc = load_config(&cfg)?;
            let c = &mut rc.corpus;
            c.classes = classes.unwrap_or(c.classes);
            c.per_class = per_class.unwrap_or(c.per_class);
            c.size = size.unwrap_or(c.size);
            c.seed = seed.unwrap_or(c.seed);
            rc.validate()?;
            let c = &rc.corpus;
            let corpus = make_corpus(c.classes, c.per_class, c.size, c.seed, mode)?;
            corpus.save(&out)?;
            Provenance::new("synth", &rc, c.seed)
                .outcome(json!({ "items": corpus.items.len(), "train": corpus.train.len(), "eval": corpus.eval.len() }))
                .write(&out.join("provenance.json"))
        }
        Command::TrainEmbedder {
            cfg,
            corpus,
            seed,
            out,
        } => {
            let mut rc = load_config(&cfg)?;
            let data = Corpus::load(&corpus)?;
            rc.metrics.train.seed = seed.unwrap_or(rc.metrics.train.seed);
            rc.metrics.embedder.classes = data.specs.len();
            rc.metrics.embedder.input_size = data.size;
            rc.validate()?;
            let model = train_embedder(&data, &rc.metrics.embedder, &rc.metrics.train, mode)?;
            model.save(&out)?;
            Provenance::new("train-embedder", &rc, rc.metrics.train.seed)
                .input(&corpus)?
                .outcome(json!({ "eval_accuracy": model.eval_accuracy, "hash": model.hash() }))
                .write(&out.join("provenance.json"))
        }
        Command::Train {
            cfg,
            data,
            seed,
            out,
        } => {
            let mut rc = load_config(&cfg)?;
            rc.train.seed = seed.unwrap_or(rc.train.seed);
            rc.validate()?;
            let patches = if data.join("corpus.json").exists() {
                Corpus::load(&data)?.train_patches()
            } else {
                load_png_dir(&data)?
            };
            let schedule = NoiseSchedule::cosine(rc.denoiser.diffusion_steps)?;
            let init = Denoiser::new(rc.denoiser.clone(), rc.train.seed)?;
            fs::create_dir_all(&out)?;
            let mut sink = FileSink {
                metrics: BufWriter::new(File::create(out.join("metrics.jsonl"))?),
                dir: out.clone(),
                model: rc.denoiser.clone(),
            };
            let outcome = diffusion::train(&rc.train, &schedule, init, &patches, &mut sink)?;
            outcome.ema.save(&out)?;
            let tail = &outcome.loss_simple[outcome.loss_simple.len().saturating_sub(500)..];
            Provenance::new("train", &rc, rc.train.seed)
                .input(&data)?
                .outcome(json!({
                    "hash": outcome.ema.hash(),
                    "median_loss_simple_last_500": (!tail.is_empty()).then(|| diffusion::median(tail)),
                }))
                .write(&out.join("provenance.json"))
        }
        Command::Sample { ckpt, n, seed, out } => {
            let model = Denoiser::load(&ckpt)?;
            let schedule = NoiseSchedule::cosine(model.config.diffusion_steps)?;
            let samples = diffusion::generate(&schedule, &model, n, seed, mode)?;
            fs::create_dir_all(&out)?;
            for (i, s) in samples.iter().enumerate() {
                s.save_png(&out.join(format!("sample_{i:05}.png")))?;
            }
            let rc = RunConfig {
                denoiser: model.config.clone(),
                ..RunConfig::default()
            };
            Provenance::new("sample", &rc, seed)
                .input(&ckpt)?
                .outcome(json!({ "n": n, "checkpoint": model.hash() }))
                .write(&out.join("provenance.json"))
        }
        Command::Repaint {
            cfg,
            ckpt,
            image,
            mask,
            mask_convention,
            jump,
            seed,
            out,
        } => {
            let mut rc = load_config(&cfg)?;
            rc.repaint.jump = jump.unwrap_or(rc.repaint.jump);
            rc.repaint.seed = seed.unwrap_or(rc.repaint.seed);
            let model = Denoiser::load(&ckpt)?;
            rc.denoiser = model.config.clone();
            rc.validate()?;
            let schedule = NoiseSchedule::cosine(model.config.diffusion_steps)?;
            let x0 = ImagePatch::load_png(&image, PatchKind::Real)?;
            let mut m = Mask::load_png(&mask)?;
            if let MaskConvention::Hole = mask_convention {
                m = Mask::new(m.size(), m.known().iter().map(|&k| !k).collect())?;
            }
            let result =
                repaint_seeded(&schedule, &model, &x0, &m, rc.repaint.jump, rc.repaint.seed)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            result.save_png(&out)?;
            let record = json!({
                "checkpoint": model.hash(),
                "mask_coverage": m.coverage(),
                "jump": rc.repaint.jump,
                "steps": schedule.steps(),
                "seed": rc.repaint.seed,
                "image": provenance::hash_path(&image)?,
                "mask": provenance::hash_path(&mask)?,
                "version": env!("CARGO_PKG_VERSION"),
            });
            write_json(&sidecar(&out), &record)
        }
        Command::Fcd { ckpt, set_a, set_b } => {
            let model = EmbeddingModel::load(&ckpt)?;
            let (a, b) = (load_png_dir(&set_a)?, load_png_dir(&set_b)?);
            let d = fcd(&model, &a, &b, mode)?;
            println!(
                "{}",
                json!({ "fcd": d, "n_a": a.len(), "n_b": b.len(), "dim": model.dim() })
            );
            Ok(())
        }
        Command::FcdBattery {
            cfg,
            ckpt,
            set,
            kind,
            levels,
            mix_dir,
            seed,
            out,
        } => {
            let mut rc = load_config(&cfg)?;
            rc.metrics.seed = seed.unwrap_or(rc.metrics.seed);
            let model = EmbeddingModel::load(&ckpt)?;
            let real = load_png_dir(&set)?;
            let kinds = if kind == "all" {
                PerturbationKind::ALL.to_vec()
            } else {
                vec![PerturbationKind::parse(&kind)?]
            };
            if levels.is_some() && kinds.len() > 1 {
                bail!("--levels needs a single --kind");
            }
            let alien = match &mix_dir {
                Some(dir) => load_png_dir(dir)?,
                None => alien_set(real.len(), model.config.input_size, rc.metrics.seed)?,
            };
            let mut curves = Vec::new();
            for k in kinds {
                let spec = match &levels {
                    Some(l) => PerturbationSpec::new(k, l.clone())?,
                    None => PerturbationSpec::default_for(k),
                };
                let curve =
                    perturbation_battery(&model, &real, &spec, &alien, rc.metrics.seed, mode)?;
                curves.push(json!({
                    "kind": k.name(),
                    "curve": curve,
                    "strictly_increasing": strictly_increasing(&curve),
                }));
            }
            let body = json!({ "n": real.len(), "dim": model.dim(), "curves": curves });
            println!("{body}");
            if let Some(path) = out {
                write_json(&path, &body)?;
                let mut p = Provenance::new("fcd-battery", &rc, rc.metrics.seed)
                    .input(&ckpt)?
                    .input(&set)?;
                if let Some(dir) = &mix_dir {
                    p = p.input(dir)?;
                }
                p.write(&sidecar(&path))?;
            }
            Ok(())
        }
        Command::Evaluate {
            cfg,
            ckpt,
            embedder,
            corpus,
            n,
            jump,
            seed,
            out,
        } => {
            let mut rc = load_config(&cfg)?;
            let e = &mut rc.evaluate;
            e.n = n.unwrap_or(e.n);
            e.jump = jump.unwrap_or(e.jump);
            e.seed = seed.unwrap_or(e.seed);
            let model = Denoiser::load(&ckpt)?;
            let emb = EmbeddingModel::load(&embedder)?;
            rc.denoiser = model.config.clone();
            rc.metrics.embedder = emb.config.clone();
            rc.validate()?;
            let data = Corpus::load(&corpus)?;
            let schedule = NoiseSchedule::cosine(model.config.diffusion_steps)?;
            let report = run_evaluation(&schedule, &model, &emb, &data, &rc.evaluate, mode)?;
            write_json(&out, &report)?;
            Provenance::new("evaluate", &rc, rc.evaluate.seed)
                .input(&ckpt)?
                .input(&embedder)?
                .input(&corpus)?
                .write(&sidecar(&out))
        }
    }
}
