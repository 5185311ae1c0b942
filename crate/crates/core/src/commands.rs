//! Subcommands of the `avatar` binary.
//!
//! Every command reads one [`RunConfig`], applies the global overrides and
//! derives all randomness from the configured seed.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::booth::{finetune, generate_prior_set, pretrain, FewShotExample};
use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::config::{ensure_dir, require_exists, PriorKind, RunConfig};
use crate::dataset::{load_training_set, write_dataset};
use crate::distill::{checkpoint_name, distill, DistillOutputs, DistillState};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::field::RadianceField;
use crate::guidance::{
    Condition, Denoiser, DiskColors, DiskPrior, NanDenoiser, NoiseSchedule, SamplerSettings, ToyConditionalDenoiser,
    Vocabulary,
};
use crate::image::Image;
use crate::math::{mix_seed, rng_from_seed, Aabb};
use crate::optim::Precision;
use crate::render::{render_image, CameraPose, RenderSettings};
use crate::synth::{synthesize, CLASS_CAPTION};

// Seed streams of the individual commands.
const SEED_SYNTH: u64 = 1;
const SEED_PRETRAIN_INIT: u64 = 2;
const SEED_PRETRAIN: u64 = 3;
const SEED_PRIOR: u64 = 4;
const SEED_BOOTH: u64 = 5;
const SEED_FIELD_INIT: u64 = 6;
const SEED_DISTILL: u64 = 7;
const SEED_TURNTABLE: u64 = 8;
const SEED_BENCH: u64 = 9;

#[derive(Debug, Parser)]
#[command(name = "avatar", version, about = "Few-shot avatar personalization and radiance field distillation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parameter storage precision: f32 or f64.
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write the synthetic subject and class datasets.
    SynthData,
    /// Train the base denoiser on the class dataset.
    Pretrain,
    /// Personalize the base denoiser on the subject dataset.
    Booth,
    /// Distill a radiance field from the configured prior.
    Distill,
    /// Render views around a field checkpoint.
    Turntable {
        /// Field checkpoint; the final distillation checkpoint by default.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        views: Option<usize>,
        /// Directory of `view_NNN.png` references to score against.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Measure throughput and compare against a stored baseline.
    Bench,
    /// Compare same-named PNG images in two directories.
    Eval {
        renders: PathBuf,
        references: PathBuf,
        /// Write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(p) = global.precision {
        cfg.precision = p;
    }
    if let Some(w) = global.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

#[cfg(feature = "parallel")]
fn init_workers(n: usize) {
    // A second initialization (tests calling `run` repeatedly) is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

#[cfg(not(feature = "parallel"))]
fn init_workers(_n: usize) {}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let cfg = resolve_config(&cli.global)?;
    init_workers(cfg.workers);
    match &cli.command {
        Command::SynthData => cmd_synth_data(&cfg).map(|_| 0),
        Command::Pretrain => cmd_pretrain(&cfg).map(|_| 0),
        Command::Booth => cmd_booth(&cfg).map(|_| 0),
        Command::Distill => cmd_distill(&cfg).map(|_| 0),
        Command::Turntable { checkpoint, views, ground_truth } => {
            let ckpt = match checkpoint {
                Some(p) => p.clone(),
                None => cfg.paths.distill_dir().join(checkpoint_name(cfg.distill.total_steps)),
            };
            let report = cmd_turntable(&cfg, &ckpt, views.unwrap_or(cfg.turntable.views), ground_truth.as_deref())?;
            if let Some(r) = report {
                print!("{}", r.table());
            }
            Ok(0)
        }
        Command::Bench => {
            let outcome = cmd_bench(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&outcome.report).map_err(|e| Error::Format(e.to_string()))?);
            for r in &outcome.regressions {
                eprintln!("regression: {r}");
            }
            Ok(if outcome.regressions.is_empty() { 0 } else { 1 })
        }
        Command::Eval { renders, references, out } => {
            let report = cmd_eval(renders, references)?;
            print!("{}", report.table());
            if let Some(p) = out {
                write_text(p, &report.to_json()?)?;
            }
            Ok(0)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_dir(dir)?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the subject set to `paths.dataset` and the class set to
/// `paths.class_dataset`.
pub fn cmd_synth_data(cfg: &RunConfig) -> Result<()> {
    let (subject, class) = synthesize(&cfg.synth, mix_seed(cfg.seed, SEED_SYNTH))?;
    write_dataset(&cfg.paths.dataset, &subject)?;
    write_dataset(&cfg.paths.class_dataset, &class)?;
    log::info!(
        "wrote {} subject examples to {} and {} class examples to {}",
        subject.len(),
        cfg.paths.dataset.display(),
        class.len(),
        cfg.paths.class_dataset.display()
    );
    Ok(())
}

fn load_examples(dir: &Path, what: &str, vocab: &Vocabulary) -> Result<Vec<FewShotExample>> {
    require_exists(dir, what)?;
    let data = load_training_set(dir, vocab)?;
    if data.is_empty() {
        return Err(Error::Config(format!("{what} at {} is empty", dir.display())));
    }
    Ok(data)
}

/// Trains the base denoiser; writes `base.ckpt`, `vocab.txt` and
/// `pretrain_loss.jsonl` to the checkpoint directory.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<ToyConditionalDenoiser> {
    let vocab = cfg.vocabulary()?;
    let data = load_examples(&cfg.paths.class_dataset, "class dataset", &vocab)?;
    let mut rng = rng_from_seed(mix_seed(cfg.seed, SEED_PRETRAIN_INIT));
    let mut base = ToyConditionalDenoiser::new(cfg.denoiser_config(&vocab), &mut rng)?;
    cfg.precision.apply(base.params_mut());
    let history = pretrain(&mut base, &data, &cfg.pretrain, mix_seed(cfg.seed, SEED_PRETRAIN), cfg.precision)?;
    ensure_dir(&cfg.paths.checkpoints)?;
    base.to_checkpoint(cfg.precision)?.save(cfg.paths.base_checkpoint())?;
    vocab.save(cfg.paths.checkpoints.join("vocab.txt"))?;
    write_jsonl(&cfg.paths.checkpoints.join("pretrain_loss.jsonl"), &history)?;
    log::info!("pretrained base denoiser ({} parameters)", base.param_count());
    Ok(base)
}

/// Result of a personalization run.
#[derive(Debug, Clone)]
pub struct BoothRun {
    pub denoiser: ToyConditionalDenoiser,
    pub checkpoint_sha256: String,
    pub base_sha256: String,
}

/// Generates the prior set with the frozen base, finetunes a copy and writes
/// `booth.ckpt`, `booth_loss.jsonl` and the prior images. Fails if the base
/// checkpoint changed on disk during the run.
pub fn cmd_booth(cfg: &RunConfig) -> Result<BoothRun> {
    let base_path = cfg.paths.base_checkpoint();
    require_exists(&base_path, "base denoiser checkpoint")?;
    let base_bytes = std::fs::read(&base_path).map_err(|e| Error::io(&base_path, e))?;
    let base_sha256 = sha256_hex(&base_bytes);
    let base_ck = Checkpoint::from_bytes(&base_bytes)?;
    let frozen = ToyConditionalDenoiser::from_checkpoint(&base_ck)?;
    let vocab = cfg.vocabulary()?;
    if frozen.config().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "base denoiser knows {} tokens, vocabulary has {}",
            frozen.config().vocab_size,
            vocab.len()
        )));
    }
    let fewshot = load_examples(&cfg.paths.dataset, "subject dataset", &vocab)?;
    let subject = vocab.subject_id().ok_or_else(|| Error::Config("vocabulary lacks the subject token".into()))?;
    let class_tokens = vocab.tokenize(&cfg.booth.class_prompt)?;
    let pose_pool: Vec<Image> = fewshot.iter().map(|e| e.pose.clone()).collect();
    let sampler = SamplerSettings { steps: cfg.booth.sampler_steps, ..SamplerSettings::default() };
    let prior = generate_prior_set(
        &frozen,
        frozen.schedule(),
        &class_tokens,
        &pose_pool,
        cfg.booth.n_prior,
        sampler,
        mix_seed(cfg.seed, SEED_PRIOR),
    )?;
    let prior_dir = cfg.paths.output.join("prior");
    ensure_dir(&prior_dir)?;
    for (i, p) in prior.iter().enumerate() {
        p.image.write_png(prior_dir.join(format!("{i:03}.png")))?;
    }

    let mut tuned = frozen.clone();
    let history = finetune(&mut tuned, &fewshot, &prior, &cfg.booth, subject, mix_seed(cfg.seed, SEED_BOOTH), cfg.precision)?;
    let ck = tuned.to_checkpoint(cfg.precision)?;
    ck.save(cfg.paths.booth_checkpoint())?;
    write_jsonl(&cfg.paths.checkpoints.join("booth_loss.jsonl"), &history)?;

    let after = std::fs::read(&base_path).map_err(|e| Error::io(&base_path, e))?;
    if sha256_hex(&after) != base_sha256 {
        return Err(Error::Contract("the frozen base checkpoint changed during personalization".into()));
    }
    if frozen.params() != base_ck.params.as_slice() {
        return Err(Error::Contract("the frozen base model was modified in memory".into()));
    }
    log::info!("personalized denoiser written to {}", cfg.paths.booth_checkpoint().display());
    Ok(BoothRun { denoiser: tuned, checkpoint_sha256: ck.sha256(), base_sha256 })
}

fn disk_prior(cfg: &RunConfig, schedule: NoiseSchedule, colors: DiskColors) -> DiskPrior {
    DiskPrior {
        schedule,
        sphere_radius: cfg.prior.sphere_radius,
        camera_distance: cfg.prior.camera_distance,
        fov_y: cfg.prior.fov,
        colors,
        std: cfg.prior.std,
    }
}

/// Result of a distillation run.
#[derive(Debug, Clone)]
pub struct DistillRun {
    pub field: RadianceField,
    pub checkpoint: PathBuf,
    pub steps: usize,
}

/// Distills a field with the configured prior into `output/distill`.
pub fn cmd_distill(cfg: &RunConfig) -> Result<DistillRun> {
    let vocab = cfg.vocabulary()?;
    let noise = NoiseSchedule::cosine(cfg.denoiser.t_max)?;
    match cfg.prior.kind {
        PriorKind::Toy => {
            let path = cfg.paths.booth_checkpoint();
            require_exists(&path, "personalized denoiser checkpoint")?;
            let d = ToyConditionalDenoiser::from_checkpoint(&Checkpoint::load(&path)?)?;
            let noise = d.schedule().clone();
            run_distill(cfg, d, noise, vocab)
        }
        PriorKind::AnalyticSphere => run_distill(cfg, disk_prior(cfg, noise.clone(), DiskColors::Plain([1.0; 3])), noise, vocab),
        PriorKind::AnalyticHemisphere => {
            let colors = DiskColors::Keyed { front: cfg.prior.front, back: cfg.prior.back };
            run_distill(cfg, disk_prior(cfg, noise.clone(), colors), noise, vocab)
        }
        PriorKind::Nan => run_distill(cfg, NanDenoiser, noise, vocab),
    }
}

fn run_distill<D: Denoiser>(cfg: &RunConfig, denoiser: D, noise: NoiseSchedule, vocab: Vocabulary) -> Result<DistillRun> {
    let skeleton = cfg.avatar.load_skeleton()?;
    let meshes = if cfg.distill.lambda_geo > 0.0 { cfg.avatar.load_meshes(&skeleton)? } else { Vec::new() };
    let mut field = RadianceField::new(cfg.field.clone(), &mut rng_from_seed(mix_seed(cfg.seed, SEED_FIELD_INIT)))?;
    cfg.precision.apply(field.params_mut());
    let mut state = DistillState::new(
        field,
        denoiser,
        noise,
        skeleton,
        meshes,
        cfg.schedule(),
        cfg.distill.clone(),
        vocab,
        mix_seed(cfg.seed, SEED_DISTILL),
        cfg.precision,
    )?;
    let dir = cfg.paths.distill_dir();
    let outputs = DistillOutputs { dir: Some(dir.clone()), precision: cfg.precision };
    let reports = distill(&mut state, cfg.distill.total_steps, &outputs)?;
    let skipped = reports.iter().filter(|r| r.skipped).count();
    if skipped > 0 {
        log::warn!("{skipped} of {} steps were skipped", reports.len());
    }
    Ok(DistillRun { field: state.field, checkpoint: dir.join(checkpoint_name(state.step)), steps: state.step })
}

fn center(b: &Aabb) -> [f64; 3] {
    let c = b.center();
    [c.x, c.y, c.z]
}

/// Azimuths in degrees of an `n`-view sweep starting at 0.
pub fn turntable_azimuths(n: usize) -> Vec<f64> {
    (0..n).map(|k| 360.0 * k as f64 / n as f64).collect()
}

/// Camera of one turntable view.
pub fn turntable_camera(cfg: &RunConfig, azimuth_deg: f64) -> Result<CameraPose> {
    let t = &cfg.turntable;
    CameraPose::orbit(center(&cfg.field.bbox), t.radius, azimuth_deg.to_radians(), t.elevation, t.fov)
}

/// Renders the sweep. View `k` jitters its samples with seed
/// `mix_seed(mix_seed(seed, TURNTABLE), k)`.
pub fn render_turntable(cfg: &RunConfig, field: &RadianceField, n: usize) -> Result<Vec<(f64, Image)>> {
    let settings = RenderSettings {
        height: cfg.render.height,
        width: cfg.render.width,
        samples_per_ray: cfg.render.samples_per_ray,
        background: cfg.render.background,
    };
    turntable_azimuths(n)
        .into_iter()
        .enumerate()
        .map(|(k, az)| {
            let cam = turntable_camera(cfg, az)?;
            let mut rng = rng_from_seed(turntable_seed(cfg.seed, k));
            Ok((az, render_image(field, &cam, &settings, None, &mut rng)?.color))
        })
        .collect()
}

pub fn turntable_seed(seed: u64, view: usize) -> u64 {
    mix_seed(mix_seed(seed, SEED_TURNTABLE), view as u64)
}

pub fn view_name(k: usize) -> String {
    format!("view_{k:03}.png")
}

/// Writes `view_NNN.png` (and `.raw`) files to `output/turntable`; scores
/// them against `ground_truth` when given.
pub fn cmd_turntable(cfg: &RunConfig, checkpoint: &Path, views: usize, ground_truth: Option<&Path>) -> Result<Option<MetricReport>> {
    if views == 0 {
        return Err(Error::Config("turntable needs at least one view".into()));
    }
    require_exists(checkpoint, "field checkpoint")?;
    let field = RadianceField::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let rendered = render_turntable(cfg, &field, views)?;
    let dir = cfg.paths.output.join("turntable");
    ensure_dir(&dir)?;
    for (k, (_, img)) in rendered.iter().enumerate() {
        img.write_png(dir.join(view_name(k)))?;
        img.write_raw(dir.join(format!("view_{k:03}.raw")))?;
    }
    let Some(gt) = ground_truth else {
        return Ok(None);
    };
    let refs = (0..views).map(|k| Image::read_png(gt.join(view_name(k)))).collect::<Result<Vec<_>>>()?;
    for (k, r) in refs.iter().enumerate() {
        if r.height != cfg.render.height || r.width != cfg.render.width {
            return Err(Error::Config(format!(
                "reference {} is {}x{}, renders are {}x{}",
                view_name(k),
                r.height,
                r.width,
                cfg.render.height,
                cfg.render.width
            )));
        }
    }
    // Compare the quantized renders, as written to disk.
    let renders: Vec<Image> = rendered.iter().map(|(_, img)| quantized(img)).collect();
    let az: Vec<f64> = rendered.iter().map(|(a, _)| *a).collect();
    let report = MetricReport::compare(&renders, &refs, &az)?;
    write_text(&dir.join("metrics.json"), &report.to_json()?)?;
    Ok(Some(report))
}

fn quantized(img: &Image) -> Image {
    img.map(|v| crate::image::quantize_u8(v) as f64 / 255.0)
}

/// Scores every PNG in `renders` against the same-named file in `references`.
pub fn cmd_eval(renders: &Path, references: &Path) -> Result<MetricReport> {
    require_exists(renders, "render directory")?;
    require_exists(references, "reference directory")?;
    let mut names: Vec<String> = std::fs::read_dir(renders)
        .map_err(|e| Error::io(renders, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", renders.display())));
    }
    let a = names.iter().map(|n| Image::read_png(renders.join(n))).collect::<Result<Vec<_>>>()?;
    let b = names.iter().map(|n| Image::read_png(references.join(n))).collect::<Result<Vec<_>>>()?;
    let idx: Vec<f64> = (0..names.len()).map(|i| i as f64).collect();
    MetricReport::compare(&a, &b, &idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub hash_encode_queries_per_sec: f64,
    pub rays_per_sec: f64,
    pub denoiser_steps_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub report: BenchReport,
    /// Empty when no baseline was found or nothing regressed.
    pub regressions: Vec<String>,
}

/// Metrics that fell more than `tolerance` below the baseline.
pub fn bench_gate(report: &BenchReport, baseline: &BenchReport, tolerance: f64) -> Vec<String> {
    let pairs = [
        ("hash_encode_queries_per_sec", report.hash_encode_queries_per_sec, baseline.hash_encode_queries_per_sec),
        ("rays_per_sec", report.rays_per_sec, baseline.rays_per_sec),
        ("denoiser_steps_per_sec", report.denoiser_steps_per_sec, baseline.denoiser_steps_per_sec),
    ];
    pairs
        .iter()
        .filter(|(_, now, base)| *now < (1.0 - tolerance) * base)
        .map(|(k, now, base)| format!("{k}: {now:.1} vs baseline {base:.1}"))
        .collect()
}

/// Throughput of the three hot paths; writes `output/bench.json`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchOutcome> {
    let mut rng = rng_from_seed(mix_seed(cfg.seed, SEED_BENCH));
    let field = RadianceField::new(cfg.field.clone(), &mut rng)?;
    let b = &cfg.bench;

    let points: Vec<[f64; 3]> = (0..b.encode_queries).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let start = Instant::now();
    let mut sink = 0.0;
    for p in &points {
        sink += field.encode(*p)?[0];
    }
    let encode = b.encode_queries as f64 / start.elapsed().as_secs_f64();

    let cam = CameraPose::orbit(center(&field.bbox()), cfg.turntable.radius, 0.0, 0.0, cfg.turntable.fov)?;
    let settings = RenderSettings {
        height: b.render_size,
        width: b.render_size,
        samples_per_ray: cfg.distill.samples_per_ray,
        background: [1.0; 3],
    };
    let start = Instant::now();
    let out = render_image(&field, &cam, &settings, None, &mut rng)?;
    let rays = (b.render_size * b.render_size) as f64 / start.elapsed().as_secs_f64();
    sink += out.color.mean();

    let vocab = cfg.vocabulary()?;
    let d = ToyConditionalDenoiser::new(cfg.denoiser_config(&vocab), &mut rng)?;
    let s = b.denoiser_size;
    let x = crate::guidance::gaussian_image(s, s, 3, &mut rng);
    let cond = Condition::new(Some(vocab.tokenize(CLASS_CAPTION)?), Some(Image::new(s, s, 3)));
    let start = Instant::now();
    for i in 0..b.denoiser_steps {
        sink += d.predict_epsilon(&x, 1 + i % cfg.denoiser.t_max, &cond)?.data[0];
    }
    let steps = b.denoiser_steps as f64 / start.elapsed().as_secs_f64();
    log::debug!("bench checksum {sink}");

    let report = BenchReport { hash_encode_queries_per_sec: encode, rays_per_sec: rays, denoiser_steps_per_sec: steps };
    ensure_dir(&cfg.paths.output)?;
    write_text(
        &cfg.paths.output.join("bench.json"),
        &serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    let regressions = match &b.baseline {
        Some(p) if p.exists() => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let base: BenchReport =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            bench_gate(&report, &base, b.tolerance)
        }
        Some(p) => {
            log::warn!("baseline {} not found; report only", p.display());
            Vec::new()
        }
        None => Vec::new(),
    };
    Ok(BenchOutcome { report, regressions })
}

/// Entry point shared by the binary: runs and maps errors to exit codes.
pub fn main_with(cli: &Cli) -> i32 {
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            e.exit_code()
        }
    }
}
