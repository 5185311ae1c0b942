//! Score-distillation loop: camera sampling, skeleton conditioning, SDS
//! gradient assembly through the renderer, and the local geometry term.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::geometry::{
    accumulate_geo_gradient, geo_loss, rasterize_skeleton_crop, sample_near_mesh, sample_on_mesh,
    ArticulatedSkeleton, GeoLossConfig, PartMesh,
};
use crate::guidance::{add_noise, cfg_epsilon_with_noise, gaussian_image, Condition, Denoiser, NoiseSchedule, Vocabulary};
use crate::image::Image;
use crate::math::{mix_seed, rng_from_seed, Aabb, DetRng, Vec3};
use crate::optim::{Adam, Precision};
use crate::render::{self, CameraPose, Crop, RenderSettings};
use crate::schedule::{choose_zoom, part_prompt, upsample, upsample_adjoint, BodyPart, ResolutionSchedule};

/// Observation-space camera distribution. Angles in radians; azimuth is
/// measured from +z toward +x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSampler {
    pub target: [f64; 3],
    pub radius: [f64; 2],
    pub elevation: [f64; 2],
    pub azimuth: [f64; 2],
    pub fov: [f64; 2],
    /// Uniform look-at offset per axis.
    pub look_at_jitter: f64,
}

impl Default for CameraSampler {
    fn default() -> Self {
        Self {
            target: [0.0; 3],
            radius: [2.8, 3.4],
            elevation: [-0.17, 0.52],
            azimuth: [0.0, std::f64::consts::TAU],
            fov: [0.75, 0.9],
            look_at_jitter: 0.05,
        }
    }
}

fn uniform_in(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Whether all eight box corners project inside the image at `aspect`
/// and lie between the near and far planes.
pub fn bbox_in_frustum(camera: &CameraPose, bbox: &Aabb, aspect: f64) -> bool {
    bbox.corners().iter().all(|c| match camera.project(c, aspect) {
        Some((u, v, z)) => (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && z > camera.near && z < camera.far,
        None => false,
    })
}

impl CameraSampler {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !(ok(self.radius) && ok(self.elevation) && ok(self.azimuth) && ok(self.fov)) {
            return Err(Error::Config("camera sampler ranges must be finite with lo <= hi".into()));
        }
        if self.radius[0] <= 0.0 || self.fov[0] <= 0.0 || self.fov[1] >= std::f64::consts::PI {
            return Err(Error::Config("camera radius must be positive and fov inside (0, pi)".into()));
        }
        if self.elevation[0] <= -std::f64::consts::FRAC_PI_2 || self.elevation[1] >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::Config("camera elevation must stay inside (-pi/2, pi/2)".into()));
        }
        if !(self.look_at_jitter >= 0.0) {
            return Err(Error::Config("look-at jitter must be non-negative".into()));
        }
        Ok(())
    }

    /// Draws a camera and, if needed, backs it away along its viewing ray
    /// until the whole box fits in the frustum.
    pub fn sample(&self, bbox: &Aabb, aspect: f64, rng: &mut impl Rng) -> Result<CameraPose> {
        let azimuth = uniform_in(rng, self.azimuth);
        let elevation = uniform_in(rng, self.elevation);
        let mut radius = uniform_in(rng, self.radius);
        let fov = uniform_in(rng, self.fov);
        let mut target = self.target;
        for t in &mut target {
            if self.look_at_jitter > 0.0 {
                *t += rng.random_range(-self.look_at_jitter..=self.look_at_jitter);
            }
        }
        for _ in 0..200 {
            let cam = CameraPose::orbit(target, radius, azimuth, elevation, fov)?;
            if bbox_in_frustum(&cam, bbox, aspect) {
                return Ok(cam);
            }
            radius *= 1.1;
        }
        Err(Error::Sampling("could not fit the bounding box into the camera frustum".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimestepSampler {
    pub t_lo: usize,
    pub t_hi: usize,
    /// When set, the upper bound decays linearly to this value by the
    /// final step.
    pub anneal_floor: Option<usize>,
}

impl TimestepSampler {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if !(1 <= self.t_lo && self.t_lo < self.t_hi && self.t_hi <= t_max) {
            return Err(Error::Config(format!(
                "timestep range [{}, {}] must satisfy 1 <= lo < hi <= {t_max}",
                self.t_lo, self.t_hi
            )));
        }
        if let Some(f) = self.anneal_floor {
            if f < self.t_lo || f > self.t_hi {
                return Err(Error::Config(format!("anneal floor {f} outside the timestep range")));
            }
        }
        Ok(())
    }

    pub fn upper_at(&self, step: usize, total: usize) -> usize {
        match self.anneal_floor {
            None => self.t_hi,
            Some(floor) => {
                let frac = if total <= 1 { 1.0 } else { (step.min(total - 1)) as f64 / (total - 1) as f64 };
                (self.t_hi as f64 - frac * (self.t_hi - floor) as f64).round() as usize
            }
        }
    }

    pub fn sample(&self, step: usize, total: usize, rng: &mut impl Rng) -> usize {
        rng.random_range(self.t_lo..=self.upper_at(step, total))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub total_steps: usize,
    pub lambda_geo: f64,
    pub guidance_weight: f64,
    pub timesteps: TimestepSampler,
    pub samples_per_ray: usize,
    /// Fixed render background; a random gray per step when absent.
    pub background: Option<[f64; 3]>,
    pub camera: CameraSampler,
    pub geo: GeoLossConfig,
    pub lr_tables: f64,
    pub lr_heads: f64,
    /// Write `field_step{N}.ckpt` every this many steps (0 = only the end).
    pub checkpoint_every: usize,
    pub prompt: String,
    /// Re-rasterize the conditioning image after each step and compare.
    pub audit: bool,
    pub max_consecutive_skips: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            lambda_geo: 1.0,
            guidance_weight: 7.5,
            timesteps: TimestepSampler { t_lo: 20, t_hi: 980, anneal_floor: None },
            samples_per_ray: 48,
            background: None,
            camera: CameraSampler::default(),
            geo: GeoLossConfig::default(),
            lr_tables: 1e-2,
            lr_heads: 1e-3,
            checkpoint_every: 0,
            prompt: "a photo of sks person".into(),
            audit: false,
            max_consecutive_skips: 3,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if !(self.lambda_geo >= 0.0 && self.lambda_geo.is_finite()) {
            return Err(Error::Config("lambda_geo must be a non-negative number".into()));
        }
        if !self.guidance_weight.is_finite() {
            return Err(Error::Config("guidance weight must be finite".into()));
        }
        if self.samples_per_ray == 0 {
            return Err(Error::Config("samples_per_ray must be positive".into()));
        }
        if self.max_consecutive_skips == 0 {
            return Err(Error::Config("max_consecutive_skips must be positive".into()));
        }
        if let Some(bg) = self.background {
            if bg.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config("background must lie in [0, 1]".into()));
            }
        }
        self.timesteps.validate(t_max)?;
        self.camera.validate()?;
        self.geo.validate()
    }
}

/// Diagnostics of one distillation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub resolution: [usize; 2],
    pub timestep: usize,
    pub sds_grad_norm: f64,
    pub geo_loss: f64,
    pub skipped: bool,
    pub part: Option<BodyPart>,
    pub camera: CameraPose,
    pub crop: Crop,
    pub wall_ms: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub resolution: [usize; 2],
    pub sds_grad_norm: Option<f64>,
    pub geo_loss: f64,
    pub wall_ms: f64,
}

impl From<&StepReport> for MetricsRecord {
    fn from(r: &StepReport) -> Self {
        Self {
            step: r.step,
            resolution: r.resolution,
            sds_grad_norm: r.sds_grad_norm.is_finite().then_some(r.sds_grad_norm),
            geo_loss: r.geo_loss,
            wall_ms: r.wall_ms,
        }
    }
}

/// Field gradient of one step before it is applied.
#[derive(Debug, Clone)]
pub struct StepGradient {
    pub grad: Vec<f64>,
    pub sds_norm: f64,
    pub geo_loss: f64,
    pub timestep: usize,
    pub resolution: [usize; 2],
    pub camera: CameraPose,
    pub crop: Crop,
    pub part: Option<BodyPart>,
    pub conditioning: Image,
}

pub struct DistillState<D: Denoiser> {
    pub field: RadianceField,
    pub denoiser: D,
    pub noise: NoiseSchedule,
    pub skeleton: ArticulatedSkeleton,
    pub meshes: Vec<PartMesh>,
    pub schedule: ResolutionSchedule,
    pub config: DistillConfig,
    pub vocab: Vocabulary,
    pub seed: u64,
    pub step: usize,
    optimizer: Adam,
    consecutive_skips: usize,
    skipped_total: usize,
}

// Per-step random substreams.
const STREAM_CAMERA: u64 = 1;
const STREAM_ZOOM: u64 = 2;
const STREAM_RENDER: u64 = 3;
const STREAM_TIMESTEP: u64 = 4;
const STREAM_NOISE: u64 = 5;
const STREAM_GEO: u64 = 6;
const STREAM_BACKGROUND: u64 = 7;

impl<D: Denoiser> DistillState<D> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        field: RadianceField,
        denoiser: D,
        noise: NoiseSchedule,
        skeleton: ArticulatedSkeleton,
        meshes: Vec<PartMesh>,
        schedule: ResolutionSchedule,
        config: DistillConfig,
        vocab: Vocabulary,
        seed: u64,
        precision: Precision,
    ) -> Result<Self> {
        config.validate(noise.t_max())?;
        schedule.validate()?;
        skeleton.validate()?;
        for m in &meshes {
            m.validate()?;
        }
        vocab.tokenize(&config.prompt)?;
        let mut optimizer = Adam::new(
            field.params().len(),
            vec![(field.tables_range(), config.lr_tables), (field.heads_range(), config.lr_heads)],
        );
        optimizer.precision = precision;
        Ok(Self {
            field,
            denoiser,
            noise,
            skeleton,
            meshes,
            schedule,
            config,
            vocab,
            seed,
            step: 0,
            optimizer,
            consecutive_skips: 0,
            skipped_total: 0,
        })
    }

    pub fn skipped_steps(&self) -> usize {
        self.skipped_total
    }

    fn step_rng(&self, stream: u64) -> DetRng {
        rng_from_seed(mix_seed(mix_seed(self.seed, self.step as u64), stream))
    }

    /// The text prompt for a step, with a part phrase for zoomed views.
    pub fn prompt_tokens(&self, part: Option<BodyPart>) -> Result<Vec<u32>> {
        self.vocab.tokenize(&part_prompt(part, &self.config.prompt))
    }

    /// Assembles the field gradient of the current step without applying it.
    pub fn compute_gradient(&self) -> Result<StepGradient> {
        let stage = self.schedule.stage_at(self.step)?.clone();
        let [h, w] = stage.render;
        let [uh, uw] = stage.upsample;
        let bbox = self.field.bbox();
        let camera = self.config.camera.sample(&bbox, w as f64 / h as f64, &mut self.step_rng(STREAM_CAMERA))?;
        let (part, zoom) = choose_zoom(&stage, &self.skeleton, &camera, &mut self.step_rng(STREAM_ZOOM))?;
        let crop = zoom.crop;
        let conditioning = rasterize_skeleton_crop(&self.skeleton, &camera, uh, uw, Some(crop))?.image;

        let background = match self.config.background {
            Some(bg) => bg,
            None => {
                let g = self.step_rng(STREAM_BACKGROUND).random::<f64>();
                [g; 3]
            }
        };
        let settings = RenderSettings { height: h, width: w, samples_per_ray: self.config.samples_per_ray, background };
        let out = render::render_differentiable(&self.field, &camera, &settings, Some(crop), &mut self.step_rng(STREAM_RENDER))?;
        let x = upsample(&out.color, uh, uw)?.to_signed();

        let t = self.config.timesteps.sample(self.step, self.config.total_steps, &mut self.step_rng(STREAM_TIMESTEP));
        let eps = gaussian_image(uh, uw, 3, &mut self.step_rng(STREAM_NOISE));
        let x_t = add_noise(&self.noise, &x, t, &eps)?;
        let cond = Condition::new(Some(self.prompt_tokens(part)?), Some(conditioning.clone()));
        let eps_hat = cfg_epsilon_with_noise(&self.denoiser, &x_t, t, &cond, self.config.guidance_weight, &eps)?;
        eps_hat.check_same_shape(&eps)?;

        // d/dx of the surrogate Σ w(t)(ε̂ − ε)·x, with x = 2·color − 1.
        let wt = self.noise.sigma(t).powi(2);
        let g_signed = Image::from_vec(
            uh,
            uw,
            3,
            eps_hat.data.iter().zip(&eps.data).map(|(a, b)| wt * (a - b) * 2.0).collect(),
        )?;
        let d_color = upsample_adjoint(&g_signed, h, w)?;
        let mut grad = render::backward(&self.field, &out.tape, &d_color, None)?;
        let sds_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();

        let mut geo_value = 0.0;
        if self.config.lambda_geo > 0.0 && !self.meshes.is_empty() {
            let mut rng = self.step_rng(STREAM_GEO);
            let per_mesh = |n: usize| n.div_ceil(self.meshes.len());
            let mut on = Vec::new();
            let mut off = Vec::new();
            for m in &self.meshes {
                on.extend(sample_on_mesh(m, per_mesh(self.config.geo.n_on), &mut rng)?);
                off.extend(sample_near_mesh(m, per_mesh(self.config.geo.n_off), (self.config.geo.eps_surf, self.config.geo.r_off), &mut rng)?);
            }
            let loss = geo_loss(&self.field, &on, &off, &self.config.geo)?;
            accumulate_geo_gradient(&self.field, &on, &off, &loss, self.config.lambda_geo, &mut grad)?;
            geo_value = loss.value;
        }
        Ok(StepGradient {
            grad,
            sds_norm,
            geo_loss: geo_value,
            timestep: t,
            resolution: [h, w],
            camera,
            crop,
            part,
            conditioning,
        })
    }

    /// One optimization step. A non-finite gradient skips the update; too
    /// many consecutive skips abort the run.
    pub fn sds_step(&mut self) -> Result<StepReport> {
        let start = Stopwatch::start();
        let g = self.compute_gradient();
        let g = match g {
            Ok(g) => g,
            Err(Error::Numeric(msg)) => return self.skip(msg, start),
            Err(e) => return Err(e),
        };
        if self.config.audit {
            let [uh, uw] = self.schedule.stage_at(self.step)?.upsample;
            let again = rasterize_skeleton_crop(&self.skeleton, &g.camera, uh, uw, Some(g.crop))?.image;
            if again != g.conditioning {
                return Err(Error::Contract(format!("conditioning image mismatch at step {}", self.step)));
            }
        }
        if !g.grad.iter().all(|v| v.is_finite()) {
            let msg = format!("non-finite gradient at step {}", self.step);
            let mut report = self.skip(msg, start)?;
            report.resolution = g.resolution;
            report.timestep = g.timestep;
            return Ok(report);
        }
        self.consecutive_skips = 0;
        self.optimizer.step(self.field.params_mut(), &g.grad);
        let report = StepReport {
            step: self.step,
            resolution: g.resolution,
            timestep: g.timestep,
            sds_grad_norm: g.sds_norm,
            geo_loss: g.geo_loss,
            skipped: false,
            part: g.part,
            camera: g.camera,
            crop: g.crop,
            wall_ms: start.elapsed_ms(),
        };
        self.step += 1;
        Ok(report)
    }

    fn skip(&mut self, msg: String, start: Stopwatch) -> Result<StepReport> {
        self.consecutive_skips += 1;
        self.skipped_total += 1;
        log::warn!("{msg}; skipping step ({} in a row)", self.consecutive_skips);
        if self.consecutive_skips >= self.config.max_consecutive_skips {
            return Err(Error::Abort(format!(
                "{} consecutive non-finite steps, last at step {}: {msg}",
                self.consecutive_skips, self.step
            )));
        }
        let stage = self.schedule.stage_at(self.step)?;
        let report = StepReport {
            step: self.step,
            resolution: stage.render,
            timestep: 0,
            sds_grad_norm: f64::NAN,
            geo_loss: f64::NAN,
            skipped: true,
            part: None,
            camera: CameraPose::orbit([0.0; 3], 1.0, 0.0, 0.0, 1.0)?,
            crop: Crop::FULL,
            wall_ms: start.elapsed_ms(),
        };
        self.step += 1;
        Ok(report)
    }
}

/// Wall-clock timer; reads zero where the platform has no clock (wasm).
#[derive(Debug, Clone, Copy)]
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        #[cfg(not(target_arch = "wasm32"))]
        return Self(std::time::Instant::now());
        #[cfg(target_arch = "wasm32")]
        Self()
    }

    fn elapsed_ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64() * 1e3;
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

/// Where `distill` writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct DistillOutputs {
    pub dir: Option<PathBuf>,
    pub precision: Precision,
}

pub fn checkpoint_name(step: usize) -> String {
    format!("field_step{step}.ckpt")
}

/// Runs steps until `state.step == total_steps`, appending one metrics line
/// per step and writing field checkpoints.
pub fn distill<D: Denoiser>(state: &mut DistillState<D>, total_steps: usize, outputs: &DistillOutputs) -> Result<Vec<StepReport>> {
    let mut log_file = match &outputs.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let save = |state: &DistillState<D>, dir: &Path| -> Result<()> {
        let path = dir.join(checkpoint_name(state.step));
        state.field.to_checkpoint(outputs.precision)?.save(path)
    };
    let mut reports = Vec::new();
    while state.step < total_steps {
        let r = state.sds_step()?;
        if let Some((f, path)) = &mut log_file {
            let line = serde_json::to_string(&MetricsRecord::from(&r)).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(dir) = &outputs.dir {
            let every = state.config.checkpoint_every;
            if every > 0 && state.step % every == 0 && state.step < total_steps {
                save(state, dir)?;
            }
        }
        reports.push(r);
    }
    if let Some(dir) = &outputs.dir {
        save(state, dir)?;
    }
    Ok(reports)
}

/// Ground-truth-free helper: density of `field` sampled on an `n³` grid
/// spanning `bbox`, cell centers, x fastest.
pub fn density_grid(field: &RadianceField, bbox: &Aabb, n: usize) -> Result<Vec<f64>> {
    let ext = bbox.extent();
    let mut pts = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let f = |idx: usize, a: usize| bbox.min[a] + (idx as f64 + 0.5) / n as f64 * ext[a];
                pts.push(Vec3::new(f(i, 0), f(j, 1), f(k, 2)));
            }
        }
    }
    field.query_densities(&pts)
}

/// Intersection over union of two boolean occupancy grids.
pub fn voxel_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
