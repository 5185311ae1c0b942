//! Run configuration: one TOML file, every table optional, unknown keys
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::booth::{BoothConfig, PretrainConfig};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::geometry::{ArticulatedSkeleton, PartMesh};
use crate::guidance::{ToyDenoiserConfig, Vocabulary};
use crate::optim::Precision;
use crate::schedule::ResolutionSchedule;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Subject few-shot dataset.
    pub dataset: PathBuf,
    /// Class-level dataset used to pretrain the base denoiser.
    pub class_dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
    /// Vocabulary file; the builtin vocabulary when absent.
    pub vocab: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data/subject".into(),
            class_dataset: "data/class".into(),
            checkpoints: "runs/checkpoints".into(),
            output: "runs/output".into(),
            vocab: None,
        }
    }
}

impl Paths {
    pub fn base_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("base.ckpt")
    }

    pub fn booth_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("booth.ckpt")
    }

    pub fn distill_dir(&self) -> PathBuf {
        self.output.join("distill")
    }
}

/// Which denoiser guides distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    /// The personalized toy denoiser from `booth`.
    Toy,
    /// Closed-form prior whose mean is a centered white sphere.
    AnalyticSphere,
    /// Sphere whose color depends on whether the skeleton faces the camera.
    AnalyticHemisphere,
    /// Always predicts NaN; exercises the abort path.
    Nan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub sphere_radius: f64,
    /// Camera distance and field of view the analytic silhouette assumes.
    pub camera_distance: f64,
    pub fov: f64,
    pub std: f64,
    pub front: [f64; 3],
    pub back: [f64; 3],
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::Toy,
            sphere_radius: 0.25,
            camera_distance: 1.5,
            fov: 0.74,
            std: 0.01,
            front: [0.9, 0.2, 0.2],
            back: [0.2, 0.3, 0.9],
        }
    }
}

/// Skeleton and part meshes anchoring distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AvatarConfig {
    /// Skeleton JSON; the canonical A-pose when absent.
    pub skeleton: Option<PathBuf>,
    pub skeleton_scale: f64,
    /// OBJ files; procedural hands and face when empty and `procedural_parts` is set.
    pub meshes: Vec<PathBuf>,
    pub procedural_parts: bool,
    pub hand_scale: f64,
    pub face_scale: f64,
}

impl Default for AvatarConfig {
    fn default() -> Self {
        Self {
            skeleton: None,
            skeleton_scale: 1.0,
            meshes: Vec::new(),
            procedural_parts: true,
            hand_scale: 0.2,
            face_scale: 0.25,
        }
    }
}

impl AvatarConfig {
    pub fn load_skeleton(&self) -> Result<ArticulatedSkeleton> {
        let sk = match &self.skeleton {
            Some(p) => ArticulatedSkeleton::load(p)?,
            None => ArticulatedSkeleton::canonical_a_pose(),
        };
        sk.validate()?;
        Ok(sk.scaled(self.skeleton_scale))
    }

    /// Explicit meshes, or procedural hands and face placed on the skeleton.
    pub fn load_meshes(&self, skeleton: &ArticulatedSkeleton) -> Result<Vec<PartMesh>> {
        if !self.meshes.is_empty() {
            return self
                .meshes
                .iter()
                .map(|p| PartMesh::load_obj(p, &p.file_stem().unwrap_or_default().to_string_lossy()))
                .collect();
        }
        if !self.procedural_parts {
            return Ok(Vec::new());
        }
        let joint = |name: &str| {
            skeleton
                .joint_index(name)
                .map(|i| skeleton.joints[i].position)
                .ok_or_else(|| Error::Config(format!("skeleton lacks joint {name:?} needed for part meshes")))
        };
        let s = self.skeleton_scale;
        Ok(vec![
            PartMesh::procedural_hand(joint("l_wrist")?, self.hand_scale * s),
            PartMesh::procedural_hand(joint("r_wrist")?, self.hand_scale * s),
            PartMesh::procedural_face(joint("head")?, self.face_scale * s),
        ])
    }
}

/// Settings for images written by `turntable`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub samples_per_ray: usize,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { height: 64, width: 64, samples_per_ray: 64, background: [1.0; 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TurntableConfig {
    pub views: usize,
    pub radius: f64,
    /// Radians.
    pub elevation: f64,
    pub fov: f64,
}

impl Default for TurntableConfig {
    fn default() -> Self {
        Self { views: 8, radius: 3.1, elevation: 0.0, fov: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Stored report to compare against; report-only when absent or missing.
    pub baseline: Option<PathBuf>,
    /// Allowed slowdown before the gate fires, as a fraction.
    pub tolerance: f64,
    pub encode_queries: usize,
    pub render_size: usize,
    pub denoiser_steps: usize,
    pub denoiser_size: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            baseline: None,
            tolerance: 0.2,
            encode_queries: 200_000,
            render_size: 48,
            denoiser_steps: 50,
            denoiser_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub denoiser: ToyDenoiserConfig,
    pub pretrain: PretrainConfig,
    pub booth: BoothConfig,
    pub field: FieldConfig,
    pub distill: DistillConfig,
    pub prior: PriorConfig,
    pub avatar: AvatarConfig,
    /// Three-stage default scaled to `distill.total_steps` when absent.
    pub schedule: Option<ResolutionSchedule>,
    pub render: RenderConfig,
    pub turntable: TurntableConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            workers: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            denoiser: ToyDenoiserConfig::default(),
            pretrain: PretrainConfig::default(),
            booth: BoothConfig::default(),
            field: FieldConfig::default(),
            distill: DistillConfig::default(),
            prior: PriorConfig::default(),
            avatar: AvatarConfig::default(),
            schedule: None,
            render: RenderConfig::default(),
            turntable: TurntableConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} does not exist", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Structural checks that need no file system access.
    pub fn validate(&self) -> Result<()> {
        self.booth.validate()?;
        self.schedule().validate()?;
        self.distill.validate(self.denoiser.t_max)?;
        if self.render.height == 0 || self.render.width == 0 || self.render.samples_per_ray == 0 {
            return Err(Error::Config("render size and samples per ray must be positive".into()));
        }
        if self.turntable.views == 0 {
            return Err(Error::Config("turntable needs at least one view".into()));
        }
        if !(self.bench.tolerance > 0.0 && self.bench.tolerance < 1.0) {
            return Err(Error::Config("bench tolerance must lie in (0, 1)".into()));
        }
        if !(self.prior.std > 0.0 && self.prior.sphere_radius > 0.0 && self.prior.camera_distance > self.prior.sphere_radius)
        {
            return Err(Error::Config("analytic prior needs std > 0 and a camera outside the sphere".into()));
        }
        if !(self.avatar.skeleton_scale > 0.0) {
            return Err(Error::Config("skeleton scale must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> ResolutionSchedule {
        self.schedule.clone().unwrap_or_else(|| ResolutionSchedule::three_stage(self.distill.total_steps))
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        match &self.paths.vocab {
            Some(p) => Vocabulary::load(p),
            None => Ok(Vocabulary::default()),
        }
    }

    /// Denoiser shape with the vocabulary size filled in from the vocabulary.
    pub fn denoiser_config(&self, vocab: &Vocabulary) -> ToyDenoiserConfig {
        ToyDenoiserConfig { vocab_size: vocab.len(), ..self.denoiser.clone() }
    }
}

/// Fails with a config error naming `what` when `path` does not exist.
pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found at {}", path.display())))
    }
}

/// Creates `dir` (and parents) if needed.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.prior.kind = PriorKind::AnalyticHemisphere;
        cfg.schedule = Some(ResolutionSchedule::constant(16, 16));
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sed = 3", "[distill]\ntotal_step = 10", "[field.encoding]\nlevel = 3", "[bogus]"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let bad = ["[booth]\nlambda_cppl = -1.0", "[distill]\nsamples_per_ray = 0", "precision = \"f16\""];
        for text in bad {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn default_schedule_follows_step_count() {
        let cfg = RunConfig::parse("[distill]\ntotal_steps = 100").unwrap();
        assert_eq!(cfg.schedule(), ResolutionSchedule::three_stage(100));
    }
}
