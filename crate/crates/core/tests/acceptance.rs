//! Acceptance experiments. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any failed. `ACCEPTANCE_ONLY=4,7` runs a subset.

use std::f64::consts::TAU;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use avatar_distill::booth::{evaluate_loss, finetune, generate_prior_set, pretrain, BoothConfig, PretrainConfig};
use avatar_distill::commands::{cmd_booth, cmd_distill, cmd_pretrain, cmd_synth_data, cmd_turntable, render_turntable};
use avatar_distill::config::RunConfig;
use avatar_distill::distill::{density_grid, distill, voxel_iou, CameraSampler, DistillConfig, DistillOutputs, DistillState};
use avatar_distill::eval::{psnr, ssim, SsimConfig};
use avatar_distill::field::analytic::FnField;
use avatar_distill::field::{FieldConfig, HashGridConfig, RadianceField};
use avatar_distill::geometry::{
    accumulate_geo_gradient, geo_loss, rasterize_skeleton, sample_near_mesh, sample_on_mesh, ArticulatedSkeleton,
    GeoLossConfig, PartMesh,
};
use avatar_distill::guidance::{
    pose_faces_camera, DiskColors, DiskPrior, EchoNoise, NoiseSchedule, SamplerSettings, ToyConditionalDenoiser,
    ToyDenoiserConfig, Vocabulary,
};
use avatar_distill::image::Image;
use avatar_distill::math::{rng_from_seed, Aabb, Vec3};
use avatar_distill::optim::{Adam, Precision};
use avatar_distill::render::{self, composite, march, CameraPose, RenderSettings};
use avatar_distill::schedule::{ResolutionSchedule, Stage, ZoomMode};
use avatar_distill::synth::{synthesize, SynthConfig, CLASS_CAPTION};
use avatar_distill::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

// ---------------------------------------------------------------- 1

fn gradient_check() -> Result<Outcome> {
    const REL_TOL: f64 = 1e-3;
    // Differences below this are finite-difference round-off, not disagreement.
    const ABS_FLOOR: f64 = 1e-9;
    let cfg = FieldConfig {
        encoding: HashGridConfig { levels: 2, base_resolution: 4, growth: 2.0, table_size: 1 << 8, feature_dim: 2 },
        density_hidden: vec![8],
        color_hidden: vec![8],
        bbox: Aabb::cube(0.6),
        density_bias: 0.5,
        table_init: 0.5,
    };
    let mut field = RadianceField::new(cfg, &mut rng_from_seed(11))?;
    let cam = CameraPose::orbit([0.0; 3], 2.0, 0.4, 0.3, 0.7)?;
    let settings = RenderSettings { height: 8, width: 8, samples_per_ray: 16, background: [0.2, 0.4, 0.6] };
    let loss = |f: &RadianceField| -> Result<f64> {
        Ok(render::render_image(f, &cam, &settings, None, &mut rng_from_seed(5))?.color.mean())
    };
    let out = render::render_differentiable(&field, &cam, &settings, None, &mut rng_from_seed(5))?;
    let n_px = (settings.height * settings.width * 3) as f64;
    let d_color = Image::filled(8, 8, 3, 1.0 / n_px);
    let grad = render::backward(&field, &out.tape, &d_color, None)?;

    // Most hash slots are never touched by an 8x8 render; sample among the
    // parameters that influence it so the check is not vacuous.
    let n = field.params().len();
    let h = 1e-6;
    let mut fd = vec![0.0; n];
    for (i, slot) in fd.iter_mut().enumerate() {
        let orig = field.params()[i];
        field.params_mut()[i] = orig + h;
        let up = loss(&field)?;
        field.params_mut()[i] = orig - h;
        let down = loss(&field)?;
        field.params_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    let active: Vec<usize> = (0..n).filter(|&i| grad[i].abs().max(fd[i].abs()) > 1e3 * ABS_FLOOR).collect();
    let mut pick = rng_from_seed(99);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..32 {
        let i = active[pick.random_range(0..active.len())];
        let err = (grad[i] - fd[i]).abs();
        let scale = grad[i].abs().max(fd[i].abs());
        worst = worst.max(err / scale);
        if err > REL_TOL * scale && err > ABS_FLOOR {
            failures += 1;
        }
    }
    // Parameters the render does not see must have zero analytic gradient.
    let silent_mismatch = (0..n).filter(|&i| fd[i] == 0.0 && grad[i] != 0.0).count();
    outcome(
        failures == 0 && silent_mismatch == 0,
        format!("32 of {} active parameters, worst relative error {worst:.2e}, {failures} over {REL_TOL:e}", active.len()),
    )
}

// ---------------------------------------------------------------- 2

fn transmittance_identities() -> Result<Outcome> {
    let bbox = Aabb::cube(1.0);
    let blobby = FnField::new(bbox, |p: &Vec3, _d: &Vec3| {
        let s = (3.0 * p.x).sin() * (2.0 * p.y).cos() + p.z;
        (4.0 * s.max(0.0) + 0.3 * (p.norm() - 0.2).abs(), [0.5, 0.5, 0.5])
    });
    let mut rng = rng_from_seed(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let origin = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 3.0);
        let target = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let ray = render::Ray { origin, dir: (target - origin).normalize(), t_near: 0.0, t_far: 10.0 };
        let samples = march(&blobby, &ray, 32, &mut rng)?;
        let r = composite(&samples, [0.0; 3]);
        worst = worst.max((r.alpha + r.transmittance - 1.0).abs());
    }

    // Slab |z| < 0.25 of density 3, crossed head-on.
    let (sigma, thickness) = (3.0, 0.5);
    let slab = FnField::new(Aabb::new([-1.0, -1.0, -0.25], [1.0, 1.0, 0.25]), move |_p: &Vec3, _d: &Vec3| (sigma, [1.0; 3]));
    let ray = render::Ray { origin: Vec3::new(0.1, -0.2, 2.0), dir: Vec3::new(0.0, 0.0, -1.0), t_near: 0.0, t_far: 10.0 };
    let mut slab_err: f64 = 0.0;
    for seed in 0..16 {
        let r = composite(&march(&slab, &ray, 1024, &mut rng_from_seed(seed))?, [0.0; 3]);
        slab_err = slab_err.max((r.alpha - (1.0 - (-sigma * thickness).exp())).abs());
    }
    outcome(
        worst <= 1e-6 && slab_err <= 1e-3,
        format!("max |sum w + T - 1| = {worst:.1e} over 10k rays; slab alpha error {slab_err:.1e} at 1024 samples"),
    )
}

// ---------------------------------------------------------------- 3

fn small_field(half: f64) -> Result<RadianceField> {
    let cfg = FieldConfig {
        encoding: HashGridConfig { levels: 6, base_resolution: 8, growth: 1.5, table_size: 1 << 12, feature_dim: 2 },
        density_hidden: vec![32],
        color_hidden: vec![32],
        bbox: Aabb::cube(half),
        density_bias: -1.0,
        table_init: 1e-4,
    };
    RadianceField::new(cfg, &mut rng_from_seed(1))
}

fn sds_fixed_point() -> Result<Outcome> {
    let field = small_field(0.6)?;
    let before = field.params().to_vec();
    let config = DistillConfig { total_steps: 1000, lambda_geo: 0.0, samples_per_ray: 8, ..DistillConfig::default() };
    let mut state = DistillState::new(
        field,
        EchoNoise,
        NoiseSchedule::cosine(1000)?,
        ArticulatedSkeleton::canonical_a_pose(),
        vec![],
        ResolutionSchedule::constant(8, 8),
        config,
        Vocabulary::default(),
        4,
        Precision::F64,
    )?;
    let reports = distill(&mut state, 1000, &DistillOutputs::default())?;
    let changed = state.field.params().iter().zip(&before).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    outcome(changed == 0, format!("{} steps, {changed} parameters changed", reports.len()))
}

// ---------------------------------------------------------------- 4, 7

const SPHERE_RADIUS: f64 = 0.25;
const CAM_DISTANCE: f64 = 1.5;
const FOV: f64 = 0.74;
const TAU_MAX: f64 = 20.0;

fn sphere_state(colors: DiskColors, elevation: f64, schedule: ResolutionSchedule, skeleton: ArticulatedSkeleton) -> Result<DistillState<DiskPrior>> {
    let noise = NoiseSchedule::cosine(1000)?;
    let prior = DiskPrior {
        schedule: noise.clone(),
        sphere_radius: SPHERE_RADIUS,
        camera_distance: CAM_DISTANCE,
        fov_y: FOV,
        colors,
        std: 0.01,
    };
    let config = DistillConfig {
        total_steps: 2000,
        lambda_geo: 0.0,
        guidance_weight: 1.0,
        samples_per_ray: 32,
        background: Some([0.0; 3]),
        camera: CameraSampler {
            target: [0.0; 3],
            radius: [CAM_DISTANCE, CAM_DISTANCE],
            elevation: [-elevation, elevation],
            azimuth: [0.0, TAU],
            fov: [FOV, FOV],
            look_at_jitter: 0.0,
        },
        ..DistillConfig::default()
    };
    DistillState::new(small_field(0.3)?, prior, noise, skeleton, vec![], schedule, config, Vocabulary::default(), 3, Precision::F64)
}

fn analytic_sphere() -> Result<Outcome> {
    let mut state = sphere_state(
        DiskColors::Plain([1.0; 3]),
        1.0,
        ResolutionSchedule::constant(24, 24),
        ArticulatedSkeleton::canonical_a_pose(),
    )?;
    let start = Instant::now();
    distill(&mut state, 2000, &DistillOutputs::default())?;
    let secs = start.elapsed().as_secs_f64();
    let bbox = state.field.bbox();
    let n = 64;
    let density = density_grid(&state.field, &bbox, n)?;
    let occupied: Vec<bool> = density.iter().map(|&d| d >= TAU_MAX / 2.0).collect();
    let ext = bbox.extent();
    let mut truth = Vec::with_capacity(n * n * n);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let c = |idx: usize, a: usize| bbox.min[a] + (idx as f64 + 0.5) / n as f64 * ext[a];
                truth.push(Vec3::new(c(i, 0), c(j, 1), c(k, 2)).norm() <= SPHERE_RADIUS);
            }
        }
    }
    let iou = voxel_iou(&occupied, &truth);
    outcome(iou >= 0.8 && secs <= 900.0, format!("voxel IoU {iou:.3} after 2000 steps in {secs:.0} s"))
}

fn hemisphere_consistency() -> Result<Outcome> {
    let front = [0.9, 0.2, 0.2];
    let back = [0.2, 0.3, 0.9];
    // The pose key needs a legible skeleton raster, hence the 2x upsample.
    let schedule = ResolutionSchedule::new(vec![Stage {
        start_step: 0,
        render: [24, 24],
        upsample: [48, 48],
        zoom: ZoomMode::FullBody,
        zoom_probability: 0.0,
    }])?;
    let skeleton = ArticulatedSkeleton::canonical_a_pose().scaled(0.6);
    let mut state = sphere_state(DiskColors::Keyed { front, back }, 0.3, schedule, skeleton.clone())?;
    distill(&mut state, 1000, &DistillOutputs::default())?;
    let settings = RenderSettings { height: 24, width: 24, samples_per_ray: 64, background: [0.0; 3] };
    let mut correct = 0;
    let mut keyed = 0;
    for k in 0..36 {
        let az = (10.0 * k as f64 + 5.0).to_radians();
        let cam = CameraPose::orbit([0.0; 3], CAM_DISTANCE, az, 0.0, FOV)?;
        if pose_faces_camera(&rasterize_skeleton(&skeleton, &cam, 48, 48)?.image) == Some(az.cos() > 0.0) {
            keyed += 1;
        }
        let out = render::render_image(&state.field, &cam, &settings, None, &mut rng_from_seed(k))?;
        let mut mean = [0.0; 3];
        let mut count = 0.0;
        for p in 0..24 * 24 {
            let a = out.alpha.data[p];
            if a > 0.5 {
                for c in 0..3 {
                    mean[c] += out.color.data[3 * p + c] / a;
                }
                count += 1.0;
            }
        }
        let mean = mean.map(|v| v / f64::max(count, 1.0));
        let dist = |t: [f64; 3]| (0..3).map(|i| (mean[i] - t[i]).powi(2)).sum::<f64>();
        let (right, wrong) = if az.cos() > 0.0 { (front, back) } else { (back, front) };
        if count > 0.0 && dist(right) < dist(wrong) {
            correct += 1;
        }
    }
    outcome(
        correct as f64 >= 0.9 * 36.0,
        format!("{correct}/36 azimuths nearer the correct hemisphere color ({keyed}/36 views keyed correctly)"),
    )
}

// ---------------------------------------------------------------- 5

fn cppl_efficacy() -> Result<Outcome> {
    let vocab = Vocabulary::default();
    let (subject, class) = synthesize(&SynthConfig { size: 16, subject_examples: 6, class_examples: 48, max_yaw: 0.7 }, 11)?;
    let fewshot = subject.iter().map(|e| e.to_training(&vocab, [0.0; 3])).collect::<Result<Vec<_>>>()?;
    let class = class.iter().map(|e| e.to_training(&vocab, [0.0; 3])).collect::<Result<Vec<_>>>()?;
    let cfg = ToyDenoiserConfig { vocab_size: vocab.len(), ..ToyDenoiserConfig::default() };
    let mut base = ToyConditionalDenoiser::new(cfg, &mut rng_from_seed(5))?;
    pretrain(&mut base, &class, &PretrainConfig { steps: 1500, ..PretrainConfig::default() }, 5, Precision::F64)?;
    let noise = base.schedule().clone();
    let class_tokens = vocab.tokenize(CLASS_CAPTION)?;
    let pool: Vec<Image> = class.iter().map(|e| e.pose.clone()).collect();
    let booth = BoothConfig::default();
    let sampler = SamplerSettings { steps: booth.sampler_steps, guidance_weight: 1.0, clip_x0: true };
    let all = generate_prior_set(&base, &noise, &class_tokens, &pool, booth.n_prior + 24, sampler, 21)?;
    let (train, held_out) = all.split_at(booth.n_prior);
    let held: Vec<_> = held_out.iter().map(|e| e.item()).collect();
    let subject_items: Vec<_> = fewshot.iter().map(|e| e.item()).collect();
    let subject_token = vocab.subject_id().expect("builtin vocabulary has a subject token");

    let mut results = Vec::new();
    for lambda in [1.0, 0.0] {
        let mut d = base.clone();
        let cfg = BoothConfig { lambda_cppl: lambda, steps: 1500, ..booth.clone() };
        finetune(&mut d, &fewshot, train, &cfg, subject_token, 9, Precision::F64)?;
        let prior_loss = evaluate_loss(&d, &noise, &held, 8, 77)?;
        let rec = evaluate_loss(&d, &noise, &subject_items, 64, 78)?;
        results.push((prior_loss, rec));
    }
    let ((prior_with, rec_with), (prior_without, rec_without)) = (results[0], results[1]);
    let rec_gap = (rec_with - rec_without).abs() / rec_without;
    outcome(
        prior_with <= prior_without && rec_gap <= 0.10,
        format!(
            "held-out prior loss {prior_with:.4} (with) vs {prior_without:.4} (without); rec loss {rec_with:.4} vs {rec_without:.4} ({:.1}% apart)",
            100.0 * rec_gap
        ),
    )
}

// ---------------------------------------------------------------- 6

fn local_geometry() -> Result<Outcome> {
    let geo = GeoLossConfig::default();
    let hand = PartMesh::procedural_hand([0.0; 3], 0.2);
    let (lo, hi) = hand.bounds();
    let m = geo.r_off + 0.01;
    let cfg = FieldConfig {
        encoding: HashGridConfig { levels: 8, base_resolution: 16, growth: 1.5, table_size: 1 << 15, feature_dim: 2 },
        density_hidden: vec![32],
        color_hidden: vec![16],
        bbox: Aabb::new([lo.x - m, lo.y - m, lo.z - m], [hi.x + m, hi.y + m, hi.z + m]),
        density_bias: -1.0,
        table_init: 1e-4,
    };
    let mut field = RadianceField::new(cfg, &mut rng_from_seed(1))?;
    let n = field.params().len();
    let mut opt = Adam::new(n, vec![(field.tables_range(), 1e-2), (field.heads_range(), 1e-2)]);
    let mut rng = rng_from_seed(7);
    for _ in 0..500 {
        let on = sample_on_mesh(&hand, geo.n_on, &mut rng)?;
        let off = sample_near_mesh(&hand, geo.n_off, (geo.eps_surf, geo.r_off), &mut rng)?;
        let loss = geo_loss(&field, &on, &off, &geo)?;
        let mut grad = vec![0.0; n];
        accumulate_geo_gradient(&field, &on, &off, &loss, 1.0, &mut grad)?;
        opt.step(field.params_mut(), &grad);
    }
    // Fresh probes, never seen in training.
    let mut probe = rng_from_seed(99);
    let on = sample_on_mesh(&hand, 2000, &mut probe)?;
    let off = sample_near_mesh(&hand, 2000, (geo.eps_surf, geo.r_off), &mut probe)?;
    let on_d = field.query_densities(&on)?;
    let off_d = field.query_densities(&off)?;
    let on_ok = on_d.iter().filter(|&&d| d >= geo.tau_max).count() as f64 / on.len() as f64;
    let off_ok = off_d.iter().filter(|&&d| d <= geo.tau_min).count() as f64 / off.len() as f64;
    outcome(
        on_ok >= 0.95 && off_ok >= 0.95,
        format!("{:.1}% of surface probes at tau >= tau_max, {:.1}% of band probes at tau <= tau_min", 100.0 * on_ok, 100.0 * off_ok),
    )
}

// ---------------------------------------------------------------- 8

fn tiny_run_config(root: &Path) -> RunConfig {
    let text = format!(
        r#"
seed = 17
[paths]
dataset = "{0}/data/subject"
class_dataset = "{0}/data/class"
checkpoints = "{0}/ck"
output = "{0}/out"
[synth]
size = 16
subject_examples = 4
class_examples = 12
[pretrain]
steps = 40
[booth]
steps = 40
n_prior = 6
sampler_steps = 5
prior_batch = 2
[field.encoding]
levels = 4
base_resolution = 8
growth = 1.5
table_size = 1024
feature_dim = 2
[field]
density_hidden = [16]
color_hidden = [16]
[distill]
total_steps = 12
samples_per_ray = 12
checkpoint_every = 4
[[schedule.stages]]
start_step = 0
render = [12, 12]
upsample = [12, 12]
zoom = "full-body"
zoom_probability = 0.0
[[schedule.stages]]
start_step = 6
render = [12, 12]
upsample = [24, 24]
zoom = "random-part"
zoom_probability = 0.5
"#,
        root.display()
    );
    RunConfig::parse(&text).expect("valid test config")
}

fn determinism() -> Result<Outcome> {
    let mut booth_hashes = Vec::new();
    let mut field_hashes = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| avatar_distill::Error::io("tempdir", e))?;
        let cfg = tiny_run_config(dir.path());
        cmd_synth_data(&cfg)?;
        cmd_pretrain(&cfg)?;
        booth_hashes.push(cmd_booth(&cfg)?.checkpoint_sha256);
        let run = cmd_distill(&cfg)?;
        let bytes = std::fs::read(&run.checkpoint).map_err(|e| avatar_distill::Error::io(&run.checkpoint, e))?;
        field_hashes.push(avatar_distill::checkpoint::sha256_hex(&bytes));
    }
    outcome(
        booth_hashes[0] == booth_hashes[1] && field_hashes[0] == field_hashes[1],
        format!("booth {} / {}, distill {} / {}", &booth_hashes[0][..12], &booth_hashes[1][..12], &field_hashes[0][..12], &field_hashes[1][..12]),
    )
}

// ---------------------------------------------------------------- 9

fn disclosure_and_self_metrics() -> Result<Outcome> {
    let readme_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let readme = std::fs::read_to_string(&readme_path).unwrap_or_default();
    let documented = ["27.576", "0.952", "0.041", "5 minutes", "not reproducible"].iter().all(|k| readme.contains(k));

    let dir = tempfile::tempdir().map_err(|e| avatar_distill::Error::io("tempdir", e))?;
    let mut cfg = tiny_run_config(dir.path());
    cfg.render.height = 24;
    cfg.render.width = 24;
    let field = RadianceField::new(cfg.field.clone(), &mut rng_from_seed(3))?;
    let ckpt = dir.path().join("field.ckpt");
    field.to_checkpoint(Precision::F64)?.save(&ckpt)?;
    cmd_turntable(&cfg, &ckpt, 8, None)?;
    let self_dir = dir.path().join("self");
    std::fs::rename(cfg.paths.output.join("turntable"), &self_dir).map_err(|e| avatar_distill::Error::io(&self_dir, e))?;
    let report = cmd_turntable(&cfg, &ckpt, 8, Some(&self_dir))?.expect("ground truth given");
    let json: serde_json::Value = serde_json::from_str(&report.to_json()?).expect("report is JSON");
    let sentinel = json["mean_psnr"].as_f64() == Some(99.0) && json["min_psnr"].as_f64() == Some(99.0);
    let ssim_one = (report.min_ssim - 1.0).abs() < 1e-12;
    // The in-memory sweep is the same as the written one.
    let direct = render_turntable(&cfg, &field, 8)?;
    let azimuths_ok = direct.iter().enumerate().all(|(k, (a, _))| *a == 45.0 * k as f64);
    outcome(
        documented && sentinel && ssim_one && azimuths_ok,
        format!(
            "README disclosure {}; self-render PSNR serialized as {}, min SSIM {:.6}",
            if documented { "present" } else { "missing" },
            json["mean_psnr"],
            report.min_ssim
        ),
    )
}

// ---------------------------------------------------------------- 10

fn oracle_psnr(a: &Image, b: &Image) -> f64 {
    let mut sum = 0.0;
    for r in 0..a.height {
        for c in 0..a.width {
            for k in 0..a.channels {
                let d = a.pixel(r, c)[k] - b.pixel(r, c)[k];
                sum += d * d;
            }
        }
    }
    let mse = sum / (a.height * a.width * a.channels) as f64;
    -10.0 * mse.log10()
}

/// Direct 2D-window SSIM, no separable filtering.
fn oracle_ssim(a: &Image, b: &Image) -> f64 {
    let size = 11usize.min(a.height).min(a.width);
    let size = if size % 2 == 0 { size - 1 } else { size };
    let half = (size / 2) as f64;
    let mut w = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - half).powi(2) + (j as f64 - half).powi(2);
            *v = (-d2 / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut per_channel = 0.0;
    for k in 0..a.channels {
        let mut acc = 0.0;
        let mut count = 0.0;
        for r0 in 0..=a.height - size {
            for c0 in 0..=a.width - size {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let wt = w[i][j] / total;
                        mx += wt * a.pixel(r0 + i, c0 + j)[k];
                        my += wt * b.pixel(r0 + i, c0 + j)[k];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let wt = w[i][j] / total;
                        let dx = a.pixel(r0 + i, c0 + j)[k] - mx;
                        let dy = b.pixel(r0 + i, c0 + j)[k] - my;
                        vx += wt * dx * dx;
                        vy += wt * dy * dy;
                        cov += wt * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        per_channel += acc / count;
    }
    per_channel / a.channels as f64
}

fn metric_cross_validation() -> Result<Outcome> {
    let mut rng = rng_from_seed(10);
    let (mut worst_psnr, mut worst_ssim): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let h = rng.random_range(8..28);
        let w = rng.random_range(8..28);
        let a = Image::from_vec(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f64>()).collect())?;
        let amp = rng.random_range(0.01..0.5);
        let b = Image::from_vec(h, w, 3, a.data.iter().map(|v| (v + amp * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0)).collect())?;
        worst_psnr = worst_psnr.max((psnr(&a, &b, 1.0)? - oracle_psnr(&a, &b)).abs());
        worst_ssim = worst_ssim.max((ssim(&a, &b, &SsimConfig::default())? - oracle_ssim(&a, &b)).abs());
    }
    outcome(
        worst_psnr <= 1e-9 && worst_ssim <= 1e-6,
        format!("50 pairs: max PSNR gap {worst_psnr:.1e} dB, max SSIM gap {worst_ssim:.1e}"),
    )
}

fn main() {
    // `cargo test -- <filter>` passes arguments we ignore; listing requests get an empty list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Result<Outcome>); 10] = [
        (1, "rendering gradient vs finite differences", gradient_check),
        (2, "transmittance identities", transmittance_identities),
        (3, "SDS fixed point under an exact noise oracle", sds_fixed_point),
        (4, "analytic sphere distillation IoU", analytic_sphere),
        (5, "CPPL efficacy", cppl_efficacy),
        (6, "local geometry margins", local_geometry),
        (7, "hemisphere consistency", hemisphere_consistency),
        (8, "booth/distill determinism", determinism),
        (9, "published-number disclosure and self-render metrics", disclosure_and_self_metrics),
        (10, "PSNR/SSIM vs independent oracles", metric_cross_validation),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {}: {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
