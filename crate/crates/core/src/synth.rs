//! Procedural sprite "avatars" standing in for casual subject photos.
//!
//! A posed copy of the canonical skeleton is projected by a fixed frontal
//! camera and drawn as thick anti-aliased capsules. The subject wears a
//! two-color striped texture and is captioned with the subject token; class
//! examples get a random solid color and the plain class caption.

use std::collections::BTreeMap;

use nalgebra::{Rotation3, Unit};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{PoseFile, RawExample};
use crate::error::{Error, Result};
use crate::geometry::{project_joints, ArticulatedSkeleton, JOINT_NAMES};
use crate::image::Image;
use crate::math::{mix_seed, rng_from_seed, Vec3};
use crate::render::CameraPose;

pub const SUBJECT_CAPTION: &str = "a photo of sks person";
pub const CLASS_CAPTION: &str = "a photo of person";

const STRIPE_A: [f64; 3] = [0.9, 0.2, 0.3];
const STRIPE_B: [f64; 3] = [0.95, 0.85, 0.2];
const SKIN: [f64; 3] = [0.95, 0.8, 0.65];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size: usize,
    pub subject_examples: usize,
    pub class_examples: usize,
    /// Maximum body yaw in radians.
    pub max_yaw: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size: 32, subject_examples: 6, class_examples: 48, max_yaw: 0.7 }
    }
}

/// Camera used for every sprite.
pub fn sprite_camera() -> CameraPose {
    CameraPose::orbit([0.0, 0.0, 0.0], 3.2, 0.0, 0.0, 0.7).expect("valid constant camera")
}

fn rotate_about(sk: &mut ArticulatedSkeleton, pivot: usize, moving: &[usize], axis: Vec3, angle: f64) {
    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
    let c = sk.position(pivot);
    for &j in moving {
        let p = c + rot * (sk.position(j) - c);
        sk.joints[j].position = [p.x, p.y, p.z];
    }
}

/// Random pose by forward kinematics on the canonical skeleton.
pub fn random_pose(rng: &mut impl Rng, max_yaw: f64) -> ArticulatedSkeleton {
    let mut sk = ArticulatedSkeleton::canonical_a_pose();
    let idx = |n: &str| JOINT_NAMES.iter().position(|j| *j == n).unwrap();
    let z = Vec3::z();
    let x = Vec3::x();
    for (side, s) in [("l", 1.0), ("r", -1.0)] {
        let (sh, el, wr) = (idx(&format!("{side}_shoulder")), idx(&format!("{side}_elbow")), idx(&format!("{side}_wrist")));
        rotate_about(&mut sk, sh, &[el, wr], z, s * rng.random_range(-0.5..1.1));
        rotate_about(&mut sk, el, &[wr], z, s * rng.random_range(0.0..1.0));
        let (hip, knee, ankle) = (idx(&format!("{side}_hip")), idx(&format!("{side}_knee")), idx(&format!("{side}_ankle")));
        rotate_about(&mut sk, hip, &[knee, ankle], z, s * rng.random_range(-0.05..0.3));
        rotate_about(&mut sk, hip, &[knee, ankle], x, rng.random_range(-0.3..0.3));
    }
    let all: Vec<usize> = (0..sk.joints.len()).collect();
    let yaw = if max_yaw > 0.0 { rng.random_range(-max_yaw..max_yaw) } else { 0.0 };
    rotate_about(&mut sk, 0, &all, Vec3::y(), yaw);
    sk
}

/// Bone radius in world units, by bone index in the standard bone list.
fn bone_radius(bone: usize) -> f64 {
    match bone {
        0 | 1 => 0.085,
        2 => 0.05,
        3..=8 => 0.04,
        _ => 0.055,
    }
}

const HEAD_RADIUS: f64 = 0.11;

fn stamp(img: &mut Image, mask: &mut Image, r: usize, c: usize, color: [f64; 3], cover: f64) {
    if cover <= 0.0 {
        return;
    }
    for (p, col) in img.pixel_mut(r, c).iter_mut().zip(color) {
        *p = *p * (1.0 - cover) + col * cover;
    }
    let m = &mut mask.pixel_mut(r, c)[0];
    *m = m.max(cover);
}

fn draw_capsule(
    img: &mut Image,
    mask: &mut Image,
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
    paint: &dyn Fn(usize, usize) -> [f64; 3],
) {
    let (h, w) = (img.height, img.width);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for r in 0..h {
        for c in 0..w {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let s = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let d = ((px - a.0 - s * dx).powi(2) + (py - a.1 - s * dy).powi(2)).sqrt();
            stamp(img, mask, r, c, paint(r, c), (radius + 0.5 - d).clamp(0.0, 1.0));
        }
    }
}

/// Renders one sprite. Returns `None` when a joint leaves the frame.
pub fn draw_sprite(skeleton: &ArticulatedSkeleton, size: usize, subject: bool, solid: [f64; 3]) -> Result<Option<RawExample>> {
    let cam = sprite_camera();
    let joints = project_joints(skeleton, &cam, size, size, None)?;
    let mut uv = Vec::with_capacity(joints.len());
    for j in &joints {
        match j {
            Some((u, v)) if (0.0..=1.0).contains(u) && (0.0..=1.0).contains(v) => uv.push((*u, *v)),
            _ => return Ok(None),
        }
    }
    // Pixels per world unit at the subject's distance.
    let fr = cam.frame();
    let scale = size as f64 / (2.0 * fr.tan_half_fov * 3.2);
    let px = |(u, v): (f64, f64)| (u * size as f64, v * size as f64);
    let mut img = Image::new(size, size, 3);
    let mut mask = Image::new(size, size, 1);
    let stripes = move |r: usize, _c: usize| if (r / 2) % 2 == 0 { STRIPE_A } else { STRIPE_B };
    let flat = move |_r: usize, _c: usize| solid;
    let body: &dyn Fn(usize, usize) -> [f64; 3] = if subject { &stripes } else { &flat };
    for (k, &(a, b)) in skeleton.bones.iter().enumerate() {
        draw_capsule(&mut img, &mut mask, px(uv[a]), px(uv[b]), (bone_radius(k) * scale).max(0.75), body);
    }
    let head = px(uv[3]);
    draw_capsule(&mut img, &mut mask, head, head, HEAD_RADIUS * scale, &|_, _| SKIN);
    let joints_map: BTreeMap<String, [f64; 2]> =
        JOINT_NAMES.iter().zip(&uv).map(|(n, &(u, v))| (n.to_string(), [u, v])).collect();
    let pose = PoseFile { width: size, height: size, joints: joints_map };
    let caption = if subject { SUBJECT_CAPTION } else { CLASS_CAPTION }.to_string();
    Ok(Some(RawExample { image: img, mask, pose, caption }))
}

fn generate(seed: u64, n: usize, cfg: &SynthConfig, subject: bool) -> Result<Vec<RawExample>> {
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while out.len() < n {
        if attempt > 100 * n as u64 + 100 {
            return Err(Error::Sampling("could not place sprites inside the frame".into()));
        }
        let mut rng = rng_from_seed(mix_seed(seed, attempt));
        attempt += 1;
        let sk = random_pose(&mut rng, cfg.max_yaw);
        let solid = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        if let Some(ex) = draw_sprite(&sk, cfg.size, subject, solid)? {
            out.push(ex);
        }
    }
    Ok(out)
}

/// Subject few-shot set and class set for base-model training.
pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<(Vec<RawExample>, Vec<RawExample>)> {
    if cfg.size < 8 {
        return Err(Error::Config("sprite size must be at least 8".into()));
    }
    let subject = generate(mix_seed(seed, 1), cfg.subject_examples, cfg, true)?;
    let class = generate(mix_seed(seed, 2), cfg.class_examples, cfg, false)?;
    Ok((subject, class))
}
