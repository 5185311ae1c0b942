//! Canonical articulated skeleton and skeleton-image rasterization.
//!
//! Palette: bones on the subject's left side are orange, right side blue,
//! the spine/neck/head chain light gray; joints are white discs. Images are
//! black elsewhere.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::Vec3;
use crate::render::{CameraPose, Crop};

pub const LEFT_LIMB_COLOR: [f64; 3] = [1.0, 0.55, 0.0];
pub const RIGHT_LIMB_COLOR: [f64; 3] = [0.0, 0.45, 1.0];
pub const CENTER_COLOR: [f64; 3] = [0.8, 0.8, 0.8];
pub const JOINT_COLOR: [f64; 3] = [1.0, 1.0, 1.0];

pub const JOINT_NAMES: [&str; 16] = [
    "pelvis", "spine", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
];

/// `(parent, child)` pairs over [`JOINT_NAMES`].
pub const BONES: [(usize, usize); 15] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (2, 4),
    (4, 5),
    (5, 6),
    (2, 7),
    (7, 8),
    (8, 9),
    (0, 10),
    (10, 11),
    (11, 12),
    (0, 13),
    (13, 14),
    (14, 15),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Joint {
    pub name: String,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArticulatedSkeleton {
    pub joints: Vec<Joint>,
    pub bones: Vec<(usize, usize)>,
    /// One RGB color per bone.
    pub colors: Vec<[f64; 3]>,
}

fn side_color(name: &str) -> [f64; 3] {
    if name.starts_with("l_") {
        LEFT_LIMB_COLOR
    } else if name.starts_with("r_") {
        RIGHT_LIMB_COLOR
    } else {
        CENTER_COLOR
    }
}

/// Standard palette for a bone list: the child joint's side decides.
pub fn bone_colors(names: &[&str], bones: &[(usize, usize)]) -> Vec<[f64; 3]> {
    bones.iter().map(|&(_, c)| side_color(names[c])).collect()
}

impl ArticulatedSkeleton {
    pub fn new(joints: Vec<Joint>, bones: Vec<(usize, usize)>, colors: Vec<[f64; 3]>) -> Result<Self> {
        let s = Self { joints, bones, colors };
        s.validate()?;
        Ok(s)
    }

    /// Neutral standing pose, 1.7 units tall, centered at the origin and
    /// facing +z (so the subject's left is +x).
    pub fn canonical_a_pose() -> Self {
        let pos: [[f64; 3]; 16] = [
            [0.0, 0.0, 0.0],
            [0.0, 0.25, 0.0],
            [0.0, 0.5, 0.0],
            [0.0, 0.7, 0.0],
            [0.18, 0.47, 0.0],
            [0.32, 0.24, 0.0],
            [0.44, 0.02, 0.0],
            [-0.18, 0.47, 0.0],
            [-0.32, 0.24, 0.0],
            [-0.44, 0.02, 0.0],
            [0.1, -0.05, 0.0],
            [0.11, -0.45, 0.0],
            [0.12, -0.82, 0.0],
            [-0.1, -0.05, 0.0],
            [-0.11, -0.45, 0.0],
            [-0.12, -0.82, 0.0],
        ];
        let joints = JOINT_NAMES
            .iter()
            .zip(pos)
            .map(|(n, p)| Joint { name: n.to_string(), position: p })
            .collect();
        Self { joints, bones: BONES.to_vec(), colors: bone_colors(&JOINT_NAMES, &BONES) }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joints.len();
        if n == 0 {
            return Err(Error::Domain("skeleton has no joints".into()));
        }
        let mut names = HashSet::new();
        for j in &self.joints {
            if !names.insert(j.name.as_str()) {
                return Err(Error::Domain(format!("duplicate joint name {:?}", j.name)));
            }
            if !j.position.iter().all(|v| v.is_finite()) {
                return Err(Error::Domain(format!("joint {:?} has a non-finite position", j.name)));
            }
        }
        if self.colors.len() != self.bones.len() {
            return Err(Error::Domain("one color per bone is required".into()));
        }
        if self.bones.len() + 1 != n {
            return Err(Error::Domain(format!("{n} joints need {} bones to form a tree", n - 1)));
        }
        // Union-find: n-1 edges without a cycle span a tree.
        let mut parent: Vec<usize> = (0..n).collect();
        fn root(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for &(a, b) in &self.bones {
            if a >= n || b >= n || a == b {
                return Err(Error::Domain(format!("bone ({a}, {b}) is invalid")));
            }
            let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
            if ra == rb {
                return Err(Error::Domain("bone graph contains a cycle".into()));
            }
            parent[ra] = rb;
        }
        Ok(())
    }

    /// Uniformly scaled copy about the origin.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for j in &mut out.joints {
            j.position = j.position.map(|c| c * factor);
        }
        out
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn position(&self, i: usize) -> Vec3 {
        Vec3::from(self.joints[i].position)
    }

    pub fn positions(&self) -> Vec<Vec3> {
        (0..self.joints.len()).map(|i| self.position(i)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("skeleton JSON: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Result of drawing a skeleton; `behind_camera` is set when no joint
/// projects in front of the camera and the image is left empty.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonRaster {
    pub image: Image,
    pub behind_camera: bool,
}

/// Stroke half-width in pixels for a given image size.
pub fn stroke_half_width(height: usize, width: usize) -> f64 {
    (0.02 * height.min(width) as f64).max(1.0)
}

fn blend(img: &mut Image, r: usize, c: usize, color: [f64; 3], a: f64) {
    if a <= 0.0 {
        return;
    }
    for (p, col) in img.pixel_mut(r, c).iter_mut().zip(color) {
        *p = *p * (1.0 - a) + col * a;
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + s * dx, a.1 + s * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Draws an anti-aliased capsule between two points given in pixel units
/// (pixel centers at half-integers).
fn draw_capsule(img: &mut Image, a: (f64, f64), b: (f64, f64), half_width: f64, color: [f64; 3]) {
    let pad = half_width + 1.0;
    let x_lo = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
    let y_lo = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
    let x_hi = ((a.0.max(b.0) + pad).ceil().max(0.0) as usize).min(img.width);
    let y_hi = ((a.1.max(b.1) + pad).ceil().max(0.0) as usize).min(img.height);
    for r in y_lo..y_hi {
        for c in x_lo..x_hi {
            let d = segment_distance(c as f64 + 0.5, r as f64 + 0.5, a, b);
            let cover = (half_width + 0.5 - d).clamp(0.0, 1.0);
            blend(img, r, c, color, cover);
        }
    }
}

/// Draws a pose from normalized 2D joints (`None` = not visible). Bones
/// whose endpoints are both visible are drawn first, then joint discs.
pub fn draw_pose_2d(
    joints: &[Option<(f64, f64)>],
    bones: &[(usize, usize)],
    colors: &[[f64; 3]],
    height: usize,
    width: usize,
) -> Image {
    let mut img = Image::new(height, width, 3);
    let hw = stroke_half_width(height, width);
    let to_px = |(u, v): (f64, f64)| (u * width as f64, v * height as f64);
    for (&(a, b), &color) in bones.iter().zip(colors) {
        if let (Some(pa), Some(pb)) = (joints[a], joints[b]) {
            draw_capsule(&mut img, to_px(pa), to_px(pb), hw, color);
        }
    }
    for p in joints.iter().flatten() {
        let q = to_px(*p);
        draw_capsule(&mut img, q, q, hw * 1.2, JOINT_COLOR);
    }
    img
}

/// Projects joints into normalized crop-local coordinates.
pub fn project_joints(
    skeleton: &ArticulatedSkeleton,
    camera: &CameraPose,
    height: usize,
    width: usize,
    crop: Option<Crop>,
) -> Result<Vec<Option<(f64, f64)>>> {
    camera.validate()?;
    if height == 0 || width == 0 {
        return Err(Error::Domain("raster size must be positive".into()));
    }
    let crop = crop.unwrap_or(Crop::FULL);
    crop.validate()?;
    let aspect = width as f64 / height as f64;
    Ok(skeleton
        .positions()
        .iter()
        .map(|p| camera.project(p, aspect).map(|(u, v, _)| crop.to_local(u, v)))
        .collect())
}

pub fn rasterize_skeleton(
    skeleton: &ArticulatedSkeleton,
    camera: &CameraPose,
    height: usize,
    width: usize,
) -> Result<SkeletonRaster> {
    rasterize_skeleton_crop(skeleton, camera, height, width, None)
}

/// Same as [`rasterize_skeleton`] but drawn through a normalized crop of
/// the image plane, matching `render::generate_rays` with the same crop.
pub fn rasterize_skeleton_crop(
    skeleton: &ArticulatedSkeleton,
    camera: &CameraPose,
    height: usize,
    width: usize,
    crop: Option<Crop>,
) -> Result<SkeletonRaster> {
    let joints = project_joints(skeleton, camera, height, width, crop)?;
    let behind_camera = joints.iter().all(Option::is_none);
    if behind_camera {
        log::warn!("all skeleton joints are behind the camera");
    }
    Ok(SkeletonRaster {
        image: draw_pose_2d(&joints, &skeleton.bones, &skeleton.colors, height, width),
        behind_camera,
    })
}
