//! Multi-resolution / zoom-in schedule for distillation renders.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_joints, ArticulatedSkeleton};
use crate::image::Image;
use crate::render::{CameraPose, Crop};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZoomMode {
    FullBody,
    Head,
    Hands,
    RandomPart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BodyPart {
    Face,
    LeftHand,
    RightHand,
}

impl BodyPart {
    pub fn joints(self) -> &'static [&'static str] {
        match self {
            BodyPart::Face => &["head", "neck"],
            BodyPart::LeftHand => &["l_wrist"],
            BodyPart::RightHand => &["r_wrist"],
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            BodyPart::Face => "face",
            BodyPart::LeftHand | BodyPart::RightHand => "hand",
        }
    }
}

/// Part-aware prompt used for zoomed views, e.g. `"face of sks person"`.
pub fn part_prompt(part: Option<BodyPart>, prompt: &str) -> String {
    match part {
        None => prompt.to_string(),
        Some(p) => format!("{} of {}", p.phrase(), prompt),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub start_step: usize,
    /// Render size `[height, width]`.
    pub render: [usize; 2],
    /// Size the render is upsampled to before guidance.
    pub upsample: [usize; 2],
    pub zoom: ZoomMode,
    pub zoom_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolutionSchedule {
    pub stages: Vec<Stage>,
}

impl ResolutionSchedule {
    pub fn new(stages: Vec<Stage>) -> Result<Self> {
        let s = Self { stages };
        s.validate()?;
        Ok(s)
    }

    /// Single stage at a fixed resolution, no zoom.
    pub fn constant(height: usize, width: usize) -> Self {
        Self {
            stages: vec![Stage {
                start_step: 0,
                render: [height, width],
                upsample: [height, width],
                zoom: ZoomMode::FullBody,
                zoom_probability: 0.0,
            }],
        }
    }

    /// Three stages starting at 0, 40% and 75% of the run: 64² → 96² → 128²
    /// renders upsampled to 64², 128², 256², with zoom probability
    /// 0 / 0.3 / 0.5.
    pub fn three_stage(total_steps: usize) -> Self {
        let at = |f: f64| (f * total_steps as f64).round() as usize;
        let mut starts = [0, at(0.4), at(0.75)];
        // Keep starts strictly increasing for very short runs.
        starts[1] = starts[1].max(1);
        starts[2] = starts[2].max(starts[1] + 1);
        let stage = |i: usize, r: usize, u: usize, zoom, p| Stage {
            start_step: starts[i],
            render: [r, r],
            upsample: [u, u],
            zoom,
            zoom_probability: p,
        };
        Self {
            stages: vec![
                stage(0, 64, 64, ZoomMode::FullBody, 0.0),
                stage(1, 96, 128, ZoomMode::RandomPart, 0.3),
                stage(2, 128, 256, ZoomMode::RandomPart, 0.5),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.stages.first().ok_or_else(|| Error::Config("schedule has no stages".into()))?;
        if first.start_step != 0 {
            return Err(Error::Config("the first schedule stage must start at step 0".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.render.iter().any(|&v| v == 0) {
                return Err(Error::Config(format!("stage {i}: render size must be positive")));
            }
            if s.upsample[0] < s.render[0] || s.upsample[1] < s.render[1] {
                return Err(Error::Config(format!("stage {i}: upsample target smaller than the render")));
            }
            if !(0.0..=1.0).contains(&s.zoom_probability) {
                return Err(Error::Config(format!("stage {i}: zoom probability outside [0, 1]")));
            }
        }
        for (i, w) in self.stages.windows(2).enumerate() {
            if w[1].start_step <= w[0].start_step {
                return Err(Error::Config(format!("stage {}: start steps must increase", i + 1)));
            }
            if w[1].render[0] < w[0].render[0] || w[1].render[1] < w[0].render[1] {
                return Err(Error::Config(format!("stage {}: render resolution decreases", i + 1)));
            }
        }
        Ok(())
    }

    pub fn stage_at(&self, step: usize) -> Result<&Stage> {
        if self.stages.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        let idx = self.stages.partition_point(|s| s.start_step <= step);
        Ok(&self.stages[idx.saturating_sub(1)])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoomRegion {
    pub joints: Vec<String>,
    /// Margin added on every side, in normalized image units.
    pub padding: f64,
}

impl ZoomRegion {
    pub fn for_part(part: BodyPart) -> Self {
        let padding = match part {
            BodyPart::Face => 0.06,
            _ => 0.08,
        };
        Self { joints: part.joints().iter().map(|s| s.to_string()).collect(), padding }
    }
}

pub const MIN_CROP_SIDE: f64 = 1.0 / 16.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoomCrop {
    pub crop: Crop,
    /// Set when the target joints were all behind the camera.
    pub fallback: bool,
}

/// Square (aspect-preserving) crop around the projections of the region's
/// joints, inflated by the padding, at least [`MIN_CROP_SIDE`] wide and
/// shifted to stay inside the image.
pub fn zoom_crop(
    skeleton: &ArticulatedSkeleton,
    camera: &CameraPose,
    height: usize,
    width: usize,
    region: &ZoomRegion,
) -> Result<ZoomCrop> {
    if !(region.padding >= 0.0) {
        return Err(Error::Domain("zoom padding must be non-negative".into()));
    }
    let projected = project_joints(skeleton, camera, height, width, None)?;
    let mut pts = Vec::new();
    for name in &region.joints {
        let i = skeleton
            .joint_index(name)
            .ok_or_else(|| Error::Domain(format!("skeleton has no joint {name:?}")))?;
        if let Some((u, v)) = projected[i] {
            pts.push((u.clamp(0.0, 1.0), v.clamp(0.0, 1.0)));
        }
    }
    if pts.is_empty() {
        log::warn!("zoom target joints are behind the camera; using the full frame");
        return Ok(ZoomCrop { crop: Crop::FULL, fallback: true });
    }
    let (mut x0, mut y0, mut x1, mut y1) = (1.0f64, 1.0f64, 0.0f64, 0.0f64);
    for (u, v) in pts {
        x0 = x0.min(u);
        x1 = x1.max(u);
        y0 = y0.min(v);
        y1 = y1.max(v);
    }
    let side = ((x1 - x0).max(y1 - y0) + 2.0 * region.padding).max(MIN_CROP_SIDE);
    if side >= 1.0 {
        return Ok(ZoomCrop { crop: Crop::FULL, fallback: false });
    }
    let place = |c: f64| (c - 0.5 * side).clamp(0.0, 1.0 - side);
    let (cx, cy) = (place(0.5 * (x0 + x1)), place(0.5 * (y0 + y1)));
    Ok(ZoomCrop { crop: Crop { x0: cx, y0: cy, x1: (cx + side).min(1.0), y1: (cy + side).min(1.0) }, fallback: false })
}

/// Picks the crop for one step: full frame unless the stage zooms and the
/// coin flip with the stage's probability succeeds.
pub fn choose_zoom(
    stage: &Stage,
    skeleton: &ArticulatedSkeleton,
    camera: &CameraPose,
    rng: &mut impl Rng,
) -> Result<(Option<BodyPart>, ZoomCrop)> {
    let full = ZoomCrop { crop: Crop::FULL, fallback: false };
    if stage.zoom == ZoomMode::FullBody || stage.zoom_probability <= 0.0 {
        return Ok((None, full));
    }
    if rng.random::<f64>() >= stage.zoom_probability {
        return Ok((None, full));
    }
    let part = match stage.zoom {
        ZoomMode::Head => BodyPart::Face,
        ZoomMode::Hands => {
            if rng.random::<bool>() {
                BodyPart::LeftHand
            } else {
                BodyPart::RightHand
            }
        }
        _ => [BodyPart::Face, BodyPart::LeftHand, BodyPart::RightHand][rng.random_range(0..3)],
    };
    let [h, w] = stage.render;
    let zc = zoom_crop(skeleton, camera, h, w, &ZoomRegion::for_part(part))?;
    Ok(if zc.fallback { (None, zc) } else { (Some(part), zc) })
}

fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|j| {
            let x = if dst == 1 { 0.0 } else { (j * (src - 1)) as f64 / (dst - 1) as f64 };
            let i0 = (x.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

fn check_upsample(img: &Image, height: usize, width: usize) -> Result<()> {
    if height < img.height || width < img.width {
        return Err(Error::Domain(format!(
            "cannot upsample {}x{} to smaller {height}x{width}",
            img.height, img.width
        )));
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::Domain("cannot upsample an empty image".into()));
    }
    Ok(())
}

/// Bilinear upsampling with corner-aligned grids (exact on affine signals).
pub fn upsample(img: &Image, height: usize, width: usize) -> Result<Image> {
    check_upsample(img, height, width)?;
    if height == img.height && width == img.width {
        return Ok(img.clone());
    }
    let (wy, wx) = (axis_weights(img.height, height), axis_weights(img.width, width));
    let mut out = Image::new(height, width, img.channels);
    for (r, &(y0, y1, fy)) in wy.iter().enumerate() {
        for (c, &(x0, x1, fx)) in wx.iter().enumerate() {
            for k in 0..img.channels {
                let p = |y: usize, x: usize| img.data[img.index(y, x) + k];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                let i = out.index(r, c) + k;
                out.data[i] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Transpose of [`upsample`]: maps a gradient on the upsampled image back
/// to the source resolution.
pub fn upsample_adjoint(grad: &Image, height: usize, width: usize) -> Result<Image> {
    let probe = Image::new(height, width, grad.channels);
    check_upsample(&probe, grad.height, grad.width)?;
    if height == grad.height && width == grad.width {
        return Ok(grad.clone());
    }
    let (wy, wx) = (axis_weights(height, grad.height), axis_weights(width, grad.width));
    let mut out = probe;
    for (r, &(y0, y1, fy)) in wy.iter().enumerate() {
        for (c, &(x0, x1, fx)) in wx.iter().enumerate() {
            for k in 0..grad.channels {
                let g = grad.data[grad.index(r, c) + k];
                let mut add = |y: usize, x: usize, wgt: f64| {
                    let i = out.index(y, x) + k;
                    out.data[i] += g * wgt;
                };
                add(y0, x0, (1.0 - fy) * (1.0 - fx));
                add(y0, x1, (1.0 - fy) * fx);
                add(y1, x0, fy * (1.0 - fx));
                add(y1, x1, fy * fx);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng_from_seed;
    use rand::Rng;

    #[test]
    fn stage_lookup() {
        let s = ResolutionSchedule::three_stage(1000);
        s.validate().unwrap();
        assert_eq!(s.stage_at(0).unwrap().render, [64, 64]);
        assert_eq!(s.stage_at(399).unwrap().render, [64, 64]);
        assert_eq!(s.stage_at(400).unwrap().render, [96, 96]);
        assert_eq!(s.stage_at(10_000).unwrap().render, [128, 128]);
        let mut prev = 0;
        for step in 0..1200 {
            let r = s.stage_at(step).unwrap().render[0];
            assert!(r >= prev);
            prev = r;
        }
        assert!(ResolutionSchedule { stages: vec![] }.stage_at(0).is_err());
    }

    #[test]
    fn invalid_schedules_rejected() {
        let mut s = ResolutionSchedule::three_stage(100);
        s.stages[2].render = [32, 32];
        assert!(s.validate().is_err());
        let mut s = ResolutionSchedule::three_stage(100);
        s.stages[1].start_step = 0;
        assert!(s.validate().is_err());
        let mut s = ResolutionSchedule::three_stage(100);
        s.stages[0].upsample = [8, 8];
        assert!(s.validate().is_err());
        ResolutionSchedule::three_stage(2).validate().unwrap();
    }

    #[test]
    fn upsample_identity_constant_and_ramp() {
        let mut rng = rng_from_seed(1);
        let mut img = Image::new(5, 7, 3);
        img.data.iter_mut().for_each(|v| *v = rng.random());
        assert_eq!(upsample(&img, 5, 7).unwrap(), img);
        let c = Image::filled(4, 4, 3, 0.37);
        assert!(upsample(&c, 9, 13).unwrap().data.iter().all(|v| (v - 0.37).abs() < 1e-15));
        let mut ramp = Image::new(6, 6, 1);
        for r in 0..6 {
            for col in 0..6 {
                ramp.data[r * 6 + col] = 0.1 + 0.05 * r as f64 + 0.08 * col as f64;
            }
        }
        let up = upsample(&ramp, 11, 11).unwrap();
        for r in 0..11 {
            for col in 0..11 {
                let want = 0.1 + 0.05 * (r as f64 / 2.0) + 0.08 * (col as f64 / 2.0);
                assert!((up.data[r * 11 + col] - want).abs() < 1e-6);
            }
        }
        assert!(upsample(&ramp, 3, 6).is_err());
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let mut rng = rng_from_seed(2);
        let mut x = Image::new(4, 5, 2);
        x.data.iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
        let mut y = Image::new(9, 12, 2);
        y.data.iter_mut().for_each(|v| *v = rng.random::<f64>() - 0.5);
        let ax = upsample(&x, 9, 12).unwrap();
        let aty = upsample_adjoint(&y, 4, 5).unwrap();
        let lhs: f64 = ax.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&aty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn zoom_crops_contain_targets_and_respect_min_side() {
        let sk = ArticulatedSkeleton::canonical_a_pose();
        let cam = CameraPose::orbit([0.0, 0.0, 0.0], 3.0, 0.4, 0.1, 0.8).unwrap();
        let proj = project_joints(&sk, &cam, 32, 32, None).unwrap();
        for part in [BodyPart::Face, BodyPart::LeftHand, BodyPart::RightHand] {
            let zc = zoom_crop(&sk, &cam, 32, 32, &ZoomRegion::for_part(part)).unwrap();
            assert!(!zc.fallback);
            let c = zc.crop;
            c.validate().unwrap();
            assert!((c.width() - c.height()).abs() < 1e-12);
            for j in part.joints() {
                let (u, v) = proj[sk.joint_index(j).unwrap()].unwrap();
                assert!(c.contains(u, v));
            }
        }
        let tight = ZoomRegion { joints: vec!["head".into()], padding: 0.0 };
        let c = zoom_crop(&sk, &cam, 32, 32, &tight).unwrap().crop;
        assert!((c.width() - MIN_CROP_SIDE).abs() < 1e-12);
        let behind = CameraPose::new([0.0, 0.0, 5.0], [0.0, 0.0, 10.0], [0.0, 1.0, 0.0], 0.8, 0.01, 20.0).unwrap();
        let zc = zoom_crop(&sk, &behind, 32, 32, &ZoomRegion::for_part(BodyPart::Face)).unwrap();
        assert!(zc.fallback && zc.crop == Crop::FULL);
    }

    #[test]
    fn full_body_stage_never_zooms() {
        let s = ResolutionSchedule::constant(16, 16);
        let sk = ArticulatedSkeleton::canonical_a_pose();
        let cam = CameraPose::orbit([0.0; 3], 3.0, 0.0, 0.0, 0.8).unwrap();
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let (part, zc) = choose_zoom(s.stage_at(0).unwrap(), &sk, &cam, &mut rng).unwrap();
            assert!(part.is_none() && zc.crop == Crop::FULL);
        }
        assert_eq!(part_prompt(Some(BodyPart::Face), "sks person"), "face of sks person");
    }
}
