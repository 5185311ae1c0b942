//! Differentiable volume rendering: pinhole rays, stratified marching,
//! transmittance compositing and the reverse pass to field parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DifferentiableField, FieldQuery, QueryAdjoint, VolumeField};
use crate::image::Image;
use crate::math::{mix_seed, rng_from_seed, Vec3};

/// Rows per work unit. Gradient buffers are merged per chunk in row order,
/// so results do not depend on the worker count.
const ROWS_PER_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub near: f64,
    pub far: f64,
}

/// Orthonormal camera frame.
#[derive(Debug, Clone, Copy)]
pub struct CameraFrame {
    pub origin: Vec3,
    pub forward: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub tan_half_fov: f64,
}

impl CameraPose {
    pub fn new(position: [f64; 3], look_at: [f64; 3], up: [f64; 3], fov_y: f64, near: f64, far: f64) -> Result<Self> {
        let cam = Self {
            position,
            look_at,
            up,
            fov_y,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera on a sphere around `target`: azimuth from +z toward +x, elevation toward +y.
    pub fn orbit(target: [f64; 3], radius: f64, azimuth: f64, elevation: f64, fov_y: f64) -> Result<Self> {
        let (se, ce) = elevation.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        let position = [
            target[0] + radius * ce * sa,
            target[1] + radius * se,
            target[2] + radius * ce * ca,
        ];
        Self::new(position, target, [0.0, 1.0, 0.0], fov_y, 0.01, radius * 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::Domain(format!(
                "camera needs 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::Domain(format!("field of view {} out of (0, pi)", self.fov_y)));
        }
        let f = Vec3::from(self.look_at) - Vec3::from(self.position);
        let u = Vec3::from(self.up);
        if f.norm() < 1e-12 || u.norm() < 1e-12 || f.normalize().cross(&u.normalize()).norm() < 1e-9 {
            return Err(Error::Domain("camera up vector is parallel to the view direction".into()));
        }
        Ok(())
    }

    pub fn frame(&self) -> CameraFrame {
        let origin = Vec3::from(self.position);
        let forward = (Vec3::from(self.look_at) - origin).normalize();
        let right = forward.cross(&Vec3::from(self.up)).normalize();
        let up = right.cross(&forward);
        CameraFrame {
            origin,
            forward,
            right,
            up,
            tan_half_fov: (0.5 * self.fov_y).tan(),
        }
    }

    /// Projects a world point to normalized image coordinates `(u, v)` with
    /// `u` left→right and `v` top→bottom, plus its depth along the axis.
    /// Returns `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Vec3, aspect: f64) -> Option<(f64, f64, f64)> {
        let fr = self.frame();
        let d = p - fr.origin;
        let z = d.dot(&fr.forward);
        if z <= 1e-12 {
            return None;
        }
        let x = d.dot(&fr.right) / (z * fr.tan_half_fov * aspect);
        let y = d.dot(&fr.up) / (z * fr.tan_half_fov);
        Some((0.5 * (x + 1.0), 0.5 * (1.0 - y), z))
    }
}

/// Normalized sub-rectangle of the image plane (`x` left→right, `y` top→bottom).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Crop {
    pub const FULL: Crop = Crop {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let inside = [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v));
        if !inside {
            return Err(Error::Domain(format!("crop {self:?} outside [0,1]^2")));
        }
        if self.x1 - self.x0 <= 0.0 || self.y1 - self.y0 <= 0.0 {
            return Err(Error::Domain(format!("degenerate crop {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Maps full-image normalized coordinates into this crop's coordinates.
    pub fn to_local(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.x0) / self.width(), (v - self.y0) / self.height())
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x0 && u <= self.x1 && v >= self.y0 && v <= self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}

/// Pinhole rays through pixel centers, row-major.
///
/// A crop maps its normalized rectangle onto the full `height × width`
/// output, i.e. it zooms in; the field of view stays that of the full image.
pub fn generate_rays(camera: &CameraPose, height: usize, width: usize, crop: Option<Crop>) -> Result<Vec<Ray>> {
    if height == 0 || width == 0 {
        return Err(Error::Domain("resolution must be at least 1x1".into()));
    }
    camera.validate()?;
    let crop = crop.unwrap_or(Crop::FULL);
    crop.validate()?;
    let fr = camera.frame();
    let aspect = width as f64 / height as f64;
    let mut rays = Vec::with_capacity(height * width);
    for i in 0..height {
        let v = crop.y0 + (i as f64 + 0.5) / height as f64 * crop.height();
        let ndc_y = 1.0 - 2.0 * v;
        for j in 0..width {
            let u = crop.x0 + (j as f64 + 0.5) / width as f64 * crop.width();
            let ndc_x = 2.0 * u - 1.0;
            let dir = (fr.forward
                + fr.right * (ndc_x * fr.tan_half_fov * aspect)
                + fr.up * (ndc_y * fr.tan_half_fov))
                .normalize();
            rays.push(Ray {
                origin: fr.origin,
                dir,
                t_near: camera.near,
                t_far: camera.far,
            });
        }
    }
    Ok(rays)
}

/// Composited result of one ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayResult {
    pub color: [f64; 3],
    pub alpha: f64,
    /// Expected termination distance normalized by alpha; infinite when alpha = 0.
    pub depth: f64,
    pub transmittance: f64,
}

/// One recorded sample along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub delta: f64,
    pub density: f64,
    pub color: [f64; 3],
}

impl Sample {
    pub fn alpha(&self) -> f64 {
        1.0 - (-self.density * self.delta).exp()
    }
}

/// Stratified jittered samples, clipped to the field's bounding box.
pub fn march<F: VolumeField + ?Sized>(
    field: &F,
    ray: &Ray,
    n_samples: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    if n_samples < 2 {
        return Err(Error::Domain(format!("need at least 2 samples per ray, got {n_samples}")));
    }
    let Some((b0, b1)) = field.bounds().intersect(&ray.origin, &ray.dir) else {
        return Ok(Vec::new());
    };
    let t0 = b0.max(ray.t_near).max(0.0);
    let t1 = b1.min(ray.t_far);
    if t1 <= t0 {
        return Ok(Vec::new());
    }
    let step = (t1 - t0) / n_samples as f64;
    let ts: Vec<f64> = (0..n_samples)
        .map(|i| t0 + (i as f64 + rng.random::<f64>()) * step)
        .collect();
    let mut out = Vec::with_capacity(n_samples);
    for (i, &t) in ts.iter().enumerate() {
        let delta = if i + 1 < n_samples { ts[i + 1] - t } else { t1 - t };
        let p = ray.at(t);
        let (density, color) = field.sample(&p, &ray.dir)?;
        if !density.is_finite() || color.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite field output at t={t} on ray from {:?} along {:?}",
                ray.origin, ray.dir
            )));
        }
        out.push(Sample {
            t,
            delta,
            density,
            color,
        });
    }
    Ok(out)
}

pub fn composite(samples: &[Sample], background: [f64; 3]) -> RayResult {
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut alpha = 0.0;
    let mut depth = 0.0;
    for s in samples {
        let w = trans * s.alpha();
        for k in 0..3 {
            color[k] += w * s.color[k];
        }
        alpha += w;
        depth += w * s.t;
        trans *= (-s.density * s.delta).exp();
    }
    for k in 0..3 {
        color[k] += trans * background[k];
    }
    RayResult {
        color,
        alpha,
        depth: if alpha > 0.0 { depth / alpha } else { f64::INFINITY },
        transmittance: trans,
    }
}

pub fn march_and_composite<F: VolumeField + ?Sized>(
    field: &F,
    ray: &Ray,
    n_samples: usize,
    background: [f64; 3],
    rng: &mut impl Rng,
) -> Result<(RayResult, Vec<Sample>)> {
    let samples = march(field, ray, n_samples, rng)?;
    Ok((composite(&samples, background), samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub height: usize,
    pub width: usize,
    pub samples_per_ray: usize,
    pub background: [f64; 3],
}

/// Everything the reverse pass needs from a forward render.
#[derive(Debug, Clone)]
pub struct RenderTape {
    field_version: u64,
    pub height: usize,
    pub width: usize,
    pub background: [f64; 3],
    pub rays: Vec<Ray>,
    /// `offsets[p]..offsets[p+1]` indexes the samples of pixel `p`.
    pub offsets: Vec<usize>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    pub alpha: Image,
    pub depth: Image,
    pub tape: RenderTape,
}

#[cfg(feature = "parallel")]
fn map_chunks<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_chunks<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..n).map(f).collect()
}

pub fn render_image<F: VolumeField + ?Sized>(
    field: &F,
    camera: &CameraPose,
    settings: &RenderSettings,
    crop: Option<Crop>,
    rng: &mut impl Rng,
) -> Result<RenderOutput> {
    render_with_version(field, 0, camera, settings, crop, rng)
}

/// Like [`render_image`] but stamps the tape with the field's parameter version.
pub fn render_differentiable<F: DifferentiableField + ?Sized>(
    field: &F,
    camera: &CameraPose,
    settings: &RenderSettings,
    crop: Option<Crop>,
    rng: &mut impl Rng,
) -> Result<RenderOutput> {
    render_with_version(field, field.version(), camera, settings, crop, rng)
}

fn render_with_version<F: VolumeField + ?Sized>(
    field: &F,
    version: u64,
    camera: &CameraPose,
    settings: &RenderSettings,
    crop: Option<Crop>,
    rng: &mut impl Rng,
) -> Result<RenderOutput> {
    let (h, w) = (settings.height, settings.width);
    let rays = generate_rays(camera, h, w, crop)?;
    let base: u64 = rng.random();
    let n_chunks = h.div_ceil(ROWS_PER_CHUNK);
    let chunks = map_chunks(n_chunks, |c| -> Result<Vec<(RayResult, Vec<Sample>)>> {
        let mut out = Vec::new();
        for row in c * ROWS_PER_CHUNK..((c + 1) * ROWS_PER_CHUNK).min(h) {
            let mut row_rng = rng_from_seed(mix_seed(base, row as u64));
            for col in 0..w {
                let ray = &rays[row * w + col];
                out.push(march_and_composite(
                    field,
                    ray,
                    settings.samples_per_ray,
                    settings.background,
                    &mut row_rng,
                )?);
            }
        }
        Ok(out)
    });
    let mut color = Image::new(h, w, 3);
    let mut alpha = Image::new(h, w, 1);
    let mut depth = Image::new(h, w, 1);
    let mut offsets = Vec::with_capacity(h * w + 1);
    let mut samples = Vec::new();
    offsets.push(0);
    let mut p = 0;
    for chunk in chunks {
        for (res, s) in chunk? {
            color.data[3 * p..3 * p + 3].copy_from_slice(&res.color);
            alpha.data[p] = res.alpha;
            depth.data[p] = res.depth;
            samples.extend(s);
            offsets.push(samples.len());
            p += 1;
        }
    }
    Ok(RenderOutput {
        color,
        alpha,
        depth,
        tape: RenderTape {
            field_version: version,
            height: h,
            width: w,
            background: settings.background,
            rays,
            offsets,
            samples,
        },
    })
}

/// Per-sample adjoints of one ray given pixel adjoints on color and alpha.
fn ray_adjoints(samples: &[Sample], background: [f64; 3], g: [f64; 3], g_alpha: f64, out: &mut Vec<QueryAdjoint>) {
    let n = samples.len();
    let mut trans = Vec::with_capacity(n + 1);
    trans.push(1.0);
    for s in samples {
        let last = *trans.last().unwrap();
        trans.push(last * (-s.density * s.delta).exp());
    }
    let t_final = trans[n];
    let g_bg = g[0] * background[0] + g[1] * background[1] + g[2] * background[2];
    let start = out.len();
    out.resize(start + n, QueryAdjoint::default());
    // Running sum of g · (w_i c_i) over samples behind the current one.
    let mut suffix = 0.0;
    for k in (0..n).rev() {
        let s = &samples[k];
        let w = trans[k] - trans[k + 1];
        let gc = g[0] * s.color[0] + g[1] * s.color[1] + g[2] * s.color[2];
        let d_density = s.delta * (trans[k + 1] * gc - suffix - t_final * g_bg + g_alpha * t_final);
        out[start + k] = QueryAdjoint {
            d_density,
            d_color: [g[0] * w, g[1] * w, g[2] * w],
        };
        suffix += w * gc;
    }
}

/// Reverse pass: pixel adjoints → field parameter gradients.
///
/// `d_color` is `H × W × 3`; `d_alpha`, when given, is `H × W × 1`.
pub fn backward<F: DifferentiableField + ?Sized>(
    field: &F,
    tape: &RenderTape,
    d_color: &Image,
    d_alpha: Option<&Image>,
) -> Result<Vec<f64>> {
    if field.version() != tape.field_version {
        return Err(Error::Contract(
            "render tape is stale: field parameters changed after the forward pass".into(),
        ));
    }
    let (h, w) = (tape.height, tape.width);
    if (d_color.height, d_color.width, d_color.channels) != (h, w, 3) {
        return Err(Error::Contract(format!(
            "color adjoint is {}x{}x{}, render is {h}x{w}x3",
            d_color.height, d_color.width, d_color.channels
        )));
    }
    if let Some(a) = d_alpha {
        if (a.height, a.width, a.channels) != (h, w, 1) {
            return Err(Error::Contract("alpha adjoint shape mismatch".into()));
        }
    }
    let n_params = field.param_count();
    let n_chunks = h.div_ceil(ROWS_PER_CHUNK);
    let partials = map_chunks(n_chunks, |c| -> Result<Option<Vec<f64>>> {
        let mut queries = Vec::new();
        let mut adjoints = Vec::new();
        for row in c * ROWS_PER_CHUNK..((c + 1) * ROWS_PER_CHUNK).min(h) {
            for col in 0..w {
                let p = row * w + col;
                let g = [d_color.data[3 * p], d_color.data[3 * p + 1], d_color.data[3 * p + 2]];
                let ga = d_alpha.map_or(0.0, |a| a.data[p]);
                if g == [0.0; 3] && ga == 0.0 {
                    continue;
                }
                let samples = &tape.samples[tape.offsets[p]..tape.offsets[p + 1]];
                let ray = &tape.rays[p];
                ray_adjoints(samples, tape.background, g, ga, &mut adjoints);
                queries.extend(samples.iter().map(|s| FieldQuery {
                    point: ray.at(s.t),
                    dir: ray.dir,
                }));
            }
        }
        if queries.is_empty() {
            return Ok(None);
        }
        let mut grad = vec![0.0; n_params];
        field.accumulate_param_gradients(&queries, &adjoints, &mut grad)?;
        Ok(Some(grad))
    });
    let mut grad = vec![0.0; n_params];
    for part in partials {
        if let Some(p) = part? {
            for (a, b) in grad.iter_mut().zip(&p) {
                *a += b;
            }
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::analytic::FnField;
    use crate::math::{rng_from_seed, Aabb};

    fn cam() -> CameraPose {
        CameraPose::new([0.0, 0.0, 3.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 0.8, 0.1, 10.0).unwrap()
    }

    #[test]
    fn center_pixel_follows_optical_axis() {
        let c = CameraPose::new([1.0, 2.0, 3.0], [0.0, 0.5, -1.0], [0.0, 1.0, 0.0], 1.0, 0.1, 10.0).unwrap();
        let rays = generate_rays(&c, 5, 5, None).unwrap();
        let axis = (Vec3::from(c.look_at) - Vec3::from(c.position)).normalize();
        assert!((rays[2 * 5 + 2].dir - axis).norm() < 1e-12);
    }

    #[test]
    fn full_crop_matches_no_crop() {
        let a = generate_rays(&cam(), 4, 6, None).unwrap();
        let b = generate_rays(&cam(), 4, 6, Some(Crop::FULL)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_crop_and_resolution_are_rejected() {
        let crop = Crop {
            x0: 0.3,
            y0: 0.2,
            x1: 0.3,
            y1: 0.6,
        };
        assert!(matches!(generate_rays(&cam(), 4, 4, Some(crop)), Err(Error::Domain(_))));
        assert!(generate_rays(&cam(), 0, 4, None).is_err());
    }

    #[test]
    fn corner_ray_angle_matches_pinhole_geometry() {
        // The pixel-center corner ray of a large image approaches the image corner.
        let c = CameraPose::new([0.0; 3], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0], std::f64::consts::FRAC_PI_2, 0.1, 10.0)
            .unwrap();
        let n = 2001;
        let rays = generate_rays(&c, n, n, None).unwrap();
        let fwd = Vec3::new(0.0, 0.0, -1.0);
        let angle = rays[0].dir.dot(&fwd).acos();
        // Pixel center sits half a pixel inside the corner.
        let s = 1.0 - 1.0 / n as f64;
        let expected = (2.0f64.sqrt() * s * (std::f64::consts::FRAC_PI_4).tan()).atan();
        assert!((angle - expected).abs() < 1e-6);
        // A vanishing crop at the top-left corner samples the corner itself.
        let corner = Crop {
            x0: 0.0,
            y0: 0.0,
            x1: 1e-9,
            y1: 1e-9,
        };
        let ray = generate_rays(&c, 1, 1, Some(corner)).unwrap()[0];
        let half_diag = (2.0f64.sqrt() * (std::f64::consts::FRAC_PI_4).tan()).atan();
        assert!((ray.dir.dot(&fwd).acos() - half_diag).abs() < 1e-6);
    }

    #[test]
    fn up_parallel_to_view_is_rejected() {
        assert!(CameraPose::new([0.0, 3.0, 0.0], [0.0; 3], [0.0, 1.0, 0.0], 0.8, 0.1, 10.0).is_err());
        assert!(CameraPose::new([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 0.8, 1.0, 0.5).is_err());
    }

    #[test]
    fn empty_volume_shows_background() {
        let f = FnField::new(Aabb::cube(1.0), |_: &Vec3, _: &Vec3| (0.0, [1.0, 0.0, 0.0]));
        let ray = generate_rays(&cam(), 1, 1, None).unwrap()[0];
        let (r, _) = march_and_composite(&f, &ray, 16, [0.2, 0.3, 0.4], &mut rng_from_seed(0)).unwrap();
        assert_eq!(r.color, [0.2, 0.3, 0.4]);
        assert_eq!(r.alpha, 0.0);
        assert_eq!(r.transmittance, 1.0);
        assert!(r.depth.is_infinite());
    }

    #[test]
    fn one_sample_is_rejected() {
        let f = FnField::new(Aabb::cube(1.0), |_: &Vec3, _: &Vec3| (1.0, [0.0; 3]));
        let ray = generate_rays(&cam(), 1, 1, None).unwrap()[0];
        assert!(march(&f, &ray, 1, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn non_finite_field_output_is_numeric_error() {
        let f = FnField::new(Aabb::cube(1.0), |_: &Vec3, _: &Vec3| (f64::NAN, [0.0; 3]));
        let ray = generate_rays(&cam(), 1, 1, None).unwrap()[0];
        assert!(matches!(march(&f, &ray, 4, &mut rng_from_seed(0)), Err(Error::Numeric(_))));
    }

    #[test]
    fn rays_missing_the_box_have_no_samples() {
        let f = FnField::new(Aabb::cube(0.1), |_: &Vec3, _: &Vec3| (5.0, [1.0; 3]));
        let c = CameraPose::new([5.0, 0.0, 3.0], [5.0, 0.0, 0.0], [0.0, 1.0, 0.0], 0.2, 0.1, 10.0).unwrap();
        let ray = generate_rays(&c, 1, 1, None).unwrap()[0];
        assert!(march(&f, &ray, 8, &mut rng_from_seed(0)).unwrap().is_empty());
    }

    #[test]
    fn projection_inverts_ray_generation() {
        let c = cam();
        let rays = generate_rays(&c, 6, 8, None).unwrap();
        let r = rays[2 * 8 + 5];
        let (u, v, _) = c.project(&r.at(2.5), 8.0 / 6.0).unwrap();
        assert!((u - 5.5 / 8.0).abs() < 1e-12 && (v - 2.5 / 6.0).abs() < 1e-12);
    }
}
