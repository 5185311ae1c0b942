//! Closed-form denoisers for testing guidance and distillation without a
//! trained network.

use crate::error::{Error, Result};
use crate::geometry::{LEFT_LIMB_COLOR, RIGHT_LIMB_COLOR};
use crate::image::Image;

use super::{Condition, Denoiser, NoiseSchedule};

/// Exact posterior-mean denoiser for an isotropic Gaussian data
/// distribution `N(mean, std² I)` in [-1, 1] space.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianDenoiser {
    pub schedule: NoiseSchedule,
    pub mean: Image,
    pub std: f64,
}

pub(crate) fn gaussian_epsilon(schedule: &NoiseSchedule, mean: &Image, std: f64, x_t: &Image, t: usize) -> Result<Image> {
    x_t.check_same_shape(mean)?;
    if t == 0 {
        return Err(Error::Domain("noise prediction is undefined at step 0".into()));
    }
    let (a, s) = schedule.checked_alpha_sigma(t)?;
    let v = std * std;
    let denom = a * a * v + s * s;
    let data = x_t
        .data
        .iter()
        .zip(&mean.data)
        .map(|(&x, &mu)| {
            let x0 = (a * v * x + s * s * mu) / denom;
            (x - a * x0) / s
        })
        .collect();
    Image::from_vec(x_t.height, x_t.width, x_t.channels, data)
}

impl AnalyticGaussianDenoiser {
    pub fn new(schedule: NoiseSchedule, mean: Image, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::Config(format!("prior std must be positive, got {std}")));
        }
        Ok(Self { schedule, mean, std })
    }

    /// `E[x0 | x_t]`, used as the test oracle.
    pub fn posterior_mean(&self, x_t: &Image, t: usize) -> Result<Image> {
        let eps = self.predict_epsilon(x_t, t, &Condition::default())?;
        let (a, s) = self.schedule.checked_alpha_sigma(t)?;
        let data = x_t.data.iter().zip(&eps.data).map(|(x, e)| (x - s * e) / a).collect();
        Image::from_vec(x_t.height, x_t.width, x_t.channels, data)
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn predict_epsilon(&self, x_t: &Image, t: usize, _cond: &Condition) -> Result<Image> {
        gaussian_epsilon(&self.schedule, &self.mean, self.std, x_t, t)
    }
}

/// Gaussian prior whose mean depends on which way the conditioning skeleton
/// faces: left limbs drawn on the image's right half mean a front view.
/// Without a readable pose the average of both means is used.
#[derive(Debug, Clone)]
pub struct KeyedGaussianPrior {
    pub schedule: NoiseSchedule,
    pub front: Image,
    pub back: Image,
    pub std: f64,
}

/// Horizontal centroid (in pixels) of pixels close to `color`.
fn color_centroid(img: &Image, color: [f64; 3]) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for r in 0..img.height {
        for c in 0..img.width {
            let p = img.pixel(r, c);
            let d2: f64 = p.iter().zip(color).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < 0.15 * 0.15 {
                sum += c as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// `Some(true)` when the skeleton raster shows the subject's front.
pub fn pose_faces_camera(pose: &Image) -> Option<bool> {
    if pose.channels != 3 {
        return None;
    }
    let l = color_centroid(pose, LEFT_LIMB_COLOR)?;
    let r = color_centroid(pose, RIGHT_LIMB_COLOR)?;
    if (l - r).abs() < 0.5 {
        return None;
    }
    Some(l > r)
}

impl KeyedGaussianPrior {
    pub fn new(schedule: NoiseSchedule, front: Image, back: Image, std: f64) -> Result<Self> {
        front.check_same_shape(&back)?;
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::Config(format!("prior std must be positive, got {std}")));
        }
        Ok(Self { schedule, front, back, std })
    }

    pub fn mean_for(&self, cond: &Condition) -> Image {
        match cond.pose.as_ref().and_then(pose_faces_camera) {
            Some(true) => self.front.clone(),
            Some(false) => self.back.clone(),
            None => {
                let data = self.front.data.iter().zip(&self.back.data).map(|(a, b)| 0.5 * (a + b)).collect();
                Image::from_vec(self.front.height, self.front.width, self.front.channels, data)
                    .expect("same shape")
            }
        }
    }
}

impl Denoiser for KeyedGaussianPrior {
    fn predict_epsilon(&self, x_t: &Image, t: usize, cond: &Condition) -> Result<Image> {
        gaussian_epsilon(&self.schedule, &self.mean_for(cond), self.std, x_t, t)
    }
}

/// Colors of a disk prior: one color for a plain silhouette, or a
/// front/back pair keyed to the conditioning skeleton.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiskColors {
    Plain([f64; 3]),
    Keyed { front: [f64; 3], back: [f64; 3] },
}

/// Gaussian prior whose mean is the silhouette of a centered sphere seen
/// from an orbit camera at fixed distance and field of view, built at the
/// resolution of each query. Colors are in [0, 1]; the background is
/// black.
#[derive(Debug, Clone)]
pub struct DiskPrior {
    pub schedule: NoiseSchedule,
    pub sphere_radius: f64,
    pub camera_distance: f64,
    pub fov_y: f64,
    pub colors: DiskColors,
    pub std: f64,
}

impl DiskPrior {
    /// Fraction of each pixel covered by the disk (4×4 supersampling).
    pub fn coverage(&self, height: usize, width: usize) -> Image {
        const SS: usize = 4;
        let tan_half = (0.5 * self.fov_y).tan();
        let aspect = width as f64 / height as f64;
        let sin_max = (self.sphere_radius / self.camera_distance).min(1.0);
        let cos_max2 = 1.0 - sin_max * sin_max;
        let mut img = Image::new(height, width, 1);
        for r in 0..height {
            for c in 0..width {
                let mut hits = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let u = (c as f64 + (sx as f64 + 0.5) / SS as f64) / width as f64;
                        let v = (r as f64 + (sy as f64 + 0.5) / SS as f64) / height as f64;
                        let x = (2.0 * u - 1.0) * tan_half * aspect;
                        let y = (1.0 - 2.0 * v) * tan_half;
                        // cos² of the angle to the optical axis.
                        if 1.0 / (1.0 + x * x + y * y) >= cos_max2 {
                            hits += 1;
                        }
                    }
                }
                img.data[r * width + c] = hits as f64 / (SS * SS) as f64;
            }
        }
        img
    }

    /// Prior mean in [-1, 1] for a conditioning signal and image size.
    pub fn mean_for(&self, cond: &Condition, height: usize, width: usize) -> Image {
        let color = match self.colors {
            DiskColors::Plain(c) => c,
            DiskColors::Keyed { front, back } => match cond.pose.as_ref().and_then(pose_faces_camera) {
                Some(true) => front,
                Some(false) => back,
                None => [0.5 * (front[0] + back[0]), 0.5 * (front[1] + back[1]), 0.5 * (front[2] + back[2])],
            },
        };
        let cov = self.coverage(height, width);
        let mut out = Image::new(height, width, 3);
        for p in 0..height * width {
            for k in 0..3 {
                out.data[p * 3 + k] = 2.0 * cov.data[p] * color[k] - 1.0;
            }
        }
        out
    }
}

impl Denoiser for DiskPrior {
    fn predict_epsilon(&self, x_t: &Image, t: usize, cond: &Condition) -> Result<Image> {
        let mean = self.mean_for(cond, x_t.height, x_t.width);
        gaussian_epsilon(&self.schedule, &mean, self.std, x_t, t)
    }
}

/// Oracle that returns exactly the injected noise, so every score
/// distillation gradient vanishes.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoNoise;

impl Denoiser for EchoNoise {
    fn predict_epsilon(&self, _x_t: &Image, _t: usize, _cond: &Condition) -> Result<Image> {
        Err(Error::Contract("the echo oracle needs the injected noise".into()))
    }

    fn predict_epsilon_with_noise(&self, _x_t: &Image, _t: usize, _cond: &Condition, noise: &Image) -> Result<Image> {
        Ok(noise.clone())
    }
}

/// Fault-injection stub that always predicts NaN.
#[derive(Debug, Clone, Copy, Default)]
pub struct NanDenoiser;

impl Denoiser for NanDenoiser {
    fn predict_epsilon(&self, x_t: &Image, _t: usize, _cond: &Condition) -> Result<Image> {
        Ok(x_t.map(|_| f64::NAN))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{add_noise, ancestral_sample, gaussian_image, SamplerSettings};
    use crate::math::rng_from_seed;

    fn mean_image() -> Image {
        let mut m = Image::new(4, 5, 3);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = ((i * 7) % 11) as f64 / 11.0 * 1.6 - 0.8;
        }
        m
    }

    #[test]
    fn posterior_mean_matches_closed_form() {
        let sched = NoiseSchedule::cosine(1000).unwrap();
        let mu = mean_image();
        let s0 = 0.3;
        let d = AnalyticGaussianDenoiser::new(sched.clone(), mu.clone(), s0).unwrap();
        let mut rng = rng_from_seed(11);
        for t in [1, 10, 250, 500, 999, 1000] {
            let x0 = gaussian_image(4, 5, 3, &mut rng).map(|v| v * s0);
            let e = gaussian_image(4, 5, 3, &mut rng);
            let xt = add_noise(&sched, &x0, t, &e).unwrap();
            let got = d.posterior_mean(&xt, t).unwrap();
            let (a, s) = (sched.alpha(t), sched.sigma(t));
            // Linear-Gaussian conditioning: Cov(x0, xt) / Var(xt).
            let gain = a * s0 * s0 / (a * a * s0 * s0 + s * s);
            for i in 0..got.data.len() {
                let want = mu.data[i] + gain * (xt.data[i] - a * mu.data[i]);
                assert!((got.data[i] - want).abs() < 1e-9, "t={t}");
            }
        }
    }

    #[test]
    fn one_step_sampler_returns_posterior_mean() {
        let sched = NoiseSchedule::cosine(1000).unwrap();
        let d = AnalyticGaussianDenoiser::new(sched.clone(), mean_image(), 0.2).unwrap();
        let settings = SamplerSettings { steps: 1, guidance_weight: 1.0, clip_x0: false };
        let out = ancestral_sample(&d, &sched, &Condition::default(), (4, 5, 3), settings, &mut rng_from_seed(5)).unwrap();
        let xt = gaussian_image(4, 5, 3, &mut rng_from_seed(5));
        let want = d.posterior_mean(&xt, 1000).unwrap();
        for (a, b) in out.data.iter().zip(&want.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn many_step_sampler_lands_near_the_mean() {
        let sched = NoiseSchedule::cosine(1000).unwrap();
        let mu = mean_image();
        let d = AnalyticGaussianDenoiser::new(sched.clone(), mu.clone(), 0.05).unwrap();
        let settings = SamplerSettings { steps: 50, guidance_weight: 1.0, clip_x0: true };
        let out = ancestral_sample(&d, &sched, &Condition::default(), (4, 5, 3), settings, &mut rng_from_seed(9)).unwrap();
        let rmse = (out.data.iter().zip(&mu.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / mu.len() as f64).sqrt();
        assert!(rmse < 0.15, "rmse {rmse}");
    }

    #[test]
    fn echo_oracle_returns_noise_and_nan_stub_is_nan() {
        let x = Image::filled(2, 2, 3, 0.0);
        let n = Image::filled(2, 2, 3, 0.25);
        let c = Condition::default();
        assert_eq!(EchoNoise.predict_epsilon_with_noise(&x, 3, &c, &n).unwrap(), n);
        assert!(EchoNoise.predict_epsilon(&x, 3, &c).is_err());
        assert!(!NanDenoiser.predict_epsilon(&x, 3, &c).unwrap().is_finite());
    }
}
