//! Diffusion guidance: noise schedule, denoiser interface, classifier-free
//! guidance and the ancestral sampler.

pub mod analytic;
pub mod schedule;
pub mod toy;
pub mod vocab;

pub use analytic::{pose_faces_camera, AnalyticGaussianDenoiser, DiskColors, DiskPrior, EchoNoise, KeyedGaussianPrior, NanDenoiser};
pub use schedule::NoiseSchedule;
pub use toy::{ConditioningBundle, ToyConditionalDenoiser, ToyDenoiserConfig};
pub use vocab::{Vocabulary, SUBJECT_TOKEN};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{normal, DetRng};

/// Raw conditioning signals. `None` selects the learned null embedding for
/// that modality.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Condition {
    pub tokens: Option<Vec<u32>>,
    pub pose: Option<Image>,
}

impl Condition {
    pub fn new(tokens: Option<Vec<u32>>, pose: Option<Image>) -> Self {
        Self { tokens, pose }
    }

    pub fn text(tokens: Vec<u32>) -> Self {
        Self { tokens: Some(tokens), pose: None }
    }

    /// Null branch used by classifier-free guidance: the text is dropped,
    /// the pose stays.
    pub fn without_text(&self) -> Self {
        Self { tokens: None, pose: self.pose.clone() }
    }
}

pub trait Denoiser: Sync {
    /// Predicted noise for `x_t` (values in [-1, 1]) at integer step `t`.
    fn predict_epsilon(&self, x_t: &Image, t: usize, cond: &Condition) -> Result<Image>;

    /// Entry point used by distillation, where the injected noise is known.
    /// Only test oracles look at `noise`.
    fn predict_epsilon_with_noise(&self, x_t: &Image, t: usize, cond: &Condition, noise: &Image) -> Result<Image> {
        let _ = noise;
        self.predict_epsilon(x_t, t, cond)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict_epsilon(&self, x_t: &Image, t: usize, cond: &Condition) -> Result<Image> {
        (**self).predict_epsilon(x_t, t, cond)
    }

    fn predict_epsilon_with_noise(&self, x_t: &Image, t: usize, cond: &Condition, noise: &Image) -> Result<Image> {
        (**self).predict_epsilon_with_noise(x_t, t, cond, noise)
    }
}

impl<D: Denoiser + ?Sized + Send> Denoiser for std::sync::Arc<D> {
    fn predict_epsilon(&self, x_t: &Image, t: usize, cond: &Condition) -> Result<Image> {
        (**self).predict_epsilon(x_t, t, cond)
    }

    fn predict_epsilon_with_noise(&self, x_t: &Image, t: usize, cond: &Condition, noise: &Image) -> Result<Image> {
        (**self).predict_epsilon_with_noise(x_t, t, cond, noise)
    }
}

/// Combines conditional and null predictions as
/// `ε_null + w (ε_cond − ε_null)`. At `w = 1` only the conditional branch is
/// evaluated and at `w = 0` only the null branch, so both ends are exact.
pub fn combine_guidance(eps_null: &Image, eps_cond: &Image, w: f64) -> Result<Image> {
    eps_null.check_same_shape(eps_cond)?;
    let data = eps_null
        .data
        .iter()
        .zip(&eps_cond.data)
        .map(|(n, c)| n + w * (c - n))
        .collect();
    Ok(Image::from_vec(eps_null.height, eps_null.width, eps_null.channels, data)?)
}

fn guided<F>(cond: &Condition, w: f64, mut eval: F) -> Result<Image>
where
    F: FnMut(&Condition) -> Result<Image>,
{
    if !w.is_finite() {
        return Err(Error::Config(format!("guidance weight {w} is not finite")));
    }
    if w == 1.0 {
        return eval(cond);
    }
    let null = eval(&cond.without_text())?;
    if w == 0.0 {
        return Ok(null);
    }
    let c = eval(cond)?;
    combine_guidance(&null, &c, w)
}

pub fn cfg_epsilon<D: Denoiser + ?Sized>(denoiser: &D, x_t: &Image, t: usize, cond: &Condition, w: f64) -> Result<Image> {
    guided(cond, w, |c| denoiser.predict_epsilon(x_t, t, c))
}

/// Guided prediction that forwards the injected noise to the denoiser.
pub fn cfg_epsilon_with_noise<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: &Image,
    t: usize,
    cond: &Condition,
    w: f64,
    noise: &Image,
) -> Result<Image> {
    guided(cond, w, |c| denoiser.predict_epsilon_with_noise(x_t, t, c, noise))
}

/// `x_t = α_t x0 + σ_t ε`.
pub fn add_noise(schedule: &NoiseSchedule, x0: &Image, t: usize, eps: &Image) -> Result<Image> {
    x0.check_same_shape(eps)?;
    let (a, s) = schedule.checked_alpha_sigma(t)?;
    let data = x0.data.iter().zip(&eps.data).map(|(x, e)| a * x + s * e).collect();
    Image::from_vec(x0.height, x0.width, x0.channels, data)
}

pub fn gaussian_image(height: usize, width: usize, channels: usize, rng: &mut DetRng) -> Image {
    let data = (0..height * width * channels).map(|_| normal(rng)).collect();
    Image::from_vec(height, width, channels, data).expect("shape matches data")
}

/// Evenly spaced descending steps from `t_max` to 0, `steps + 1` entries.
pub fn respaced_steps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::Config(format!("sampler steps must be in 1..={t_max}, got {steps}")));
    }
    let mut out: Vec<usize> = (0..=steps)
        .map(|k| ((t_max as f64) * (steps - k) as f64 / steps as f64).round() as usize)
        .collect();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSettings {
    pub steps: usize,
    pub guidance_weight: f64,
    /// Clamp the clean estimate to [-1, 1] before each posterior step.
    pub clip_x0: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { steps: 50, guidance_weight: 1.0, clip_x0: true }
    }
}

/// Respaced DDPM ancestral sampling from pure noise. Returns an image in
/// [-1, 1] space; the final transition to step 0 returns the clean estimate.
pub fn ancestral_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cond: &Condition,
    shape: (usize, usize, usize),
    settings: SamplerSettings,
    rng: &mut DetRng,
) -> Result<Image> {
    let (h, w, c) = shape;
    let steps = respaced_steps(schedule.t_max(), settings.steps)?;
    let mut x = gaussian_image(h, w, c, rng);
    for (k, pair) in steps.windows(2).enumerate() {
        let (t, s) = (pair[0], pair[1]);
        let eps = cfg_epsilon(denoiser, &x, t, cond, settings.guidance_weight)?;
        let (a_t, g_t) = (schedule.alpha(t), schedule.sigma(t));
        let mut x0: Vec<f64> = x.data.iter().zip(&eps.data).map(|(x, e)| (x - g_t * e) / a_t).collect();
        if settings.clip_x0 {
            x0.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        }
        if s == 0 {
            x.data = x0;
        } else {
            let ab_t = schedule.alpha_bar(t);
            let ab_s = schedule.alpha_bar(s);
            let beta = 1.0 - ab_t / ab_s;
            let c0 = ab_s.sqrt() * beta / (1.0 - ab_t);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
            let std = (beta * (1.0 - ab_s) / (1.0 - ab_t)).max(0.0).sqrt();
            for (xv, x0v) in x.data.iter_mut().zip(&x0) {
                *xv = c0 * x0v + ct * *xv + std * normal(rng);
            }
        }
        if !x.is_finite() {
            return Err(Error::Numeric(format!("sampler produced non-finite values at step {k} (t={t})")));
        }
    }
    Ok(x)
}
