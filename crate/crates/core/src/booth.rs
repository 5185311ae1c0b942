//! Few-shot personalization: prior-set generation from the frozen base
//! model and finetuning with the reconstruction and condition
//! prior-preservation terms.
//!
//! Both terms use the noise-prediction form `E‖ε̂ − ε‖²` (mean over
//! elements). Against the clean-image form `‖x̂0 − x0‖²` this differs by the
//! per-step weight `(σ_t/α_t)²`, which is folded into the schedule weighting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{
    add_noise, ancestral_sample, gaussian_image, Condition, Denoiser, NoiseSchedule, SamplerSettings,
    ToyConditionalDenoiser,
};
use crate::image::Image;
use crate::math::{mix_seed, rng_from_seed, DetRng};
use crate::optim::{Adam, Precision};

/// Masked subject image with its pose raster and caption tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotExample {
    /// RGB in [0, 1], background already replaced by the constant.
    pub image: Image,
    pub pose: Image,
    pub tokens: Vec<u32>,
}

/// Sample drawn from the frozen base model.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorExample {
    pub image: Image,
    pub pose: Image,
    pub tokens: Vec<u32>,
    pub seed: u64,
}

/// Borrowed view shared by every denoising loss.
#[derive(Debug, Clone, Copy)]
pub struct LossItem<'a> {
    pub image: &'a Image,
    pub pose: Option<&'a Image>,
    pub tokens: Option<&'a [u32]>,
}

impl FewShotExample {
    pub fn new(image: Image, pose: Image, tokens: Vec<u32>) -> Result<Self> {
        if image.channels != 3 || !image.same_shape(&pose) {
            return Err(Error::Contract("few-shot image and pose must be same-size RGB".into()));
        }
        Ok(Self { image, pose, tokens })
    }

    pub fn item(&self) -> LossItem<'_> {
        LossItem { image: &self.image, pose: Some(&self.pose), tokens: Some(&self.tokens) }
    }
}

impl PriorExample {
    pub fn item(&self) -> LossItem<'_> {
        LossItem { image: &self.image, pose: Some(&self.pose), tokens: Some(&self.tokens) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoothConfig {
    pub lambda_cppl: f64,
    pub n_prior: usize,
    pub steps: usize,
    pub lr_denoiser: f64,
    pub lr_text: f64,
    /// Prior examples per step (the whole few-shot set is used every step).
    pub prior_batch: usize,
    pub sampler_steps: usize,
    pub class_prompt: String,
    /// Abort when the total loss exceeds this multiple of its first value.
    pub divergence_factor: f64,
}

impl Default for BoothConfig {
    fn default() -> Self {
        Self {
            lambda_cppl: 1.0,
            n_prior: 100,
            steps: 1500,
            lr_denoiser: 1e-3,
            lr_text: 5e-3,
            prior_batch: 6,
            sampler_steps: 25,
            class_prompt: "a photo of person".into(),
            divergence_factor: 1e3,
        }
    }
}

impl BoothConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cppl >= 0.0 && self.lambda_cppl.is_finite()) {
            return Err(Error::Config("lambda_cppl must be a non-negative number".into()));
        }
        if !(self.lr_denoiser >= 0.0 && self.lr_text >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.sampler_steps == 0 {
            return Err(Error::Config("sampler_steps must be positive".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence_factor must exceed 1".into()));
        }
        Ok(())
    }
}

/// Draws `n` prior examples from the frozen model. Example `i` uses its own
/// seed `mix_seed(seed, i)` for pose choice and sampling, recorded in the
/// result.
#[allow(clippy::too_many_arguments)]
pub fn generate_prior_set<D: Denoiser + ?Sized>(
    frozen: &D,
    schedule: &NoiseSchedule,
    class_tokens: &[u32],
    pose_pool: &[Image],
    n: usize,
    sampler: SamplerSettings,
    seed: u64,
) -> Result<Vec<PriorExample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if pose_pool.is_empty() {
        return Err(Error::Domain("pose pool is empty".into()));
    }
    (0..n)
        .map(|i| {
            let s = mix_seed(seed, i as u64);
            let mut rng = rng_from_seed(s);
            let pose = pose_pool[rng.random_range(0..pose_pool.len())].clone();
            let cond = Condition::new(Some(class_tokens.to_vec()), Some(pose.clone()));
            let shape = (pose.height, pose.width, 3);
            let x = ancestral_sample(frozen, schedule, &cond, shape, sampler, &mut rng)?;
            Ok(PriorExample { image: x.to_unit().map(|v| v.clamp(0.0, 1.0)), pose, tokens: class_tokens.to_vec(), seed: s })
        })
        .collect()
}

fn noised(schedule: &NoiseSchedule, item: &LossItem<'_>, rng: &mut DetRng) -> Result<(usize, Image, Image, Condition)> {
    let t = rng.random_range(1..=schedule.t_max());
    let x0 = item.image.to_signed();
    let eps = gaussian_image(x0.height, x0.width, x0.channels, rng);
    let x_t = add_noise(schedule, &x0, t, &eps)?;
    let cond = Condition::new(item.tokens.map(<[u32]>::to_vec), item.pose.cloned());
    Ok((t, x_t, eps, cond))
}

/// Mean noise-prediction error over a batch with fresh `(t, ε)` per item.
pub fn denoising_loss<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    items: &[LossItem<'_>],
    rng: &mut DetRng,
) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for item in items {
        let (t, x_t, eps, cond) = noised(schedule, item, rng)?;
        let e = denoiser.predict_epsilon_with_noise(&x_t, t, &cond, &eps)?;
        e.check_same_shape(&eps)?;
        total += e.data.iter().zip(&eps.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / e.len() as f64;
    }
    Ok(total / items.len() as f64)
}

/// Same draws as [`denoising_loss`]; adds `scale · ∂loss/∂θ` into `grad`.
pub fn denoising_loss_and_grad(
    denoiser: &ToyConditionalDenoiser,
    items: &[LossItem<'_>],
    rng: &mut DetRng,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if items.is_empty() {
        return Ok(0.0);
    }
    let n = items.len() as f64;
    let mut total = 0.0;
    for item in items {
        let (t, x_t, eps, cond) = noised(denoiser.schedule(), item, rng)?;
        total += denoiser.loss_and_grad(&x_t, t, &cond, &eps, scale / n, grad)?;
    }
    Ok(total / n)
}

pub fn rec_loss<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    batch: &[FewShotExample],
    rng: &mut DetRng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Domain("reconstruction batch is empty".into()));
    }
    let items: Vec<_> = batch.iter().map(FewShotExample::item).collect();
    denoising_loss(denoiser, schedule, &items, rng)
}

/// Zero for an empty prior set (plain finetuning).
pub fn cppl_loss<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    batch: &[PriorExample],
    rng: &mut DetRng,
) -> Result<f64> {
    let items: Vec<_> = batch.iter().map(PriorExample::item).collect();
    denoising_loss(denoiser, schedule, &items, rng)
}

/// Low-variance loss estimate: every item is noised `repeats` times with a
/// fixed seed.
pub fn evaluate_loss<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    items: &[LossItem<'_>],
    repeats: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for r in 0..repeats {
        let mut rng = rng_from_seed(mix_seed(seed, r as u64));
        total += denoising_loss(denoiser, schedule, items, &mut rng)?;
    }
    Ok(total / repeats.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub rec: f64,
    pub cppl: f64,
    pub total: f64,
}

/// Optimizer groups for personalization: token embeddings at the text rate,
/// the pose encoder frozen, everything else at the denoiser rate.
pub fn personalization_groups(d: &ToyConditionalDenoiser, cfg: &BoothConfig) -> Vec<(std::ops::Range<usize>, f64)> {
    let tok = d.token_table_range();
    let pose = d.pose_encoder_range();
    let n = d.param_count();
    let mut groups = vec![(tok.clone(), cfg.lr_text)];
    // Remaining contiguous spans outside the token table and pose encoder.
    let mut cuts = vec![(tok.start, tok.end), (pose.start, pose.end)];
    cuts.sort();
    let mut at = 0;
    for (s, e) in cuts {
        if s > at {
            groups.push((at..s, cfg.lr_denoiser));
        }
        at = at.max(e);
    }
    if at < n {
        groups.push((at..n, cfg.lr_denoiser));
    }
    groups.push((pose, 0.0));
    groups
}

/// Finetunes `denoiser` in place on `L_rec + λ_cppl · L_cppl`.
pub fn finetune(
    denoiser: &mut ToyConditionalDenoiser,
    fewshot: &[FewShotExample],
    prior: &[PriorExample],
    cfg: &BoothConfig,
    subject_token: u32,
    seed: u64,
    precision: Precision,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if fewshot.is_empty() {
        return Err(Error::Domain("few-shot set is empty".into()));
    }
    if let Some(i) = fewshot.iter().position(|e| !e.tokens.contains(&subject_token)) {
        return Err(Error::Domain(format!("few-shot caption {i} lacks the subject token")));
    }
    let mut opt = Adam::new(denoiser.param_count(), personalization_groups(denoiser, cfg));
    opt.precision = precision;
    let rec_items: Vec<_> = fewshot.iter().map(FewShotExample::item).collect();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut first_total = None;
    for step in 0..cfg.steps {
        let mut rng = rng_from_seed(mix_seed(seed, step as u64));
        let mut grad = vec![0.0; denoiser.param_count()];
        let rec = denoising_loss_and_grad(denoiser, &rec_items, &mut rng, 1.0, &mut grad)?;
        let mut cppl = 0.0;
        if !prior.is_empty() && cfg.prior_batch > 0 {
            let batch: Vec<_> = (0..cfg.prior_batch).map(|_| prior[rng.random_range(0..prior.len())].item()).collect();
            // With λ = 0 the term is still measured but contributes nothing.
            cppl = denoising_loss_and_grad(denoiser, &batch, &mut rng, cfg.lambda_cppl, &mut grad)?;
        }
        let total = rec + cfg.lambda_cppl * cppl;
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite finetuning loss at step {step}")));
        }
        let base = *first_total.get_or_insert(total);
        if total > cfg.divergence_factor * base {
            return Err(Error::Abort(format!(
                "finetuning diverged at step {step}: loss {total:.4e} vs initial {base:.4e}"
            )));
        }
        opt.step(denoiser.params_mut(), &grad);
        history.push(LossRecord { step, rec, cppl, total });
    }
    Ok(history)
}

/// Condition dropout rates for base-model training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub text_dropout: f64,
    pub pose_dropout: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch: 8, lr: 2e-3, text_dropout: 0.1, pose_dropout: 0.1 }
    }
}

/// Trains the base denoiser on class-level data, randomly replacing the
/// text and/or pose condition with the null embedding.
pub fn pretrain(
    denoiser: &mut ToyConditionalDenoiser,
    data: &[FewShotExample],
    cfg: &PretrainConfig,
    seed: u64,
    precision: Precision,
) -> Result<Vec<LossRecord>> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::Domain("pretraining needs data and a positive batch size".into()));
    }
    if !(0.0..=1.0).contains(&cfg.text_dropout) || !(0.0..=1.0).contains(&cfg.pose_dropout) {
        return Err(Error::Config("dropout rates must lie in [0, 1]".into()));
    }
    let n = denoiser.param_count();
    let mut opt = Adam::new(n, vec![(0..n, cfg.lr)]);
    opt.precision = precision;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = rng_from_seed(mix_seed(seed, step as u64));
        let items: Vec<LossItem<'_>> = (0..cfg.batch)
            .map(|_| {
                let ex = &data[rng.random_range(0..data.len())];
                let drop_text = rng.random::<f64>() < cfg.text_dropout;
                let drop_pose = rng.random::<f64>() < cfg.pose_dropout;
                LossItem {
                    image: &ex.image,
                    pose: (!drop_pose).then_some(&ex.pose),
                    tokens: (!drop_text).then_some(ex.tokens.as_slice()),
                }
            })
            .collect();
        let mut grad = vec![0.0; n];
        let loss = denoising_loss_and_grad(denoiser, &items, &mut rng, 1.0, &mut grad)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pretraining loss at step {step}")));
        }
        opt.step(denoiser.params_mut(), &grad);
        history.push(LossRecord { step, rec: loss, cppl: 0.0, total: loss });
    }
    Ok(history)
}

/// Median of each trailing window of `width` values.
pub fn windowed_medians(values: &[f64], width: usize) -> Vec<f64> {
    values
        .chunks(width.max(1))
        .map(|c| {
            let mut v = c.to_vec();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{AnalyticGaussianDenoiser, EchoNoise, ToyDenoiserConfig};

    fn tiny() -> ToyConditionalDenoiser {
        let cfg = ToyDenoiserConfig { vocab_size: 18, text_dim: 4, pose_channels: 2, hidden_channels: 4, time_dim: 4, t_max: 100 };
        ToyConditionalDenoiser::new(cfg, &mut rng_from_seed(4)).unwrap()
    }

    fn example(seed: u64) -> FewShotExample {
        let mut rng = rng_from_seed(seed);
        let img = gaussian_image(6, 6, 3, &mut rng).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        let pose = gaussian_image(6, 6, 3, &mut rng).map(|v| v.abs().min(1.0));
        FewShotExample::new(img, pose, vec![1, 2, 3, 5, 4]).unwrap()
    }

    #[test]
    fn oracle_denoiser_has_zero_loss() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let batch = vec![example(1), example(2)];
        assert_eq!(rec_loss(&EchoNoise, &s, &batch, &mut rng_from_seed(0)).unwrap(), 0.0);
        assert!(rec_loss(&EchoNoise, &s, &[], &mut rng_from_seed(0)).is_err());
        assert_eq!(cppl_loss(&EchoNoise, &s, &[], &mut rng_from_seed(0)).unwrap(), 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut d = tiny();
        let batch = vec![example(1), example(2)];
        let items: Vec<_> = batch.iter().map(FewShotExample::item).collect();
        let mut g = vec![0.0; d.param_count()];
        denoising_loss_and_grad(&d, &items, &mut rng_from_seed(9), 1.0, &mut g).unwrap();
        let sched = d.schedule().clone();
        let idx: Vec<usize> = (0..16).map(|k| (k * 7919) % d.param_count()).collect();
        for i in idx {
            let orig = d.params()[i];
            let h = 1e-6;
            d.params_mut()[i] = orig + h;
            let up = denoising_loss(&d, &sched, &items, &mut rng_from_seed(9)).unwrap();
            d.params_mut()[i] = orig - h;
            let dn = denoising_loss(&d, &sched, &items, &mut rng_from_seed(9)).unwrap();
            d.params_mut()[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            assert!(err < 1e-3 || (fd - g[i]).abs() < 1e-9, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn zero_steps_leave_parameters_untouched() {
        let mut d = tiny();
        let before = d.params().to_vec();
        let cfg = BoothConfig { steps: 0, ..Default::default() };
        let h = finetune(&mut d, &[example(1)], &[], &cfg, 5, 0, Precision::F64).unwrap();
        assert!(h.is_empty());
        assert_eq!(d.params(), &before[..]);
    }

    #[test]
    fn missing_subject_token_is_rejected() {
        let mut d = tiny();
        let mut ex = example(1);
        ex.tokens = vec![1, 2, 3, 4];
        assert!(finetune(&mut d, &[ex], &[], &BoothConfig::default(), 5, 0, Precision::F64).is_err());
    }

    #[test]
    fn pose_encoder_stays_frozen() {
        let mut d = tiny();
        let pose_before = d.params()[d.pose_encoder_range()].to_vec();
        let cfg = BoothConfig { steps: 5, ..Default::default() };
        finetune(&mut d, &[example(1), example(2)], &[], &cfg, 5, 0, Precision::F64).unwrap();
        assert_eq!(&d.params()[d.pose_encoder_range()], &pose_before[..]);
        let groups = personalization_groups(&d, &cfg);
        let covered: usize = groups.iter().map(|(r, _)| r.len()).sum();
        assert_eq!(covered, d.param_count());
    }

    #[test]
    fn prior_set_is_seeded_and_follows_the_base_distribution() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let mu = Image::filled(4, 4, 3, 0.2);
        let base = AnalyticGaussianDenoiser::new(s.clone(), mu, 0.01).unwrap();
        let pool = vec![Image::new(4, 4, 3)];
        let sampler = SamplerSettings { steps: 20, guidance_weight: 1.0, clip_x0: true };
        let a = generate_prior_set(&base, &s, &[1, 2], &pool, 64, sampler, 3).unwrap();
        let b = generate_prior_set(&base, &s, &[1, 2], &pool, 64, sampler, 3).unwrap();
        assert_eq!(a, b);
        // Unit-space mean of the signed mean 0.2 is 0.6.
        let m: f64 = a.iter().map(|e| e.image.mean()).sum::<f64>() / a.len() as f64;
        assert!((m - 0.6).abs() < 0.02, "{m}");
        assert!(generate_prior_set(&base, &s, &[1], &[], 2, sampler, 3).is_err());
        assert!(generate_prior_set(&base, &s, &[1], &[], 0, sampler, 3).unwrap().is_empty());
    }
}
