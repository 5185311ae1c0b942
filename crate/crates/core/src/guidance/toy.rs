//! Small conditional convolutional noise predictor used for booth
//! finetuning tests and the end-to-end pipeline at desk scale.
//!
//! Text tokens are averaged through an embedding table and a tanh linear
//! map; the pose raster goes through a frozen-able 3×3 conv + tanh encoder.
//! Each modality has a learned null embedding selected when the input is
//! absent. The trunk is three 3×3 convs with a residual middle block, plus
//! a `σ_t · x_t` skip on the output.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::DetRng;
use crate::nn::{Conv3x3, MlpCache, MlpShape};
use crate::optim::Precision;

use super::{Condition, Denoiser, NoiseSchedule};

pub const CHECKPOINT_KIND: &str = "toy-denoiser";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDenoiserConfig {
    pub vocab_size: usize,
    pub text_dim: usize,
    pub pose_channels: usize,
    pub hidden_channels: usize,
    pub time_dim: usize,
    pub t_max: usize,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self {
            vocab_size: 18,
            text_dim: 16,
            pose_channels: 4,
            hidden_channels: 24,
            time_dim: 8,
            t_max: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok_emb: Range<usize>,
    null_text: Range<usize>,
    gamma: Range<usize>,
    pose_conv: Range<usize>,
    null_pose: Range<usize>,
    cond_lin: Range<usize>,
    conv1: Range<usize>,
    conv2: Range<usize>,
    conv3: Range<usize>,
}

impl Layout {
    fn new(c: &ToyDenoiserConfig, nets: &Nets) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        Self {
            tok_emb: take(c.vocab_size * c.text_dim),
            null_text: take(c.text_dim),
            gamma: take(nets.gamma.param_count()),
            pose_conv: take(nets.pose.param_count()),
            null_pose: take(c.pose_channels),
            cond_lin: take(nets.cond.param_count()),
            conv1: take(nets.conv1.param_count()),
            conv2: take(nets.conv2.param_count()),
            conv3: take(nets.conv3.param_count()),
        }
    }

    fn total(&self) -> usize {
        self.conv3.end
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Nets {
    gamma: MlpShape,
    pose: Conv3x3,
    cond: MlpShape,
    conv1: Conv3x3,
    conv2: Conv3x3,
    conv3: Conv3x3,
}

impl Nets {
    fn new(c: &ToyDenoiserConfig) -> Self {
        Self {
            gamma: MlpShape::new(c.text_dim, &[], c.text_dim),
            pose: Conv3x3::new(3, c.pose_channels),
            cond: MlpShape::new(c.time_dim + c.text_dim, &[], c.hidden_channels),
            conv1: Conv3x3::new(3 + c.pose_channels, c.hidden_channels),
            conv2: Conv3x3::new(c.hidden_channels, c.hidden_channels),
            conv3: Conv3x3::new(c.hidden_channels, 3),
        }
    }
}

/// Encoded conditioning signals for one image.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    /// Text embedding after the projection (or the null text embedding).
    pub text: Vec<f64>,
    /// Per-pixel pose features, `height × width × pose_channels`.
    pub pose: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub text_is_null: bool,
    pub pose_is_null: bool,
    tokens: Vec<u32>,
    gamma_cache: MlpCache,
    pose_input: Option<Vec<f64>>,
}

struct Trace {
    x: Vec<f64>,
    cond_cache: MlpCache,
    in1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyConditionalDenoiser {
    config: ToyDenoiserConfig,
    nets: Nets,
    layout: Layout,
    schedule: NoiseSchedule,
    params: Vec<f64>,
}

fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

impl ToyConditionalDenoiser {
    pub fn new(config: ToyDenoiserConfig, rng: &mut DetRng) -> Result<Self> {
        let mut me = Self::zeroed(config)?;
        let (n, l) = (&me.nets, &me.layout);
        let p = &mut me.params;
        for v in &mut p[l.tok_emb.clone()] {
            *v = rng.random_range(-1.0..1.0);
        }
        for v in &mut p[l.null_text.clone()] {
            *v = rng.random_range(-0.1..0.1);
        }
        n.gamma.init(&mut p[l.gamma.clone()], rng);
        n.pose.init(&mut p[l.pose_conv.clone()], rng, 1.0);
        n.cond.init(&mut p[l.cond_lin.clone()], rng);
        n.conv1.init(&mut p[l.conv1.clone()], rng, 1.0);
        n.conv2.init(&mut p[l.conv2.clone()], rng, 1.0);
        n.conv3.init(&mut p[l.conv3.clone()], rng, 0.1);
        Ok(me)
    }

    pub fn zeroed(config: ToyDenoiserConfig) -> Result<Self> {
        if config.vocab_size == 0
            || config.text_dim == 0
            || config.pose_channels == 0
            || config.hidden_channels == 0
            || config.time_dim == 0
            || config.time_dim % 2 != 0
        {
            return Err(Error::Config(format!("invalid denoiser dimensions {config:?}")));
        }
        let schedule = NoiseSchedule::cosine(config.t_max)?;
        let nets = Nets::new(&config);
        let layout = Layout::new(&config, &nets);
        let params = vec![0.0; layout.total()];
        Ok(Self { config, nets, layout, schedule, params })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Token embedding table.
    pub fn token_table_range(&self) -> Range<usize> {
        self.layout.tok_emb.clone()
    }

    pub fn token_row_range(&self, id: u32) -> Range<usize> {
        let d = self.config.text_dim;
        let start = self.layout.tok_emb.start + id as usize * d;
        start..start + d
    }

    /// Pose encoder weights and the null pose embedding.
    pub fn pose_encoder_range(&self) -> Range<usize> {
        self.layout.pose_conv.start..self.layout.null_pose.end
    }

    pub fn time_embedding(&self, t: usize) -> Vec<f64> {
        let half = self.config.time_dim / 2;
        let u = t as f64 / self.config.t_max as f64;
        let mut out = Vec::with_capacity(self.config.time_dim);
        for k in 0..half {
            out.push((u * std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64).sin());
        }
        for k in 0..half {
            out.push((u * std::f64::consts::FRAC_PI_2 * (1u64 << k) as f64).cos());
        }
        out
    }

    /// Encodes raw conditions for an image of the given size. `None` picks
    /// the null embedding of that modality.
    pub fn encode_conditions(
        &self,
        tokens: Option<&[u32]>,
        pose: Option<&Image>,
        height: usize,
        width: usize,
    ) -> Result<ConditioningBundle> {
        let c = &self.config;
        let p = &self.params;
        let mut gamma_cache = MlpCache::default();
        let (text, text_is_null, tokens) = match tokens {
            None => (p[self.layout.null_text.clone()].to_vec(), true, Vec::new()),
            Some(ids) => {
                if ids.is_empty() {
                    return Err(Error::Domain("empty token sequence".into()));
                }
                let mut e = vec![0.0; c.text_dim];
                for &id in ids {
                    if id as usize >= c.vocab_size {
                        return Err(Error::Domain(format!("token id {id} outside vocabulary of {}", c.vocab_size)));
                    }
                    for (ev, &w) in e.iter_mut().zip(&p[self.token_row_range(id)]) {
                        *ev += w / ids.len() as f64;
                    }
                }
                let mut y = self.nets.gamma.forward(&p[self.layout.gamma.clone()], &e, &mut gamma_cache).to_vec();
                tanh_in_place(&mut y);
                (y, false, ids.to_vec())
            }
        };
        let (pose_feat, pose_is_null, pose_input) = match pose {
            None => {
                let null = &p[self.layout.null_pose.clone()];
                (null.repeat(height * width), true, None)
            }
            Some(img) => {
                if img.height != height || img.width != width || img.channels != 3 {
                    return Err(Error::Contract(format!(
                        "pose image {}x{}x{} does not match {height}x{width}x3",
                        img.height, img.width, img.channels
                    )));
                }
                let mut out = Vec::new();
                self.nets.pose.forward(&p[self.layout.pose_conv.clone()], &img.data, height, width, &mut out);
                tanh_in_place(&mut out);
                (out, false, Some(img.data.clone()))
            }
        };
        Ok(ConditioningBundle {
            text,
            pose: pose_feat,
            height,
            width,
            text_is_null,
            pose_is_null,
            tokens,
            gamma_cache,
            pose_input,
        })
    }

    fn forward(&self, x_t: &Image, t: usize, b: &ConditioningBundle) -> Result<(Image, Trace)> {
        if x_t.channels != 3 || x_t.height != b.height || x_t.width != b.width {
            return Err(Error::Contract("conditioning bundle does not match the image".into()));
        }
        let (_, sigma) = self.schedule.checked_alpha_sigma(t)?;
        let c = &self.config;
        let p = &self.params;
        let (h, w) = (x_t.height, x_t.width);
        let cp = c.pose_channels;
        let ch = c.hidden_channels;

        let mut cin = self.time_embedding(t);
        cin.extend_from_slice(&b.text);
        let mut cond_cache = MlpCache::default();
        let cvec = self.nets.cond.forward(&p[self.layout.cond_lin.clone()], &cin, &mut cond_cache).to_vec();

        let mut in1 = Vec::with_capacity(h * w * (3 + cp));
        for px in 0..h * w {
            in1.extend_from_slice(&x_t.data[px * 3..px * 3 + 3]);
            in1.extend_from_slice(&b.pose[px * cp..(px + 1) * cp]);
        }
        let mut h1 = Vec::new();
        self.nets.conv1.forward(&p[self.layout.conv1.clone()], &in1, h, w, &mut h1);
        for px in 0..h * w {
            for (v, cv) in h1[px * ch..(px + 1) * ch].iter_mut().zip(&cvec) {
                *v = (*v + cv).max(0.0);
            }
        }
        let mut a2 = Vec::new();
        self.nets.conv2.forward(&p[self.layout.conv2.clone()], &h1, h, w, &mut a2);
        let h2: Vec<f64> = a2.iter().zip(&h1).map(|(a, r)| a.max(0.0) + r).collect();
        let mut out = Vec::new();
        self.nets.conv3.forward(&p[self.layout.conv3.clone()], &h2, h, w, &mut out);
        for (o, x) in out.iter_mut().zip(&x_t.data) {
            *o += sigma * x;
        }
        let eps = Image::from_vec(h, w, 3, out)?;
        Ok((eps, Trace { x: x_t.data.clone(), cond_cache, in1, h1, a2, h2 }))
    }

    fn backward(&self, b: &ConditioningBundle, tr: &Trace, d_eps: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let p = &self.params;
        let l = &self.layout;
        let (h, w) = (b.height, b.width);
        let (cp, ch) = (c.pose_channels, c.hidden_channels);
        debug_assert_eq!(tr.x.len(), d_eps.len());

        let mut d_h2 = vec![0.0; h * w * ch];
        self.nets.conv3.backward(&p[l.conv3.clone()], &tr.h2, h, w, d_eps, &mut grad[l.conv3.clone()], Some(&mut d_h2));
        let d_a2: Vec<f64> = d_h2.iter().zip(&tr.a2).map(|(g, a)| if *a > 0.0 { *g } else { 0.0 }).collect();
        let mut d_h1 = d_h2;
        self.nets.conv2.backward(&p[l.conv2.clone()], &tr.h1, h, w, &d_a2, &mut grad[l.conv2.clone()], Some(&mut d_h1));
        for (g, v) in d_h1.iter_mut().zip(&tr.h1) {
            if *v <= 0.0 {
                *g = 0.0;
            }
        }
        let mut d_in1 = vec![0.0; h * w * (3 + cp)];
        self.nets.conv1.backward(&p[l.conv1.clone()], &tr.in1, h, w, &d_h1, &mut grad[l.conv1.clone()], Some(&mut d_in1));

        let mut d_cvec = vec![0.0; ch];
        for px in 0..h * w {
            for (d, g) in d_cvec.iter_mut().zip(&d_h1[px * ch..(px + 1) * ch]) {
                *d += g;
            }
        }
        let mut d_cin = vec![0.0; c.time_dim + c.text_dim];
        self.nets.cond.backward(&p[l.cond_lin.clone()], &tr.cond_cache, &d_cvec, &mut grad[l.cond_lin.clone()], Some(&mut d_cin));
        let d_text = &d_cin[c.time_dim..];
        if b.text_is_null {
            for (g, d) in grad[l.null_text.clone()].iter_mut().zip(d_text) {
                *g += d;
            }
        } else {
            let d_pre: Vec<f64> = d_text.iter().zip(&b.text).map(|(d, y)| d * (1.0 - y * y)).collect();
            let mut d_e = vec![0.0; c.text_dim];
            self.nets.gamma.backward(&p[l.gamma.clone()], &b.gamma_cache, &d_pre, &mut grad[l.gamma.clone()], Some(&mut d_e));
            let scale = 1.0 / b.tokens.len() as f64;
            for &id in &b.tokens {
                for (g, d) in grad[self.token_row_range(id)].iter_mut().zip(&d_e) {
                    *g += d * scale;
                }
            }
        }

        let mut d_pose = vec![0.0; h * w * cp];
        for px in 0..h * w {
            d_pose[px * cp..(px + 1) * cp].copy_from_slice(&d_in1[px * (3 + cp) + 3..(px + 1) * (3 + cp)]);
        }
        if b.pose_is_null {
            let g = &mut grad[l.null_pose.clone()];
            for px in 0..h * w {
                for (gv, d) in g.iter_mut().zip(&d_pose[px * cp..(px + 1) * cp]) {
                    *gv += d;
                }
            }
        } else if let Some(input) = &b.pose_input {
            let d_pre: Vec<f64> = d_pose.iter().zip(&b.pose).map(|(d, y)| d * (1.0 - y * y)).collect();
            self.nets.pose.backward(&p[l.pose_conv.clone()], input, h, w, &d_pre, &mut grad[l.pose_conv.clone()], None);
        }
    }

    pub fn predict_with_bundle(&self, x_t: &Image, t: usize, bundle: &ConditioningBundle) -> Result<Image> {
        Ok(self.forward(x_t, t, bundle)?.0)
    }

    /// Mean squared noise-prediction error for one example. Adds
    /// `scale · ∂loss/∂θ` into `grad` and returns the unscaled loss.
    pub fn loss_and_grad(
        &self,
        x_t: &Image,
        t: usize,
        cond: &Condition,
        target: &Image,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        if grad.len() != self.params.len() {
            return Err(Error::Contract("gradient buffer has the wrong length".into()));
        }
        x_t.check_same_shape(target)?;
        let bundle = self.encode_conditions(cond.tokens.as_deref(), cond.pose.as_ref(), x_t.height, x_t.width)?;
        let (eps, trace) = self.forward(x_t, t, &bundle)?;
        let n = eps.len() as f64;
        let mut loss = 0.0;
        let d: Vec<f64> = eps
            .data
            .iter()
            .zip(&target.data)
            .map(|(e, y)| {
                let r = e - y;
                loss += r * r;
                2.0 * r / n * scale
            })
            .collect();
        if scale != 0.0 {
            self.backward(&bundle, &trace, &d, grad);
        }
        Ok(loss / n)
    }

    pub fn loss(&self, x_t: &Image, t: usize, cond: &Condition, target: &Image) -> Result<f64> {
        let eps = self.predict_epsilon(x_t, t, cond)?;
        eps.check_same_shape(target)?;
        Ok(eps.data.iter().zip(&target.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / eps.len() as f64)
    }

    pub fn to_checkpoint(&self, precision: Precision) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, &self.params, precision)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ToyDenoiserConfig = ck.config(CHECKPOINT_KIND)?;
        let mut me = Self::zeroed(config)?;
        if ck.params.len() != me.params.len() {
            return Err(Error::Format(format!(
                "denoiser checkpoint holds {} parameters, configuration needs {}",
                ck.params.len(),
                me.params.len()
            )));
        }
        me.params.copy_from_slice(&ck.params);
        Ok(me)
    }
}

impl Denoiser for ToyConditionalDenoiser {
    fn predict_epsilon(&self, x_t: &Image, t: usize, cond: &Condition) -> Result<Image> {
        let bundle = self.encode_conditions(cond.tokens.as_deref(), cond.pose.as_ref(), x_t.height, x_t.width)?;
        self.predict_with_bundle(x_t, t, &bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::gaussian_image;
    use crate::math::rng_from_seed;

    fn small() -> ToyConditionalDenoiser {
        let cfg = ToyDenoiserConfig { vocab_size: 6, text_dim: 4, pose_channels: 2, hidden_channels: 5, time_dim: 4, t_max: 100 };
        ToyConditionalDenoiser::new(cfg, &mut rng_from_seed(1)).unwrap()
    }

    fn check_fd(cond: Condition) {
        let mut d = small();
        let mut rng = rng_from_seed(2);
        let x = gaussian_image(4, 3, 3, &mut rng);
        let y = gaussian_image(4, 3, 3, &mut rng);
        let mut g = vec![0.0; d.param_count()];
        d.loss_and_grad(&x, 37, &cond, &y, 1.0, &mut g).unwrap();
        let h = 1e-6;
        for i in (0..d.param_count()).step_by(3) {
            let orig = d.params[i];
            d.params[i] = orig + h;
            let up = d.loss(&x, 37, &cond, &y).unwrap();
            d.params[i] = orig - h;
            let dn = d.loss(&x, 37, &cond, &y).unwrap();
            d.params[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 + 1e-4 * fd.abs(), "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences_with_conditions() {
        let pose = gaussian_image(4, 3, 3, &mut rng_from_seed(7)).map(|v| v.abs().min(1.0));
        check_fd(Condition::new(Some(vec![1, 3, 3]), Some(pose)));
    }

    #[test]
    fn gradients_match_finite_differences_with_null_branches() {
        check_fd(Condition::default());
    }

    #[test]
    fn null_branch_differs_from_text_branch() {
        let d = small();
        let x = gaussian_image(4, 3, 3, &mut rng_from_seed(3));
        let a = d.predict_epsilon(&x, 50, &Condition::text(vec![2])).unwrap();
        let b = d.predict_epsilon(&x, 50, &Condition::default()).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = small();
        let x = Image::new(4, 3, 3);
        assert!(d.predict_epsilon(&x, 50, &Condition::text(vec![99])).is_err());
        assert!(d.predict_epsilon(&x, 50, &Condition::text(vec![])).is_err());
        assert!(d.predict_epsilon(&x, 101, &Condition::default()).is_err());
        let pose = Image::new(2, 2, 3);
        assert!(d.predict_epsilon(&x, 50, &Condition::new(None, Some(pose))).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = small();
        let ck = d.to_checkpoint(Precision::F64).unwrap();
        let back = ToyConditionalDenoiser::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params(), d.params());
    }
}
