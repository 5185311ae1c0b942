//! PSNR / SSIM and turntable metric reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::Image;

/// Serialized stand-in for the infinite PSNR of identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::Domain("cannot compare empty images".into()));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(peak² / MSE)`; `+∞` for identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..n).map(|i| k[i] * plane[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean windowed SSIM with a Gaussian window, averaged over channels.
/// Only windows fully inside the image are used; images smaller than the
/// window use the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image, cfg: &SsimConfig) -> Result<f64> {
    a.check_same_shape(b)?;
    if cfg.window % 2 == 0 || cfg.window == 0 {
        return Err(Error::Domain(format!("SSIM window must be odd, got {}", cfg.window)));
    }
    if a.is_empty() {
        return Err(Error::Domain("cannot compare empty images".into()));
    }
    let (h, w, ch) = (a.height, a.width, a.channels);
    let mut size = cfg.window.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size, cfg.sigma);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mut total = 0.0;
    for c in 0..ch {
        let x: Vec<f64> = (0..h * w).map(|p| a.data[p * ch + c]).collect();
        let y: Vec<f64> = (0..h * w).map(|p| b.data[p * ch + c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, oh, ow) = filter_valid(&x, h, w, &k);
        let (my, _, _) = filter_valid(&y, h, w, &k);
        let (sxx, _, _) = filter_valid(&xx, h, w, &k);
        let (syy, _, _) = filter_valid(&yy, h, w, &k);
        let (sxy, _, _) = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let vx = sxx[i] - mx[i] * mx[i];
            let vy = syy[i] - my[i] * my[i];
            let cov = sxy[i] - mx[i] * my[i];
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / ch as f64)
}

fn capped<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(v.min(PSNR_CAP))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub azimuth_deg: f64,
    #[serde(serialize_with = "capped")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub views: Vec<ViewMetrics>,
    #[serde(serialize_with = "capped")]
    pub mean_psnr: f64,
    #[serde(serialize_with = "capped")]
    pub min_psnr: f64,
    pub mean_ssim: f64,
    pub min_ssim: f64,
}

impl MetricReport {
    /// Compares renders against references view by view.
    pub fn compare(renders: &[Image], references: &[Image], azimuths_deg: &[f64]) -> Result<Self> {
        if renders.len() != references.len() || renders.len() != azimuths_deg.len() || renders.is_empty() {
            return Err(Error::Contract("need one reference and one azimuth per render".into()));
        }
        let cfg = SsimConfig::default();
        let mut views = Vec::new();
        for (i, (r, g)) in renders.iter().zip(references).enumerate() {
            if !r.same_shape(g) {
                return Err(Error::Contract(format!(
                    "view {i}: render {}x{} vs reference {}x{}",
                    r.height, r.width, g.height, g.width
                )));
            }
            views.push(ViewMetrics { view: i, azimuth_deg: azimuths_deg[i], psnr: psnr(r, g, 1.0)?, ssim: ssim(r, g, &cfg)? });
        }
        let n = views.len() as f64;
        // The mean of PSNRs stays infinite if any view is identical.
        let mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
        let min_psnr = views.iter().map(|v| v.psnr).fold(f64::INFINITY, f64::min);
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        let min_ssim = views.iter().map(|v| v.ssim).fold(f64::INFINITY, f64::min);
        Ok(Self { views, mean_psnr, min_psnr, mean_ssim, min_ssim })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:>5} {:>9} {:>9} {:>8}\n", "view", "azimuth", "psnr_db", "ssim");
        for v in &self.views {
            let _ = writeln!(s, "{:>5} {:>9.1} {:>9.3} {:>8.5}", v.view, v.azimuth_deg, v.psnr.min(PSNR_CAP), v.ssim);
        }
        let _ = writeln!(s, "{:>5} {:>9} {:>9.3} {:>8.5}", "mean", "", self.mean_psnr.min(PSNR_CAP), self.mean_ssim);
        let _ = writeln!(s, "{:>5} {:>9} {:>9.3} {:>8.5}", "min", "", self.min_psnr.min(PSNR_CAP), self.min_ssim);
        s
    }
}
