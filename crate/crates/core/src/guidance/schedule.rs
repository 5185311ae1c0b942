use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance-preserving cosine schedule over integer steps `0..=t_max`.
///
/// Step 0 is the clean signal (`α = 1, σ = 0`). Per-step betas follow the
/// cosine `ᾱ` curve, clipped at 0.999, and `ᾱ` is rebuilt as their
/// cumulative product so that the ancestral chain and the forward process
/// agree exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    beta: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    pub fn cosine(t_max: usize) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / t_max as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let mut beta = vec![0.0; t_max + 1];
        let mut alpha_bar = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            beta[t] = (1.0 - f(t) / f(t - 1)).clamp(1e-8, MAX_BETA);
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        let alpha = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).max(0.0).sqrt()).collect();
        Ok(Self {
            t_max,
            alpha_bar,
            alpha,
            sigma,
            beta,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            Err(Error::Domain(format!("timestep {t} outside 0..={}", self.t_max)))
        } else {
            Ok(())
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn checked_alpha_sigma(&self, t: usize) -> Result<(f64, f64)> {
        self.check(t)?;
        Ok((self.alpha[t], self.sigma[t]))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::cosine(1000).expect("non-empty schedule")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_preserving_identity_holds_everywhere() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        for t in 0..=1000 {
            let (a, g) = (s.alpha(t), s.sigma(t));
            assert!((a * a + g * g - 1.0).abs() <= 1e-9, "t={t}");
        }
    }

    #[test]
    fn alpha_decreases_and_sigma_increases() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        for t in 1..=1000 {
            assert!(s.alpha(t) < s.alpha(t - 1));
            assert!(s.sigma(t) > s.sigma(t - 1));
        }
        assert_eq!(s.alpha(0), 1.0);
        assert_eq!(s.sigma(0), 0.0);
        assert!(s.alpha(1000) < 1e-3);
    }

    #[test]
    fn out_of_range_step_is_an_error() {
        let s = NoiseSchedule::cosine(10).unwrap();
        assert!(s.checked_alpha_sigma(11).is_err());
        assert!(NoiseSchedule::cosine(0).is_err());
    }
}
