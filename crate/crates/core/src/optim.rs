//! Adaptive moment optimizer with per-range learning rates.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Storage precision for trainable parameters.
///
/// All arithmetic runs in `f64`; `F32` rounds parameters to single precision
/// after every update so that runs behave like single-precision training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }

    pub fn apply(self, params: &mut [f64]) {
        if self == Precision::F32 {
            for p in params {
                *p = *p as f32 as f64;
            }
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?} (expected f32 or f64)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    groups: Vec<(Range<usize>, f64)>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub precision: Precision,
}

impl Adam {
    /// `groups` assigns a learning rate to each parameter range; parameters
    /// not covered by any range (or with rate 0) are left untouched.
    pub fn new(n_params: usize, groups: Vec<(Range<usize>, f64)>) -> Self {
        Self {
            groups,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            precision: Precision::F64,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (range, lr) in &self.groups {
            if *lr == 0.0 {
                continue;
            }
            for i in range.clone() {
                let g = grad[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                if self.m[i] == 0.0 && self.v[i] == 0.0 {
                    continue;
                }
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                params[i] = self.precision.round(params[i] - lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
    }
}
