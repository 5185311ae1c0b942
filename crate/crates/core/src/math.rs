//! Small numeric helpers shared across modules.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Vec3 = Vector3<f64>;

/// Deterministic generator used throughout the crate.
pub type DetRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer, used to derive independent substream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child generator for substream `stream`, drawing its base from `rng`.
pub fn fork(rng: &mut impl Rng, stream: u64) -> DetRng {
    let base: u64 = rng.random();
    rng_from_seed(mix_seed(base, stream))
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Axis-aligned box in world units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn cube(half: f64) -> Self {
        Self::new([-half; 3], [half; 3])
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.max[i] > self.min[i] && self.min[i].is_finite() && self.max[i].is_finite())
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        )
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (k, c) in out.iter_mut().enumerate() {
            *c = Vec3::new(
                if k & 1 == 0 { self.min[0] } else { self.max[0] },
                if k & 2 == 0 { self.min[1] } else { self.max[1] },
                if k & 4 == 0 { self.min[2] } else { self.max[2] },
            );
        }
        out
    }

    /// Maps a world point to the unit cube spanned by the box.
    pub fn to_unit(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            (p[0] - self.min[0]) / (self.max[0] - self.min[0]),
            (p[1] - self.min[1]) / (self.max[1] - self.min[1]),
            (p[2] - self.min[2]) / (self.max[2] - self.min[2]),
        )
    }

    /// Slab-test intersection returning the parametric entry/exit interval.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-300 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let mut a = (self.min[i] - origin[i]) * inv;
            let mut b = (self.max[i] - origin[i]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Standard normal draw without pulling in a distribution object at call sites.
pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
