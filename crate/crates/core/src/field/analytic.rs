//! Closed-form volumes used as rendering oracles and demo scenes.

use crate::error::Result;
use crate::math::{Aabb, Vec3};

use super::VolumeField;

/// Volume defined by a closure; handy for slabs and other test geometry.
pub struct FnField<F> {
    pub bbox: Aabb,
    pub f: F,
}

impl<F> FnField<F>
where
    F: Fn(&Vec3, &Vec3) -> (f64, [f64; 3]) + Sync,
{
    pub fn new(bbox: Aabb, f: F) -> Self {
        Self { bbox, f }
    }
}

impl<F> VolumeField for FnField<F>
where
    F: Fn(&Vec3, &Vec3) -> (f64, [f64; 3]) + Sync,
{
    fn bounds(&self) -> Aabb {
        self.bbox
    }

    fn sample(&self, p: &Vec3, dir: &Vec3) -> Result<(f64, [f64; 3])> {
        if !self.bbox.contains(p) {
            return Ok((0.0, [0.0; 3]));
        }
        Ok((self.f)(p, dir))
    }
}

/// Constant-density ball with optional front/back coloring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereField {
    pub center: Vec3,
    pub radius: f64,
    pub density: f64,
    /// Color of the `z ≥ center.z` half.
    pub front: [f64; 3],
    /// Color of the `z < center.z` half.
    pub back: [f64; 3],
    pub bbox: Aabb,
}

impl SphereField {
    pub fn uniform(radius: f64, density: f64, color: [f64; 3], bbox: Aabb) -> Self {
        Self {
            center: Vec3::zeros(),
            radius,
            density,
            front: color,
            back: color,
            bbox,
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (p - self.center).norm() <= self.radius
    }
}

impl VolumeField for SphereField {
    fn bounds(&self) -> Aabb {
        self.bbox
    }

    fn sample(&self, p: &Vec3, _dir: &Vec3) -> Result<(f64, [f64; 3])> {
        if !self.bbox.contains(p) || !self.contains(p) {
            return Ok((0.0, [0.0; 3]));
        }
        let c = if p[2] >= self.center[2] { self.front } else { self.back };
        Ok((self.density, c))
    }
}
