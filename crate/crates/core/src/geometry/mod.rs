//! Skeleton, part meshes and the local geometry margin loss.

pub mod mesh;
pub mod skeleton;

pub use mesh::{
    closest_point_on_triangle, point_triangle_distance, sample_near_mesh, sample_on_mesh,
    sample_on_mesh_with_triangles, PartMesh,
};
pub use skeleton::{
    draw_pose_2d, project_joints, rasterize_skeleton, rasterize_skeleton_crop, ArticulatedSkeleton, Joint,
    SkeletonRaster, CENTER_COLOR, JOINT_COLOR, JOINT_NAMES, LEFT_LIMB_COLOR, RIGHT_LIMB_COLOR,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DifferentiableField, FieldQuery, QueryAdjoint};
use crate::math::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeoLossConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    pub n_on: usize,
    pub n_off: usize,
    /// Distance within which a point counts as on the surface.
    pub eps_surf: f64,
    pub r_off: f64,
}

impl Default for GeoLossConfig {
    fn default() -> Self {
        Self { tau_min: 0.5, tau_max: 20.0, n_on: 256, n_off: 256, eps_surf: 0.002, r_off: 0.05 }
    }
}

impl GeoLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min >= 0.0 && self.tau_max > self.tau_min && self.tau_max.is_finite()) {
            return Err(Error::Config(format!(
                "geometry thresholds need 0 <= tau_min < tau_max, got {} and {}",
                self.tau_min, self.tau_max
            )));
        }
        if !(self.eps_surf > 0.0 && self.r_off > self.eps_surf) {
            return Err(Error::Config(format!(
                "off-surface band needs 0 < eps_surf < r_off, got [{}, {}]",
                self.eps_surf, self.r_off
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoLoss {
    pub value: f64,
    pub on_term: f64,
    pub off_term: f64,
    /// `∂loss/∂τ` at each on-point and off-point.
    pub d_on: Vec<f64>,
    pub d_off: Vec<f64>,
}

/// Squared-hinge margins on density: on-surface points are pushed above
/// `tau_max`, band points below `tau_min`. An empty point set contributes 0.
pub fn geo_loss<F: DifferentiableField + ?Sized>(
    field: &F,
    on_points: &[Vec3],
    off_points: &[Vec3],
    config: &GeoLossConfig,
) -> Result<GeoLoss> {
    let dir = Vec3::new(0.0, 0.0, 1.0);
    let density = |p: &Vec3| -> Result<f64> {
        let (tau, _) = field.sample(p, &dir)?;
        if !tau.is_finite() {
            return Err(Error::Numeric(format!("non-finite density at {p:?}")));
        }
        Ok(tau)
    };
    if on_points.is_empty() || off_points.is_empty() {
        log::debug!("geometry loss: {} on-points, {} off-points", on_points.len(), off_points.len());
    }
    let (mut on_term, mut off_term) = (0.0, 0.0);
    let mut d_on = Vec::with_capacity(on_points.len());
    for p in on_points {
        let gap = (config.tau_max - density(p)?).max(0.0);
        on_term += gap * gap / on_points.len() as f64;
        d_on.push(-2.0 * gap / on_points.len() as f64);
    }
    let mut d_off = Vec::with_capacity(off_points.len());
    for p in off_points {
        let gap = (density(p)? - config.tau_min).max(0.0);
        off_term += gap * gap / off_points.len() as f64;
        d_off.push(2.0 * gap / off_points.len() as f64);
    }
    Ok(GeoLoss { value: on_term + off_term, on_term, off_term, d_on, d_off })
}

/// Adds `scale · ∂loss/∂θ` into `grad`.
pub fn accumulate_geo_gradient<F: DifferentiableField + ?Sized>(
    field: &F,
    on_points: &[Vec3],
    off_points: &[Vec3],
    loss: &GeoLoss,
    scale: f64,
    grad: &mut [f64],
) -> Result<()> {
    let dir = Vec3::new(0.0, 0.0, 1.0);
    let mut queries = Vec::new();
    let mut adjoints = Vec::new();
    for (p, d) in on_points.iter().zip(&loss.d_on).chain(off_points.iter().zip(&loss.d_off)) {
        if *d != 0.0 {
            queries.push(FieldQuery { point: *p, dir });
            adjoints.push(QueryAdjoint { d_density: scale * d, d_color: [0.0; 3] });
        }
    }
    field.accumulate_param_gradients(&queries, &adjoints, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, RadianceField};

    #[test]
    fn zero_density_field_pays_tau_max_squared_on_surface_only() {
        let mut f = RadianceField::zeroed(FieldConfig::default()).unwrap();
        // softplus(x) with a very negative bias is numerically zero.
        let b = f.density_range().end - 1;
        f.params_mut()[b] = -800.0;
        let on = vec![Vec3::new(0.1, 0.0, 0.0); 4];
        let off = vec![Vec3::new(0.0, 0.2, 0.0); 3];
        let cfg = GeoLossConfig::default();
        let l = geo_loss(&f, &on, &off, &cfg).unwrap();
        assert_eq!(l.on_term, cfg.tau_max * cfg.tau_max);
        assert_eq!(l.off_term, 0.0);
        assert!(l.d_on.iter().all(|&d| d < 0.0));
        assert!(l.d_off.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn empty_sets_contribute_nothing() {
        let f = RadianceField::zeroed(FieldConfig::default()).unwrap();
        let l = geo_loss(&f, &[], &[], &GeoLossConfig::default()).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(GeoLossConfig { tau_min: 5.0, tau_max: 1.0, ..Default::default() }.validate().is_err());
        assert!(GeoLossConfig { eps_surf: 0.1, r_off: 0.05, ..Default::default() }.validate().is_err());
        GeoLossConfig::default().validate().unwrap();
    }
}
