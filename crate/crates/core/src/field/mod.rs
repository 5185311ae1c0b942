//! Hash-grid radiance field: density and view-dependent color with
//! parameter gradients for optimization.

pub mod analytic;
mod encoding;

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use encoding::{hash_vertex, EncodeCache, HashGridConfig, HashGridEncoding};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus, Aabb, Vec3};
use crate::nn::{MlpCache, MlpShape};
use crate::optim::Precision;

/// Number of view-direction basis functions (real spherical harmonics up to degree 2).
pub const SH_DIM: usize = 9;

pub fn sh_basis(d: &Vec3) -> [f64; SH_DIM] {
    let (x, y, z) = (d[0], d[1], d[2]);
    [
        0.282_094_791_773_878_14,
        -0.488_602_511_902_919_9 * y,
        0.488_602_511_902_919_9 * z,
        -0.488_602_511_902_919_9 * x,
        1.092_548_430_592_079_2 * x * y,
        -1.092_548_430_592_079_2 * y * z,
        0.315_391_565_252_520_05 * (2.0 * z * z - x * x - y * y),
        -1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_6 * (x * x - y * y),
    ]
}

/// A volume that can be rendered: density and color at world positions.
pub trait VolumeField: Sync {
    fn bounds(&self) -> Aabb;
    /// Density (1/length) and color in `[0,1]³` at `p` seen along `dir`.
    fn sample(&self, p: &Vec3, dir: &Vec3) -> Result<(f64, [f64; 3])>;
}

/// One recorded field evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldQuery {
    pub point: Vec3,
    pub dir: Vec3,
}

/// Upstream adjoint of a query's outputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QueryAdjoint {
    pub d_density: f64,
    pub d_color: [f64; 3],
}

/// A volume whose parameters can be differentiated.
pub trait DifferentiableField: VolumeField {
    fn param_count(&self) -> usize;
    /// Incremented on every parameter mutation; render tapes check it.
    fn version(&self) -> u64;
    fn accumulate_param_gradients(
        &self,
        queries: &[FieldQuery],
        adjoints: &[QueryAdjoint],
        grad: &mut [f64],
    ) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub encoding: HashGridConfig,
    pub density_hidden: Vec<usize>,
    pub color_hidden: Vec<usize>,
    pub bbox: Aabb,
    /// Initial output bias of the density head (pre-softplus).
    pub density_bias: f64,
    /// Half-width of the uniform table initialization.
    pub table_init: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoding: HashGridConfig::default(),
            density_hidden: vec![64, 64],
            color_hidden: vec![64, 64],
            bbox: Aabb::cube(1.0),
            density_bias: -1.0,
            table_init: 1e-4,
        }
    }
}

/// Density and color heads.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldHeads {
    pub density: MlpShape,
    pub color: MlpShape,
}

impl FieldHeads {
    pub fn new(features: usize, density_hidden: &[usize], color_hidden: &[usize]) -> Self {
        Self {
            density: MlpShape::new(features, density_hidden, 1),
            color: MlpShape::new(features + SH_DIM, color_hidden, 3),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Scratch {
    enc: EncodeCache,
    features: Vec<f64>,
    color_in: Vec<f64>,
    density: MlpCache,
    color: MlpCache,
    d_features: Vec<f64>,
    d_color_in: Vec<f64>,
    d_density_in: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RadianceField {
    pub config: FieldConfig,
    pub encoding: HashGridEncoding,
    pub heads: FieldHeads,
    params: Vec<f64>,
    version: u64,
}

impl PartialEq for RadianceField {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl RadianceField {
    pub fn new(config: FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut field = Self::zeroed(config)?;
        let tables = field.tables_range();
        let bound = field.config.table_init;
        for p in &mut field.params[tables] {
            *p = if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 };
        }
        let d = field.density_range();
        field.heads.density.init(&mut field.params[d.clone()], rng);
        let bias_at = d.start + field.heads.density.bias_offset(field.heads.density.layers() - 1);
        field.params[bias_at] = field.config.density_bias;
        let c = field.color_range();
        field.heads.color.init(&mut field.params[c], rng);
        Ok(field)
    }

    /// Field with every parameter zero.
    pub fn zeroed(config: FieldConfig) -> Result<Self> {
        if !config.bbox.is_valid() {
            return Err(Error::Config(format!("invalid field bounding box {:?}", config.bbox)));
        }
        let encoding = HashGridEncoding::new(config.encoding.clone())?;
        let heads = FieldHeads::new(encoding.output_dim(), &config.density_hidden, &config.color_hidden);
        let n = encoding.table_len() + heads.density.param_count() + heads.color.param_count();
        Ok(Self {
            config,
            encoding,
            heads,
            params: vec![0.0; n],
            version: 0,
        })
    }

    pub fn bbox(&self) -> Aabb {
        self.config.bbox
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; bumps the version so stale tapes are caught.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn tables_range(&self) -> Range<usize> {
        0..self.encoding.table_len()
    }

    pub fn density_range(&self) -> Range<usize> {
        let s = self.encoding.table_len();
        s..s + self.heads.density.param_count()
    }

    pub fn color_range(&self) -> Range<usize> {
        let s = self.density_range().end;
        s..s + self.heads.color.param_count()
    }

    pub fn heads_range(&self) -> Range<usize> {
        self.density_range().start..self.params.len()
    }

    /// Encodes a point given in the unit cube of the bounding box.
    pub fn encode(&self, unit: [f64; 3]) -> Result<Vec<f64>> {
        self.encoding.encode(&self.params[self.tables_range()], unit)
    }

    fn unit_point(&self, p: &Vec3) -> Result<Option<[f64; 3]>> {
        if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
            return Err(Error::Domain(format!("non-finite query point {p:?}")));
        }
        let bbox = self.config.bbox;
        if !bbox.contains(p) {
            return Ok(None);
        }
        let u = bbox.to_unit(p);
        Ok(Some([u[0].clamp(0.0, 1.0), u[1].clamp(0.0, 1.0), u[2].clamp(0.0, 1.0)]))
    }

    fn check_dir(dir: &Vec3) -> Result<()> {
        let n = dir.norm();
        if (n - 1.0).abs() > 1e-6 || !n.is_finite() {
            return Err(Error::Domain(format!("view direction has norm {n}, expected 1")));
        }
        Ok(())
    }

    fn forward(&self, unit: [f64; 3], dir: Option<&Vec3>, s: &mut Scratch, cache: bool) -> Result<(f64, [f64; 3])> {
        s.features.resize(self.encoding.output_dim(), 0.0);
        let tables = &self.params[self.tables_range()];
        self.encoding
            .encode_into(tables, unit, &mut s.features, if cache { Some(&mut s.enc) } else { None })?;
        let raw = self
            .heads
            .density
            .forward(&self.params[self.density_range()], &s.features, &mut s.density)[0];
        let sigma = softplus(raw);
        let mut rgb = [0.0; 3];
        if let Some(d) = dir {
            s.color_in.clear();
            s.color_in.extend_from_slice(&s.features);
            s.color_in.extend_from_slice(&sh_basis(d));
            let out = self
                .heads
                .color
                .forward(&self.params[self.color_range()], &s.color_in, &mut s.color);
            for k in 0..3 {
                rgb[k] = sigmoid(out[k]);
            }
        }
        Ok((sigma, rgb))
    }

    pub fn query_density(&self, p: &Vec3) -> Result<f64> {
        match self.unit_point(p)? {
            None => Ok(0.0),
            Some(u) => Ok(self.forward(u, None, &mut Scratch::default(), false)?.0),
        }
    }

    pub fn query_color(&self, p: &Vec3, dir: &Vec3) -> Result<[f64; 3]> {
        Self::check_dir(dir)?;
        if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
            return Err(Error::Domain(format!("non-finite query point {p:?}")));
        }
        let u = self.config.bbox.to_unit(p);
        let u = [u[0].clamp(0.0, 1.0), u[1].clamp(0.0, 1.0), u[2].clamp(0.0, 1.0)];
        Ok(self.forward(u, Some(dir), &mut Scratch::default(), false)?.1)
    }

    /// Densities at many points, reusing one scratch buffer.
    pub fn query_densities(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        let mut s = Scratch::default();
        points
            .iter()
            .map(|p| match self.unit_point(p)? {
                None => Ok(0.0),
                Some(u) => Ok(self.forward(u, None, &mut s, false)?.0),
            })
            .collect()
    }

    fn backward_query(&self, q: &FieldQuery, adj: &QueryAdjoint, grad: &mut [f64], s: &mut Scratch) -> Result<()> {
        let want_color = adj.d_color.iter().any(|&g| g != 0.0);
        if adj.d_density == 0.0 && !want_color {
            return Ok(());
        }
        if want_color {
            Self::check_dir(&q.dir)?;
        }
        let inside = self.unit_point(&q.point)?;
        let unit = match inside {
            Some(u) => u,
            None if want_color => {
                let u = self.config.bbox.to_unit(&q.point);
                [u[0].clamp(0.0, 1.0), u[1].clamp(0.0, 1.0), u[2].clamp(0.0, 1.0)]
            }
            None => return Ok(()),
        };
        let (_, rgb) = self.forward(unit, want_color.then_some(&q.dir), s, true)?;
        let n_feat = self.encoding.output_dim();
        s.d_features.clear();
        s.d_features.resize(n_feat, 0.0);
        let (tables_r, dens_r, col_r) = (self.tables_range(), self.density_range(), self.color_range());
        if inside.is_some() && adj.d_density != 0.0 {
            let raw = s.density.output()[0];
            let d_raw = [adj.d_density * sigmoid(raw)];
            s.d_density_in.clear();
            s.d_density_in.resize(n_feat, 0.0);
            self.heads.density.backward(
                &self.params[dens_r.clone()],
                &s.density,
                &d_raw,
                &mut grad[dens_r],
                Some(&mut s.d_density_in),
            );
            for (a, b) in s.d_features.iter_mut().zip(&s.d_density_in) {
                *a += b;
            }
        }
        if want_color {
            let mut d_raw = [0.0; 3];
            for k in 0..3 {
                d_raw[k] = adj.d_color[k] * rgb[k] * (1.0 - rgb[k]);
            }
            s.d_color_in.clear();
            s.d_color_in.resize(n_feat + SH_DIM, 0.0);
            self.heads.color.backward(
                &self.params[col_r.clone()],
                &s.color,
                &d_raw,
                &mut grad[col_r],
                Some(&mut s.d_color_in),
            );
            for (a, b) in s.d_features.iter_mut().zip(&s.d_color_in[..n_feat]) {
                *a += b;
            }
        }
        self.encoding.backward(&s.enc, &s.d_features, &mut grad[tables_r]);
        Ok(())
    }

    pub fn to_checkpoint(&self, precision: Precision) -> Result<Checkpoint> {
        Checkpoint::new("field", &self.config, &self.params, precision)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: FieldConfig = ck.config("field")?;
        let mut field = Self::zeroed(config)?;
        if ck.params.len() != field.params.len() {
            return Err(Error::Format(format!(
                "field checkpoint has {} parameters, config implies {}",
                ck.params.len(),
                field.params.len()
            )));
        }
        field.params.copy_from_slice(&ck.params);
        Ok(field)
    }

    /// Loads a checkpoint and checks its header against `expected`.
    pub fn load_validated(path: impl AsRef<Path>, expected: &FieldConfig) -> Result<Self> {
        let field = Self::from_checkpoint(&Checkpoint::load(path)?)?;
        if &field.config != expected {
            return Err(Error::Config(
                "field checkpoint header does not match the configured field".into(),
            ));
        }
        Ok(field)
    }
}

impl VolumeField for RadianceField {
    fn bounds(&self) -> Aabb {
        self.config.bbox
    }

    fn sample(&self, p: &Vec3, dir: &Vec3) -> Result<(f64, [f64; 3])> {
        match self.unit_point(p)? {
            None => Ok((0.0, self.query_color(p, dir)?)),
            Some(u) => {
                Self::check_dir(dir)?;
                self.forward(u, Some(dir), &mut Scratch::default(), false)
            }
        }
    }
}

impl DifferentiableField for RadianceField {
    fn param_count(&self) -> usize {
        self.params.len()
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn accumulate_param_gradients(
        &self,
        queries: &[FieldQuery],
        adjoints: &[QueryAdjoint],
        grad: &mut [f64],
    ) -> Result<()> {
        if queries.len() != adjoints.len() {
            return Err(Error::Contract(format!(
                "{} queries but {} adjoints",
                queries.len(),
                adjoints.len()
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "gradient buffer has {} slots, field has {} parameters",
                grad.len(),
                self.params.len()
            )));
        }
        let mut s = Scratch::default();
        for (q, a) in queries.iter().zip(adjoints) {
            self.backward_query(q, a, grad, &mut s)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng_from_seed;

    fn tiny() -> FieldConfig {
        FieldConfig {
            encoding: HashGridConfig {
                levels: 2,
                base_resolution: 4,
                growth: 2.0,
                table_size: 1 << 8,
                feature_dim: 2,
            },
            density_hidden: vec![8],
            color_hidden: vec![8],
            bbox: Aabb::cube(1.0),
            density_bias: 0.3,
            table_init: 0.5,
        }
    }

    #[test]
    fn outside_box_has_zero_density() {
        let f = RadianceField::new(tiny(), &mut rng_from_seed(0)).unwrap();
        assert_eq!(f.query_density(&Vec3::new(1.5, 0.0, 0.0)).unwrap(), 0.0);
        assert!(f.query_density(&Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn fresh_field_density_is_softplus_of_bias_path() {
        let cfg = FieldConfig {
            table_init: 0.0,
            ..tiny()
        };
        let f = RadianceField::new(cfg, &mut rng_from_seed(0)).unwrap();
        let d = f.query_density(&Vec3::new(0.1, -0.2, 0.3)).unwrap();
        assert!(d > 0.0 && d.is_finite());
        assert!((d - softplus(0.3)).abs() < 1e-15);
    }

    #[test]
    fn zero_color_head_gives_mid_gray() {
        let mut f = RadianceField::new(tiny(), &mut rng_from_seed(1)).unwrap();
        let r = f.color_range();
        f.params_mut()[r].fill(0.0);
        let c = f.query_color(&Vec3::new(0.2, 0.2, 0.2), &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(c, [0.5, 0.5, 0.5]);
    }

    #[test]
    fn non_unit_direction_is_rejected() {
        let f = RadianceField::new(tiny(), &mut rng_from_seed(1)).unwrap();
        assert!(matches!(
            f.query_color(&Vec3::zeros(), &Vec3::new(0.0, 0.0, 2.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn colors_stay_in_unit_range() {
        let f = RadianceField::new(tiny(), &mut rng_from_seed(2)).unwrap();
        let mut rng = rng_from_seed(3);
        for _ in 0..1000 {
            let p = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize();
            let c = f.query_color(&p, &d).unwrap();
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn adjoint_count_mismatch_is_contract_error() {
        let f = RadianceField::new(tiny(), &mut rng_from_seed(2)).unwrap();
        let mut g = vec![0.0; f.param_count()];
        let q = FieldQuery {
            point: Vec3::zeros(),
            dir: Vec3::z(),
        };
        assert!(matches!(
            f.accumulate_param_gradients(&[q], &[], &mut g),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_adjoints_give_zero_gradient() {
        let f = RadianceField::new(tiny(), &mut rng_from_seed(2)).unwrap();
        let mut g = vec![0.0; f.param_count()];
        let q = FieldQuery {
            point: Vec3::new(0.1, 0.2, 0.3),
            dir: Vec3::z(),
        };
        f.accumulate_param_gradients(&[q; 4], &[QueryAdjoint::default(); 4], &mut g)
            .unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_and_header_validation() {
        let f = RadianceField::new(tiny(), &mut rng_from_seed(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        f.to_checkpoint(Precision::F64).unwrap().save(&path).unwrap();
        let back = RadianceField::load_validated(&path, &tiny()).unwrap();
        assert_eq!(back, f);
        let other = FieldConfig {
            density_hidden: vec![4],
            ..tiny()
        };
        assert!(RadianceField::load_validated(&path, &other).is_err());
    }
}
