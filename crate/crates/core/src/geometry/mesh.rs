//! Triangle meshes for body parts, OBJ subset I/O, distance queries and
//! surface / near-surface sampling.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartMesh {
    pub label: String,
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

const MIN_AREA: f64 = 1e-12;

impl PartMesh {
    pub fn new(label: impl Into<String>, vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let m = Self { label: label.into(), vertices, triangles };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("mesh {:?} has non-finite vertices", self.label)));
        }
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&k| k >= self.vertices.len()) {
                return Err(Error::Domain(format!("mesh {:?}: triangle {i} indexes a missing vertex", self.label)));
            }
            if self.area(i) <= MIN_AREA {
                return Err(Error::Domain(format!("mesh {:?}: triangle {i} is degenerate", self.label)));
            }
        }
        Ok(())
    }

    pub fn vertex(&self, i: usize) -> Vec3 {
        Vec3::from(self.vertices[i])
    }

    pub fn corners(&self, tri: usize) -> [Vec3; 3] {
        let t = self.triangles[tri];
        [self.vertex(t[0]), self.vertex(t[1]), self.vertex(t[2])]
    }

    pub fn area(&self, tri: usize) -> f64 {
        let [a, b, c] = self.corners(tri);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn normal(&self, tri: usize) -> Vec3 {
        let [a, b, c] = self.corners(tri);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.area(i)).sum()
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            let v = Vec3::from(*v);
            lo = lo.inf(&v);
            hi = hi.sup(&v);
        }
        (lo, hi)
    }

    /// Unsigned distance to the nearest triangle, brute force.
    pub fn distance(&self, p: &Vec3) -> f64 {
        (0..self.triangles.len())
            .map(|i| {
                let [a, b, c] = self.corners(i);
                point_triangle_distance(p, &a, &b, &c)
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let mut m = self.clone();
        for v in &mut m.vertices {
            for k in 0..3 {
                v[k] += offset[k];
            }
        }
        m
    }

    fn append(&mut self, other: &PartMesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
    }

    /// UV ellipsoid with `lon` segments around and `lat` bands pole to pole.
    pub fn ellipsoid(label: &str, center: [f64; 3], radii: [f64; 3], lon: usize, lat: usize) -> Self {
        let mut vertices = vec![[center[0], center[1] + radii[1], center[2]]];
        for i in 1..lat {
            let theta = std::f64::consts::PI * i as f64 / lat as f64;
            for j in 0..lon {
                let phi = std::f64::consts::TAU * j as f64 / lon as f64;
                vertices.push([
                    center[0] + radii[0] * theta.sin() * phi.sin(),
                    center[1] + radii[1] * theta.cos(),
                    center[2] + radii[2] * theta.sin() * phi.cos(),
                ]);
            }
        }
        vertices.push([center[0], center[1] - radii[1], center[2]]);
        let bottom = vertices.len() - 1;
        let ring = |i: usize, j: usize| 1 + (i - 1) * lon + j % lon;
        let mut triangles = Vec::new();
        for j in 0..lon {
            triangles.push([0, ring(1, j), ring(1, j + 1)]);
        }
        for i in 1..lat - 1 {
            for j in 0..lon {
                triangles.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
                triangles.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
            }
        }
        for j in 0..lon {
            triangles.push([bottom, ring(lat - 1, j + 1), ring(lat - 1, j)]);
        }
        Self { label: label.to_string(), vertices, triangles }
    }

    /// Low-poly hand (palm plus five finger ellipsoids, 568 triangles)
    /// hanging down from `wrist`, palm facing ±z, about `scale` long.
    pub fn procedural_hand(wrist: [f64; 3], scale: f64) -> Self {
        let s = scale;
        let at = |dx: f64, dy: f64| [wrist[0] + dx * s, wrist[1] + dy * s, wrist[2]];
        let mut m = Self::ellipsoid("hand", at(0.0, -0.25), [0.22 * s, 0.25 * s, 0.08 * s], 12, 8);
        for (k, dx) in [-0.15, -0.05, 0.05, 0.15].iter().enumerate() {
            let len = [0.2, 0.24, 0.22, 0.17][k];
            m.append(&Self::ellipsoid("hand", at(*dx, -0.5 - len), [0.045 * s, len * s, 0.045 * s], 8, 6));
        }
        let thumb = Self::ellipsoid("hand", at(0.26, -0.3), [0.05 * s, 0.16 * s, 0.05 * s], 8, 6);
        m.append(&thumb);
        m
    }

    /// Low-poly face shell (head ellipsoid, nose and ears, 504 triangles)
    /// centered at `center`, about `scale` tall.
    pub fn procedural_face(center: [f64; 3], scale: f64) -> Self {
        let s = scale;
        let at = |dx: f64, dy: f64, dz: f64| [center[0] + dx * s, center[1] + dy * s, center[2] + dz * s];
        let mut m = Self::ellipsoid("face", at(0.0, 0.0, 0.0), [0.38 * s, 0.5 * s, 0.42 * s], 16, 12);
        m.append(&Self::ellipsoid("face", at(0.0, -0.02, 0.43), [0.06 * s, 0.1 * s, 0.08 * s], 8, 6));
        m.append(&Self::ellipsoid("face", at(0.39, 0.0, 0.0), [0.04 * s, 0.1 * s, 0.06 * s], 6, 4));
        m.append(&Self::ellipsoid("face", at(-0.39, 0.0, 0.0), [0.04 * s, 0.1 * s, 0.06 * s], 6, 4));
        m
    }

    pub fn to_obj(&self) -> String {
        let mut out = format!("# {}\n", self.label);
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }

    /// Parses `v` and `f` lines; other records are ignored. Polygons are
    /// fan-triangulated and `i/j/k` face tokens use the vertex index only.
    pub fn from_obj(label: &str, text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let bad = |what: &str| Error::Format(format!("OBJ line {}: {what}", ln + 1));
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse::<f64>().map_err(|_| bad("bad coordinate")))
                        .collect::<Result<_>>()?;
                    if c.len() != 3 {
                        return Err(bad("vertex needs three coordinates"));
                    }
                    vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|s| {
                            let first = s.split('/').next().unwrap_or("");
                            match first.parse::<usize>() {
                                Ok(i) if i >= 1 => Ok(i - 1),
                                _ => Err(bad("bad face index")),
                            }
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(bad("face needs at least three vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        Self::new(label, vertices, triangles)
    }

    pub fn load_obj(path: impl AsRef<Path>, label: &str) -> Result<Self> {
        let path = path.as_ref();
        Self::from_obj(label, &std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }
}

/// Closest-point distance from `p` to triangle `abc` (Voronoi-region walk).
pub fn point_triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    (p - closest_point_on_triangle(p, a, b, c)).norm()
}

pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

fn cumulative_areas(mesh: &PartMesh) -> Result<Vec<f64>> {
    if mesh.triangles.is_empty() {
        return Err(Error::Domain(format!("mesh {:?} is empty", mesh.label)));
    }
    let mut acc = 0.0;
    Ok((0..mesh.triangles.len())
        .map(|i| {
            acc += mesh.area(i);
            acc
        })
        .collect())
}

fn draw_surface_point(mesh: &PartMesh, cdf: &[f64], rng: &mut impl Rng) -> (usize, Vec3) {
    let total = *cdf.last().unwrap();
    let x = rng.random::<f64>() * total;
    let tri = cdf.partition_point(|&c| c <= x).min(cdf.len() - 1);
    let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
    if u + v > 1.0 {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    let [a, b, c] = mesh.corners(tri);
    (tri, a + (b - a) * u + (c - a) * v)
}

/// Area-weighted uniform surface samples with their triangle indices.
pub fn sample_on_mesh_with_triangles(mesh: &PartMesh, n: usize, rng: &mut impl Rng) -> Result<Vec<(usize, Vec3)>> {
    let cdf = cumulative_areas(mesh)?;
    Ok((0..n).map(|_| draw_surface_point(mesh, &cdf, rng)).collect())
}

pub fn sample_on_mesh(mesh: &PartMesh, n: usize, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    Ok(sample_on_mesh_with_triangles(mesh, n, rng)?.into_iter().map(|(_, p)| p).collect())
}

/// Points whose distance to the mesh lies in `[lo, hi]`: a surface point
/// pushed along its face normal (random side) by a uniform offset, kept
/// only if the full-mesh distance confirms the band.
pub fn sample_near_mesh(mesh: &PartMesh, n: usize, band: (f64, f64), rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    let (lo, hi) = band;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::Domain(format!("near-surface band [{lo}, {hi}] needs 0 < lo < hi")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let cdf = cumulative_areas(mesh)?;
    let max_attempts = 50 * n + 1000;
    let mut out = Vec::with_capacity(n);
    for _ in 0..max_attempts {
        let (tri, p) = draw_surface_point(mesh, &cdf, rng);
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let q = p + mesh.normal(tri) * (side * rng.random_range(lo..=hi));
        let d = mesh.distance(&q);
        if d >= lo && d <= hi {
            out.push(q);
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(Error::Sampling(format!(
        "only {} of {n} near-surface points accepted after {max_attempts} attempts",
        out.len()
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng_from_seed;

    #[test]
    fn procedural_parts_are_valid_and_low_poly() {
        let h = PartMesh::procedural_hand([0.0; 3], 0.2);
        let f = PartMesh::procedural_face([0.0; 3], 0.25);
        h.validate().unwrap();
        f.validate().unwrap();
        assert_eq!(h.triangles.len(), 568);
        assert_eq!(f.triangles.len(), 504);
    }

    #[test]
    fn obj_round_trip() {
        let h = PartMesh::procedural_hand([0.1, 0.2, 0.3], 0.2);
        let back = PartMesh::from_obj("hand", &h.to_obj()).unwrap();
        assert_eq!(back.triangles, h.triangles);
        for (a, b) in back.vertices.iter().zip(&h.vertices) {
            assert_eq!(a, b);
        }
        assert!(PartMesh::from_obj("x", "v 0 0 0\nf 1 2 3\n").is_err());
        let quad = PartMesh::from_obj("q", "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n").unwrap();
        assert_eq!(quad.triangles.len(), 2);
    }

    #[test]
    fn degenerate_triangles_rejected() {
        assert!(PartMesh::new("d", vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]]).is_err());
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        assert!((point_triangle_distance(&Vec3::new(0.2, 0.2, 0.5), &a, &b, &c) - 0.5).abs() < 1e-15);
        assert!((point_triangle_distance(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c) - 2f64.sqrt()).abs() < 1e-15);
        assert!((point_triangle_distance(&Vec3::new(0.5, -2.0, 0.0), &a, &b, &c) - 2.0).abs() < 1e-15);
        assert!((point_triangle_distance(&Vec3::new(1.0, 1.0, 0.0), &a, &b, &c) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_mesh_and_bad_band_are_errors() {
        let empty = PartMesh { label: "e".into(), vertices: vec![], triangles: vec![] };
        let mut rng = rng_from_seed(0);
        assert!(sample_on_mesh(&empty, 3, &mut rng).is_err());
        let h = PartMesh::procedural_hand([0.0; 3], 0.2);
        assert!(sample_near_mesh(&h, 3, (0.0, 0.05), &mut rng).is_err());
        assert!(sample_near_mesh(&h, 0, (0.002, 0.05), &mut rng).unwrap().is_empty());
    }
}
