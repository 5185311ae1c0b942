//! Multi-resolution hash-grid encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub growth: f64,
    /// Entries per level; must be a power of two.
    pub table_size: usize,
    pub feature_dim: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            base_resolution: 16,
            growth: 1.5,
            table_size: 1 << 14,
            feature_dim: 2,
        }
    }
}

/// Shape of the encoding; the learnable tables live in the owner's flat
/// parameter vector as `levels × table_size × feature_dim` floats.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGridEncoding {
    pub config: HashGridConfig,
    resolutions: Vec<u32>,
}

/// Corner slots and trilinear weights of one encode call, per level.
#[derive(Debug, Clone, Default)]
pub struct EncodeCache {
    slots: Vec<[usize; 8]>,
    weights: Vec<[f64; 8]>,
}

/// Spatial hash of an integer grid vertex, masked to the table size.
#[inline]
pub fn hash_vertex(v: [u32; 3], table_size: usize) -> usize {
    let h = v[0].wrapping_mul(PRIMES[0]) ^ v[1].wrapping_mul(PRIMES[1]) ^ v[2].wrapping_mul(PRIMES[2]);
    (h as usize) & (table_size - 1)
}

impl HashGridEncoding {
    pub fn new(config: HashGridConfig) -> Result<Self> {
        if config.levels == 0 || config.feature_dim == 0 || config.base_resolution == 0 {
            return Err(Error::Config("hash grid needs at least one level, feature and cell".into()));
        }
        if !config.table_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "hash table size {} is not a power of two",
                config.table_size
            )));
        }
        if !(config.growth.is_finite() && config.growth >= 1.0) {
            return Err(Error::Config(format!("growth factor {} must be >= 1", config.growth)));
        }
        let resolutions: Vec<u32> = (0..config.levels)
            .map(|l| (config.base_resolution as f64 * config.growth.powi(l as i32)).floor() as u32)
            .collect();
        if resolutions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "level resolutions must strictly increase, got {resolutions:?}"
            )));
        }
        Ok(Self { config, resolutions })
    }

    pub fn resolutions(&self) -> &[u32] {
        &self.resolutions
    }

    pub fn output_dim(&self) -> usize {
        self.config.levels * self.config.feature_dim
    }

    pub fn table_len(&self) -> usize {
        self.config.levels * self.config.table_size * self.config.feature_dim
    }

    fn check_point(p: [f64; 3]) -> Result<()> {
        if p.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c)) {
            Ok(())
        } else {
            Err(Error::Domain(format!("encode point {p:?} outside the unit cube")))
        }
    }

    /// Encodes `p ∈ [0,1]³` into `out` (length `levels · feature_dim`).
    pub fn encode_into(
        &self,
        tables: &[f64],
        p: [f64; 3],
        out: &mut [f64],
        mut cache: Option<&mut EncodeCache>,
    ) -> Result<()> {
        Self::check_point(p)?;
        let HashGridConfig {
            levels,
            table_size,
            feature_dim: f,
            ..
        } = self.config;
        debug_assert_eq!(tables.len(), self.table_len());
        if let Some(c) = cache.as_deref_mut() {
            c.slots.resize(levels, [0; 8]);
            c.weights.resize(levels, [0.0; 8]);
        }
        out.fill(0.0);
        for (l, &res) in self.resolutions.iter().enumerate() {
            let scale = res as f64;
            let mut base = [0u32; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let x = p[a] * scale;
                let fl = x.floor();
                base[a] = fl as u32;
                frac[a] = x - fl;
            }
            let level_table = &tables[l * table_size * f..(l + 1) * table_size * f];
            let feat = &mut out[l * f..(l + 1) * f];
            let mut slots = [0usize; 8];
            let mut weights = [0.0; 8];
            for k in 0..8 {
                let mut v = base;
                let mut w = 1.0;
                for a in 0..3 {
                    if k >> a & 1 == 1 {
                        v[a] += 1;
                        w *= frac[a];
                    } else {
                        w *= 1.0 - frac[a];
                    }
                }
                let slot = hash_vertex(v, table_size);
                slots[k] = slot;
                weights[k] = w;
                if w != 0.0 {
                    for (o, &t) in feat.iter_mut().zip(&level_table[slot * f..(slot + 1) * f]) {
                        *o += w * t;
                    }
                }
            }
            if let Some(c) = cache.as_deref_mut() {
                c.slots[l] = slots;
                c.weights[l] = weights;
            }
        }
        Ok(())
    }

    pub fn encode(&self, tables: &[f64], p: [f64; 3]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.output_dim()];
        self.encode_into(tables, p, &mut out, None)?;
        Ok(out)
    }

    /// Scatters feature adjoints back onto table entries.
    pub fn backward(&self, cache: &EncodeCache, d_features: &[f64], d_tables: &mut [f64]) {
        let HashGridConfig {
            table_size,
            feature_dim: f,
            ..
        } = self.config;
        for l in 0..self.config.levels {
            let g = &d_features[l * f..(l + 1) * f];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let level = &mut d_tables[l * table_size * f..(l + 1) * table_size * f];
            for k in 0..8 {
                let w = cache.weights[l][k];
                if w == 0.0 {
                    continue;
                }
                let slot = cache.slots[l][k];
                for (d, &gv) in level[slot * f..(slot + 1) * f].iter_mut().zip(g) {
                    *d += w * gv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng_from_seed;
    use rand::Rng;

    fn small() -> HashGridEncoding {
        HashGridEncoding::new(HashGridConfig {
            levels: 3,
            base_resolution: 4,
            growth: 2.0,
            table_size: 1 << 8,
            feature_dim: 2,
        })
        .unwrap()
    }

    #[test]
    fn rejects_non_power_of_two_tables() {
        let cfg = HashGridConfig {
            table_size: 1000,
            ..Default::default()
        };
        assert!(matches!(HashGridEncoding::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_non_increasing_resolutions() {
        let cfg = HashGridConfig {
            growth: 1.01,
            base_resolution: 4,
            ..Default::default()
        };
        assert!(HashGridEncoding::new(cfg).is_err());
    }

    #[test]
    fn default_resolutions_strictly_increase() {
        let enc = HashGridEncoding::new(HashGridConfig::default()).unwrap();
        assert_eq!(enc.resolutions()[0], 16);
        assert!(enc.resolutions().windows(2).all(|w| w[1] > w[0]));
        assert_eq!(enc.output_dim(), 16);
    }

    #[test]
    fn zero_tables_encode_to_zero() {
        let enc = small();
        let tables = vec![0.0; enc.table_len()];
        let out = enc.encode(&tables, [0.31, 0.77, 0.05]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_cube_points_are_domain_errors() {
        let enc = small();
        let tables = vec![0.0; enc.table_len()];
        assert!(matches!(enc.encode(&tables, [1.2, 0.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(enc.encode(&tables, [f64::NAN, 0.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn vertices_interpolate_exactly_on_every_level() {
        let enc = small();
        let mut rng = rng_from_seed(1);
        let tables: Vec<f64> = (0..enc.table_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        // (0.25, 0.5, 0.75) is a vertex of the 4-, 8- and 16-cell grids.
        let p = [0.25, 0.5, 0.75];
        let out = enc.encode(&tables, p).unwrap();
        for (l, &res) in enc.resolutions().iter().enumerate() {
            let v = [(p[0] * res as f64) as u32, (p[1] * res as f64) as u32, (p[2] * res as f64) as u32];
            let slot = hash_vertex(v, 1 << 8);
            let off = (l * 256 + slot) * 2;
            assert_eq!(&out[l * 2..l * 2 + 2], &tables[off..off + 2]);
        }
    }
}
