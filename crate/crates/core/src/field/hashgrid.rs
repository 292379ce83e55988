use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Spatial-hash primes per axis; the first axis is left unscrambled.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// XOR of coordinate-times-prime products, masked to the table size.
#[inline]
pub fn hash_index(cell: [u32; 3], table_size: usize) -> usize {
    debug_assert!(table_size.is_power_of_two());
    let h = cell[0].wrapping_mul(HASH_PRIMES[0])
        ^ cell[1].wrapping_mul(HASH_PRIMES[1])
        ^ cell[2].wrapping_mul(HASH_PRIMES[2]);
    (h as usize) & (table_size - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub levels: usize,
    /// Coarsest resolution when `levels > 1`.
    pub base_resolution: u32,
    /// Resolution of the finest (or only) level, in cells per axis.
    pub max_resolution: u32,
    pub log2_table_size: u32,
    pub feat_dim: usize,
    pub init_range: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            levels: 1,
            base_resolution: 16,
            max_resolution: 1024,
            log2_table_size: 19,
            feat_dim: 20,
            init_range: 1e-4,
        }
    }
}

impl GridConfig {
    pub fn resolutions(&self) -> Vec<u32> {
        match self.levels {
            0 => vec![],
            1 => vec![self.max_resolution],
            l => {
                let growth = (self.max_resolution as f64 / self.base_resolution as f64)
                    .powf(1.0 / (l - 1) as f64);
                (0..l)
                    .map(|i| {
                        if i == l - 1 {
                            self.max_resolution
                        } else {
                            (self.base_resolution as f64 * growth.powi(i as i32)).floor() as u32
                        }
                    })
                    .collect()
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.feat_dim
    }
}

/// Trilinear corners of one level: 8 table offsets and their weights.
#[derive(Clone, Copy, Debug)]
struct Corners {
    offsets: [usize; 8],
    weights: [f64; 8],
    frac: [f64; 3],
    /// Axis is clamped at the box boundary: no spatial gradient.
    clamped: [bool; 3],
}

/// Single- or multi-level spatial hash table of trainable features over an
/// axis-aligned scene box.
#[derive(Clone, Debug, PartialEq)]
pub struct HashGrid {
    pub resolutions: Vec<u32>,
    pub table_size: usize,
    pub feat_dim: usize,
    /// `levels x table_size x feat_dim`, level-major.
    pub table: Vec<f64>,
    pub aabb_min: Vector3<f64>,
    pub aabb_max: Vector3<f64>,
}

impl HashGrid {
    pub fn new(cfg: &GridConfig, aabb_min: Vector3<f64>, aabb_max: Vector3<f64>, rng: &mut impl Rng) -> Result<Self> {
        let mut grid = Self::zeros(cfg, aabb_min, aabb_max)?;
        let r = cfg.init_range;
        if r > 0.0 {
            grid.table.iter_mut().for_each(|v| *v = rng.random_range(-r..r));
        }
        Ok(grid)
    }

    pub fn zeros(cfg: &GridConfig, aabb_min: Vector3<f64>, aabb_max: Vector3<f64>) -> Result<Self> {
        if cfg.log2_table_size > 30 {
            return Err(Error::Config(format!("hash table 2^{} is too large", cfg.log2_table_size)));
        }
        if (0..3).any(|k| !(aabb_max[k] > aabb_min[k])) {
            return Err(Error::Config("scene box must have positive extent".into()));
        }
        let resolutions = cfg.resolutions();
        if resolutions.iter().any(|&r| r == 0) {
            return Err(Error::Config("grid resolution must be at least 1".into()));
        }
        let table_size = 1usize << cfg.log2_table_size;
        Ok(HashGrid {
            table: vec![0.0; resolutions.len() * table_size * cfg.feat_dim],
            resolutions,
            table_size,
            feat_dim: cfg.feat_dim,
            aabb_min,
            aabb_max,
        })
    }

    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }

    pub fn output_dim(&self) -> usize {
        self.levels() * self.feat_dim
    }

    /// Offset of the feature vector for `cell` at `level` within `table`.
    #[inline]
    pub fn entry_offset(&self, level: usize, cell: [u32; 3]) -> usize {
        (level * self.table_size + hash_index(cell, self.table_size)) * self.feat_dim
    }

    #[inline]
    fn corners(&self, level: usize, x: &Vector3<f64>) -> Corners {
        let res = self.resolutions[level];
        let mut cell = [0u32; 3];
        let mut frac = [0.0; 3];
        let mut clamped = [false; 3];
        for k in 0..3 {
            let lo = self.aabb_min[k];
            let hi = self.aabb_max[k];
            let xk = x[k];
            clamped[k] = !(xk > lo && xk < hi);
            let pos = (xk.clamp(lo, hi) - lo) / (hi - lo) * res as f64;
            let c = (pos.floor() as u32).min(res - 1);
            cell[k] = c;
            frac[k] = pos - c as f64;
        }
        let mut offsets = [0usize; 8];
        let mut weights = [0.0; 8];
        for (corner, (off, w)) in offsets.iter_mut().zip(weights.iter_mut()).enumerate() {
            let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut weight = 1.0;
            let mut c = cell;
            for k in 0..3 {
                if bits[k] == 1 {
                    c[k] += 1;
                    weight *= frac[k];
                } else {
                    weight *= 1.0 - frac[k];
                }
            }
            *off = self.entry_offset(level, c);
            *w = weight;
        }
        Corners {
            offsets,
            weights,
            frac,
            clamped,
        }
    }

    /// Trilinearly interpolated features at `x`, levels concatenated into `out`.
    pub fn sample_into(&self, x: &Vector3<f64>, out: &mut [f64]) {
        let f = self.feat_dim;
        debug_assert_eq!(out.len(), self.output_dim());
        out.iter_mut().for_each(|v| *v = 0.0);
        for level in 0..self.levels() {
            let c = self.corners(level, x);
            let dst = &mut out[level * f..(level + 1) * f];
            for (&off, &w) in c.offsets.iter().zip(&c.weights) {
                let entry = &self.table[off..off + f];
                for (d, &e) in dst.iter_mut().zip(entry) {
                    *d += w * e;
                }
            }
        }
    }

    pub fn sample(&self, x: &Vector3<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.sample_into(x, &mut out);
        out
    }

    /// Accumulates `d out / d table` contracted with `grad_out` into `table_grad`.
    pub fn accumulate_table_grad(&self, x: &Vector3<f64>, grad_out: &[f64], table_grad: &mut [f64]) {
        let f = self.feat_dim;
        for level in 0..self.levels() {
            let c = self.corners(level, x);
            let g = &grad_out[level * f..(level + 1) * f];
            for (&off, &w) in c.offsets.iter().zip(&c.weights) {
                if w == 0.0 {
                    continue;
                }
                for (t, &gi) in table_grad[off..off + f].iter_mut().zip(g) {
                    *t += w * gi;
                }
            }
        }
    }

    /// Gradient of `grad_out . sample(x)` with respect to `x`.
    pub fn spatial_grad(&self, x: &Vector3<f64>, grad_out: &[f64]) -> Vector3<f64> {
        let f = self.feat_dim;
        let mut dx = Vector3::zeros();
        for level in 0..self.levels() {
            let c = self.corners(level, x);
            let g = &grad_out[level * f..(level + 1) * f];
            let res = self.resolutions[level] as f64;
            let mut dfrac = [0.0; 3];
            for (corner, &off) in c.offsets.iter().enumerate() {
                let proj: f64 = self.table[off..off + f].iter().zip(g).map(|(a, b)| a * b).sum();
                if proj == 0.0 {
                    continue;
                }
                let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                for (k, d) in dfrac.iter_mut().enumerate() {
                    let mut w = if bits[k] == 1 { 1.0 } else { -1.0 };
                    for j in 0..3 {
                        if j != k {
                            w *= if bits[j] == 1 { c.frac[j] } else { 1.0 - c.frac[j] };
                        }
                    }
                    *d += w * proj;
                }
            }
            for k in 0..3 {
                if !c.clamped[k] {
                    dx[k] += dfrac[k] * res / (self.aabb_max[k] - self.aabb_min[k]);
                }
            }
        }
        dx
    }

    pub fn validate(&self) -> Result<()> {
        if !self.table_size.is_power_of_two() {
            return Err(Error::Shape(format!("table size {} is not a power of two", self.table_size)));
        }
        if self.table.len() != self.levels() * self.table_size * self.feat_dim {
            return Err(Error::Shape("hash table length disagrees with its dimensions".into()));
        }
        if self.table.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("hash table holds non-finite values".into()));
        }
        Ok(())
    }
}
