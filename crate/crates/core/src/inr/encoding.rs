//! Multiresolution hash encoding of 2-D points in `[0,1]²`.

use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{invalid, Result};

/// Spatial hash primes: `(x·P₀ ⊕ y·P₁) mod T`.
pub const HASH_PRIMES: [u32; 2] = [2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashEncodingConfig {
    pub num_levels: usize,
    pub features_per_level: usize,
    pub table_size_log2: u32,
    pub base_resolution: usize,
    pub finest_resolution: usize,
}

impl Default for HashEncodingConfig {
    fn default() -> Self {
        Self {
            num_levels: 8,
            features_per_level: 2,
            table_size_log2: 16,
            base_resolution: 16,
            finest_resolution: 512,
        }
    }
}

/// Corner slots and bilinear weights of one point at one level.
///
/// `slots` are absolute offsets of the first feature of each corner in the
/// flat table storage, in the order (x,y), (x+1,y), (x,y+1), (x+1,y+1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil<T> {
    pub slots: [u32; 4],
    pub weights: [T; 4],
}

impl HashEncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels < 2 {
            return Err(invalid("num_levels", "need at least 2 levels"));
        }
        if self.features_per_level == 0 {
            return Err(invalid("features_per_level", "must be positive"));
        }
        if !(1..=24).contains(&self.table_size_log2) {
            return Err(invalid(
                "table_size_log2",
                format!("{} outside 1..=24", self.table_size_log2),
            ));
        }
        if self.base_resolution == 0 || self.base_resolution >= self.finest_resolution {
            return Err(invalid(
                "base_resolution",
                format!(
                    "need 0 < N_min < N_max, got {} and {}",
                    self.base_resolution, self.finest_resolution
                ),
            ));
        }
        if self.finest_resolution > 1 << 20 {
            return Err(invalid("finest_resolution", "exceeds 2^20"));
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1 << self.table_size_log2
    }

    /// Per-level growth factor `b`.
    pub fn growth(&self) -> f64 {
        ((self.finest_resolution as f64).ln() - (self.base_resolution as f64).ln())
            / (self.num_levels - 1) as f64
    }

    /// `N_ℓ = floor(N_min·b^ℓ)`.
    pub fn level_resolution(&self, level: usize) -> usize {
        if level + 1 == self.num_levels {
            return self.finest_resolution;
        }
        let n = self.base_resolution as f64 * (self.growth() * level as f64).exp();
        // guard against exp/ln round-off just below an integer
        (n + 1e-9).floor() as usize
    }

    /// Whether the level's `(N+1)²` vertices fit in the table without hashing.
    pub fn level_is_dense(&self, level: usize) -> bool {
        let v = self.level_resolution(level) + 1;
        v * v <= self.table_size()
    }

    /// Number of table entries stored for `level`.
    pub fn level_entries(&self, level: usize) -> usize {
        let v = self.level_resolution(level) + 1;
        (v * v).min(self.table_size())
    }

    pub fn output_dim(&self) -> usize {
        self.num_levels * self.features_per_level
    }

    /// Offset of each level's table in flat storage, plus the total length.
    pub fn level_offsets(&self) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.num_levels);
        let mut total = 0;
        for level in 0..self.num_levels {
            offsets.push(total);
            total += self.level_entries(level) * self.features_per_level;
        }
        (offsets, total)
    }

    /// Table entry of integer vertex `(x, y)` at `level`.
    pub fn vertex_entry(&self, level: usize, x: usize, y: usize) -> usize {
        let n = self.level_resolution(level);
        if self.level_is_dense(level) {
            y * (n + 1) + x
        } else {
            let h =
                (x as u32).wrapping_mul(HASH_PRIMES[0]) ^ (y as u32).wrapping_mul(HASH_PRIMES[1]);
            (h as usize) & (self.table_size() - 1)
        }
    }
}

/// Encoder with precomputed per-level layout.
#[derive(Debug, Clone)]
pub struct HashEncoding {
    cfg: HashEncodingConfig,
    resolutions: Vec<usize>,
    dense: Vec<bool>,
    offsets: Vec<usize>,
    table_len: usize,
}

impl HashEncoding {
    pub fn new(cfg: HashEncodingConfig) -> Result<Self> {
        cfg.validate()?;
        let (offsets, table_len) = cfg.level_offsets();
        if table_len > u32::MAX as usize {
            return Err(invalid("table_size_log2", "tables too large to index"));
        }
        Ok(Self {
            resolutions: (0..cfg.num_levels)
                .map(|l| cfg.level_resolution(l))
                .collect(),
            dense: (0..cfg.num_levels).map(|l| cfg.level_is_dense(l)).collect(),
            offsets,
            table_len,
            cfg,
        })
    }

    pub fn config(&self) -> &HashEncodingConfig {
        &self.cfg
    }

    /// Total number of table scalars across levels.
    pub fn table_len(&self) -> usize {
        self.table_len
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim()
    }

    #[inline]
    fn entry(&self, level: usize, x: usize, y: usize) -> usize {
        if self.dense[level] {
            y * (self.resolutions[level] + 1) + x
        } else {
            let h =
                (x as u32).wrapping_mul(HASH_PRIMES[0]) ^ (y as u32).wrapping_mul(HASH_PRIMES[1]);
            (h as usize) & (self.cfg.table_size() - 1)
        }
    }

    /// Corner slots and blend weights of `(u, v)` at `level`; coordinates are
    /// clamped to `[0,1]`.
    #[inline]
    pub fn stencil<T: Real>(&self, level: usize, u: T, v: T) -> Stencil<T> {
        let n = self.resolutions[level];
        let nf = T::from_usize(n).unwrap();
        let locate = |c: T| {
            let c = c.max(T::zero()).min(T::one()) * nf;
            let cell = c.floor().to_usize().unwrap_or(0).min(n - 1);
            (cell, c - T::from_usize(cell).unwrap())
        };
        let (cx, fx) = locate(u);
        let (cy, fy) = locate(v);
        let f = self.cfg.features_per_level;
        let base = self.offsets[level];
        let slot = |x, y| (base + self.entry(level, x, y) * f) as u32;
        let (gx, gy) = (T::one() - fx, T::one() - fy);
        Stencil {
            slots: [
                slot(cx, cy),
                slot(cx + 1, cy),
                slot(cx, cy + 1),
                slot(cx + 1, cy + 1),
            ],
            weights: [gx * gy, fx * gy, gx * fy, fx * fy],
        }
    }

    /// Encode one point into `out` (length `L·F`), recording the stencils
    /// when `stencils` is given (length `L`).
    pub fn encode_into<T: Real>(
        &self,
        tables: &[T],
        u: T,
        v: T,
        out: &mut [T],
        mut stencils: Option<&mut [Stencil<T>]>,
    ) {
        let f = self.cfg.features_per_level;
        for level in 0..self.cfg.num_levels {
            let st = self.stencil(level, u, v);
            let dst = &mut out[level * f..(level + 1) * f];
            dst.fill(T::zero());
            for (slot, w) in st.slots.iter().zip(st.weights) {
                let src = &tables[*slot as usize..*slot as usize + f];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = *d + w * *s;
                }
            }
            if let Some(s) = stencils.as_deref_mut() {
                s[level] = st;
            }
        }
    }

    /// Scatter `d_features` (gradient w.r.t. one encoded point) into `grad`.
    pub fn backward<T: Real>(&self, stencils: &[Stencil<T>], d_features: &[T], grad: &mut [T]) {
        let f = self.cfg.features_per_level;
        for (level, st) in stencils.iter().enumerate() {
            let d = &d_features[level * f..(level + 1) * f];
            for (slot, w) in st.slots.iter().zip(st.weights) {
                let dst = &mut grad[*slot as usize..*slot as usize + f];
                for (g, di) in dst.iter_mut().zip(d) {
                    *g = *g + w * *di;
                }
            }
        }
    }
}

/// Feature vector of `pt ∈ [0,1]²` given flat `tables`.
pub fn encode<T: Real>(pt: [T; 2], cfg: &HashEncodingConfig, tables: &[T]) -> Result<Vec<T>> {
    let enc = HashEncoding::new(*cfg)?;
    if tables.len() != enc.table_len() {
        return Err(crate::Error::ShapeMismatch(format!(
            "tables have {} entries, encoding needs {}",
            tables.len(),
            enc.table_len()
        )));
    }
    let mut out = vec![T::zero(); enc.output_dim()];
    enc.encode_into(tables, pt[0], pt[1], &mut out, None);
    Ok(out)
}
