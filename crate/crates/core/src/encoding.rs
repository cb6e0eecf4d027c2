//! Multiresolution hash encoding of 2D coordinates with coarse-to-fine
//! level masking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{CustomOp, DiffError, InputGrads, Tape, Tensor, Var};
use crate::real::Real;

/// Margin around the unit square covered by every canonical grid.
pub const DOMAIN_MARGIN: f64 = 0.1;

const HASH_PRIME_X: u32 = 1;
const HASH_PRIME_Y: u32 = 2_654_435_761;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("active levels {active} outside [0, {levels}]")]
    ActiveLevels { active: usize, levels: usize },
    #[error("invalid encoding parameters: {0}")]
    Params(String),
}

impl From<EncodingError> for DiffError {
    fn from(e: EncodingError) -> Self {
        DiffError::Other(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingParams {
    pub base_resolution: u32,
    pub per_level_scale: f64,
    pub levels: usize,
    pub features_per_level: usize,
    pub log2_table_size: u32,
}

/// The four encoding sizes used by the application presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncodingSize {
    #[serde(alias = "T", alias = "tiny")]
    Tiny,
    #[serde(alias = "S", alias = "small")]
    Small,
    #[serde(alias = "M", alias = "medium")]
    Medium,
    #[serde(alias = "L", alias = "large")]
    Large,
}

impl EncodingSize {
    pub fn params(self) -> EncodingParams {
        let (levels, log2_table_size) = match self {
            EncodingSize::Tiny => (6, 12),
            EncodingSize::Small => (8, 14),
            EncodingSize::Medium => (12, 16),
            EncodingSize::Large => (16, 18),
        };
        EncodingParams { base_resolution: 4, per_level_scale: 1.61, levels, features_per_level: 4, log2_table_size }
    }

    pub fn letter(self) -> char {
        match self {
            EncodingSize::Tiny => 'T',
            EncodingSize::Small => 'S',
            EncodingSize::Medium => 'M',
            EncodingSize::Large => 'L',
        }
    }
}

impl EncodingParams {
    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.base_resolution < 1 {
            return Err(EncodingError::Params("base resolution must be >= 1".into()));
        }
        if !(self.per_level_scale > 1.0) {
            return Err(EncodingError::Params("per-level scale must exceed 1".into()));
        }
        if self.levels < 1 || self.features_per_level < 1 {
            return Err(EncodingError::Params("levels and features must be >= 1".into()));
        }
        if self.log2_table_size > 30 {
            return Err(EncodingError::Params("table size above 2^30".into()));
        }
        let v0 = (self.base_resolution as u64 + 1).pow(2);
        if v0 > 1u64 << self.log2_table_size {
            return Err(EncodingError::Params(format!(
                "table 2^{} smaller than {v0} level-0 vertices",
                self.log2_table_size
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    /// Grid resolution `floor(B·S^l)` of level `l`.
    pub fn resolution(&self, level: usize) -> u32 {
        (self.base_resolution as f64 * self.per_level_scale.powi(level as i32)).floor() as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Level {
    resolution: u32,
    offset: u32,
    rows: u32,
    dense: bool,
}

impl Level {
    #[inline]
    fn slot(&self, ix: u32, iy: u32, table_mask: u32) -> u32 {
        let local = if self.dense {
            ix + iy * (self.resolution + 1)
        } else {
            (ix.wrapping_mul(HASH_PRIME_X) ^ iy.wrapping_mul(HASH_PRIME_Y)) & table_mask
        };
        self.offset + local
    }
}

/// Feature tables for all levels, stored as one `[rows, F]` tensor.
#[derive(Clone, Debug)]
pub struct HashGrid<T: Real> {
    params: EncodingParams,
    levels: Vec<Level>,
    pub table: Tensor<T>,
}

impl<T: Real> HashGrid<T> {
    /// Tables drawn uniformly from `[−1e-4, 1e-4]`.
    pub fn new(params: EncodingParams, seed: u64) -> Result<Self, EncodingError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_init(params, |_| T::lit(rng.gen_range(-1e-4..=1e-4)))
    }

    pub fn zeros(params: EncodingParams) -> Result<Self, EncodingError> {
        Self::with_init(params, |_| T::zero())
    }

    fn with_init(params: EncodingParams, mut init: impl FnMut(usize) -> T) -> Result<Self, EncodingError> {
        params.validate()?;
        let cap = 1u64 << params.log2_table_size;
        let mut levels = Vec::with_capacity(params.levels);
        let mut offset = 0u64;
        for l in 0..params.levels {
            let resolution = params.resolution(l);
            let verts = (resolution as u64 + 1).pow(2);
            let dense = verts <= cap;
            let rows = verts.min(cap);
            levels.push(Level { resolution, offset: offset as u32, rows: rows as u32, dense });
            offset += rows;
        }
        let f = params.features_per_level;
        let data = (0..offset as usize * f).map(&mut init).collect();
        let table = Tensor::new(vec![offset as usize, f], data).map_err(|e| EncodingError::Params(e.to_string()))?;
        Ok(Self { params, levels, table })
    }

    /// Rebuild around an existing table (checkpoint loading).
    pub fn from_table(params: EncodingParams, table: Tensor<T>) -> Result<Self, EncodingError> {
        let mut grid = Self::zeros(params)?;
        if table.shape() != grid.table.shape() {
            return Err(EncodingError::Params(format!(
                "table shape {:?} does not match {:?}",
                table.shape(),
                grid.table.shape()
            )));
        }
        grid.table = table;
        Ok(grid)
    }

    pub fn params(&self) -> &EncodingParams {
        &self.params
    }

    pub fn output_dim(&self) -> usize {
        self.params.output_dim()
    }

    pub fn level_resolution(&self, level: usize) -> u32 {
        self.levels[level].resolution
    }

    pub fn level_is_dense(&self, level: usize) -> bool {
        self.levels[level].dense
    }

    /// Table row holding vertex `(ix, iy)` of `level`.
    pub fn vertex_row(&self, level: usize, ix: u32, iy: u32) -> u32 {
        self.levels[level].slot(ix, iy, self.table_mask())
    }

    fn table_mask(&self) -> u32 {
        ((1u64 << self.params.log2_table_size) - 1) as u32
    }

    /// Plain forward evaluation for `coords` given as `[x0, y0, x1, y1, ...]`.
    pub fn encode(&self, coords: &[T], active_levels: usize) -> Result<Vec<T>, EncodingError> {
        Ok(self.encode_cached(self.table.data(), coords, active_levels)?.0)
    }

    fn encode_cached(
        &self,
        table: &[T],
        coords: &[T],
        active: usize,
    ) -> Result<(Vec<T>, EncodeCache<T>), EncodingError> {
        let levels = self.params.levels;
        if active > levels {
            return Err(EncodingError::ActiveLevels { active, levels });
        }
        let n = coords.len() / 2;
        let f = self.params.features_per_level;
        let width = levels * f;
        let mask = self.table_mask();
        let m = T::lit(DOMAIN_MARGIN);
        let lo = -m;
        let hi = T::one() + m;
        let extent = T::one() + m + m;
        let mut out = vec![T::zero(); n * width];
        let mut cache = EncodeCache {
            active,
            rows: Vec::with_capacity(n * active * 4),
            frac: Vec::with_capacity(n * active * 2),
            inside: Vec::with_capacity(n * 2),
        };
        for r in 0..n {
            let (x, y) = (coords[2 * r], coords[2 * r + 1]);
            cache.inside.push(x >= lo && x <= hi);
            cache.inside.push(y >= lo && y <= hi);
            let sx = (x.max(lo).min(hi) - lo) / extent;
            let sy = (y.max(lo).min(hi) - lo) / extent;
            let o = &mut out[r * width..(r + 1) * width];
            for (l, lv) in self.levels.iter().enumerate().take(active) {
                let res = T::lit(lv.resolution as f64);
                let (px, py) = (sx * res, sy * res);
                let ix = px.floor().to_u32().unwrap_or(0).min(lv.resolution - 1);
                let iy = py.floor().to_u32().unwrap_or(0).min(lv.resolution - 1);
                let fx = px - T::lit(ix as f64);
                let fy = py - T::lit(iy as f64);
                let rows = [
                    lv.slot(ix, iy, mask),
                    lv.slot(ix + 1, iy, mask),
                    lv.slot(ix, iy + 1, mask),
                    lv.slot(ix + 1, iy + 1, mask),
                ];
                let w = corner_weights(fx, fy);
                let dst = &mut o[l * f..(l + 1) * f];
                for k in 0..4 {
                    let src = &table[rows[k] as usize * f..(rows[k] as usize + 1) * f];
                    for c in 0..f {
                        dst[c] += w[k] * src[c];
                    }
                }
                cache.rows.extend_from_slice(&rows);
                cache.frac.push(fx);
                cache.frac.push(fy);
            }
        }
        Ok((out, cache))
    }
}

#[inline]
fn corner_weights<T: Real>(fx: T, fy: T) -> [T; 4] {
    let (gx, gy) = (T::one() - fx, T::one() - fy);
    [gx * gy, fx * gy, gx * fy, fx * fy]
}

struct EncodeCache<T> {
    active: usize,
    rows: Vec<u32>,
    frac: Vec<T>,
    inside: Vec<bool>,
}

struct HashEncodeOp<T: Real> {
    cache: EncodeCache<T>,
    features: usize,
    levels: usize,
    /// d(grid position)/d(coordinate) for each level.
    coord_scale: Vec<T>,
}

impl<T: Real> CustomOp<T> for HashEncodeOp<T> {
    fn name(&self) -> &'static str {
        "hash_encode"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &[T], grads: &mut InputGrads<T>) {
        let f = self.features;
        let width = self.levels * f;
        let active = self.cache.active;
        let n = inputs[1].rows();
        if active == 0 {
            return;
        }
        if grads.needs(0) {
            let mut values = Vec::with_capacity(self.cache.rows.len() * f);
            for r in 0..n {
                for l in 0..active {
                    let k0 = r * active + l;
                    let w = corner_weights(self.cache.frac[2 * k0], self.cache.frac[2 * k0 + 1]);
                    let gl = &g[r * width + l * f..r * width + (l + 1) * f];
                    for wk in w {
                        values.extend(gl.iter().map(|&x| x * wk));
                    }
                }
            }
            grads.add_rows(0, f, self.cache.rows.clone(), values);
        }
        if grads.needs(1) {
            let table = inputs[0].data();
            let Some(dc) = grads.dense(1) else { return };
            for r in 0..n {
                let (in_x, in_y) = (self.cache.inside[2 * r], self.cache.inside[2 * r + 1]);
                if !in_x && !in_y {
                    continue;
                }
                let (mut gx, mut gy) = (T::zero(), T::zero());
                for l in 0..active {
                    let k0 = r * active + l;
                    let (fx, fy) = (self.cache.frac[2 * k0], self.cache.frac[2 * k0 + 1]);
                    let rows = &self.cache.rows[4 * k0..4 * k0 + 4];
                    let gl = &g[r * width + l * f..r * width + (l + 1) * f];
                    // dw/dfx and dw/dfy for the four corners
                    let dwx = [-(T::one() - fy), T::one() - fy, -fy, fy];
                    let dwy = [-(T::one() - fx), -fx, T::one() - fx, fx];
                    let (mut sx, mut sy) = (T::zero(), T::zero());
                    for k in 0..4 {
                        let src = &table[rows[k] as usize * f..(rows[k] as usize + 1) * f];
                        let dot: T = src.iter().zip(gl).map(|(&a, &b)| a * b).sum();
                        sx += dwx[k] * dot;
                        sy += dwy[k] * dot;
                    }
                    gx += sx * self.coord_scale[l];
                    gy += sy * self.coord_scale[l];
                }
                if in_x {
                    dc[2 * r] += gx;
                }
                if in_y {
                    dc[2 * r + 1] += gy;
                }
            }
        }
    }
}

/// Differentiable encoding of `coords` (`[N, 2]`) against the table variable
/// bound for `grid`. Levels at or above `active_levels` output zeros and
/// receive no gradient.
pub fn hash_encode_op<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    grid: &HashGrid<T>,
    table: Var,
    coords: Var,
    active_levels: usize,
) -> Result<Var, DiffError> {
    let cv = tape.value(coords);
    if cv.cols() != 2 {
        return Err(DiffError::Shape { op: "hash_encode", shapes: vec![cv.shape().to_vec(), vec![0, 2]] });
    }
    let tv = tape.value(table);
    if tv.shape() != grid.table.shape() {
        return Err(DiffError::Shape {
            op: "hash_encode",
            shapes: vec![tv.shape().to_vec(), grid.table.shape().to_vec()],
        });
    }
    let n = cv.rows();
    let (out, cache) = grid.encode_cached(tv.data(), cv.data(), active_levels)?;
    let extent = 1.0 + 2.0 * DOMAIN_MARGIN;
    let coord_scale = grid.levels.iter().map(|lv| T::lit(lv.resolution as f64 / extent)).collect();
    let out = Tensor::new(vec![n, grid.output_dim()], out)?;
    let op = HashEncodeOp { cache, features: grid.params.features_per_level, levels: grid.params.levels, coord_scale };
    Ok(tape.custom(&[table, coords], out, Box::new(op)))
}

/// Number of active levels at `epoch` of `max_epoch`: levels `i` with
/// `i / levels < 0.4 + 0.6·sin(π/2 · epoch / max_epoch)`.
pub fn coarse_mask(epoch: usize, max_epoch: usize, levels: usize) -> usize {
    let progress = if max_epoch == 0 { 1.0 } else { (epoch.min(max_epoch)) as f64 / max_epoch as f64 };
    let threshold = 0.4 + 0.6 * (std::f64::consts::FRAC_PI_2 * progress).sin();
    if epoch >= max_epoch {
        return levels;
    }
    (0..levels).filter(|&i| (i as f64) / (levels as f64) < threshold).count()
}
