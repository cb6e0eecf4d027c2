//! Images, bursts, bundle I/O, the procedural synthetic generator and
//! display tonemapping.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{Intrinsics, Plane};
use crate::spline::{SplineMode, SplineTrack};

pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("missing metadata field '{0}'")]
    MissingField(String),
    #[error("unsupported bundle version {0}")]
    Version(u32),
    #[error("truncated frame {path}: expected {expected} bytes, found {found}")]
    TruncatedFrame { path: PathBuf, expected: usize, found: usize },
    #[error("frame {path}: expected {expected} bytes, found {found}")]
    FrameSize { path: PathBuf, expected: usize, found: usize },
    #[error("invalid burst: {0}")]
    Invalid(String),
    #[error("image buffer of {got} values does not match {width}x{height}x{channels}")]
    ImageSize { width: usize, height: usize, channels: usize, got: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Png(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Row-major, channel-interleaved float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self, DataError> {
        if data.len() != width * height * channels || width == 0 || height == 0 || channels == 0 {
            return Err(DataError::ImageSize { width, height, channels, got: data.len() });
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear read at normalized `(u, v)`, pixel centers at
    /// `((x + 0.5)/W, (y + 0.5)/H)`, clamped to the border.
    pub fn bilinear(&self, u: f64, v: f64, out: &mut [f32]) {
        let px = (u * self.width as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
        let py = (v * self.height as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (px.floor() as usize, py.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = ((px - x0 as f64) as f32, (py - y0 as f64) as f32);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
            let bot = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
            *o = top * (1.0 - fy) + bot * fy;
        }
    }

    /// Rec. 709 luma for 3-channel images; the single channel otherwise.
    pub fn luminance(&self) -> Vec<f64> {
        match self.channels {
            3 => self
                .data
                .chunks_exact(3)
                .map(|p| 0.2126 * p[0] as f64 + 0.7152 * p[1] as f64 + 0.0722 * p[2] as f64)
                .collect(),
            _ => self.data.iter().step_by(self.channels).map(|&x| x as f64).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, self.channels, |x, y, c| self.get(self.width - 1 - x, y, c))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image { data: self.data.iter().map(|&x| f(x)).collect(), ..self.clone() }
    }

    fn write_raw(&self, path: &Path) -> Result<(), DataError> {
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(path, bytes).map_err(io_err(path))
    }

    fn read_raw(path: &Path, width: usize, height: usize, channels: usize) -> Result<Image, DataError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let expected = width * height * channels * 4;
        if bytes.len() < expected {
            return Err(DataError::TruncatedFrame { path: path.to_path_buf(), expected, found: bytes.len() });
        }
        if bytes.len() != expected {
            return Err(DataError::FrameSize { path: path.to_path_buf(), expected, found: bytes.len() });
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Image::new(width, height, channels, data)
    }

    /// 16-bit PNG after [`tonemap`] with `gamma`. One- and three-channel
    /// images only.
    pub fn save_png(&self, path: &Path, gamma: f64) -> Result<(), DataError> {
        let mapped = tonemap(self, gamma);
        let px: Vec<u16> = mapped.data.iter().map(|&x| (x as f64 * 65535.0).round() as u16).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, px).map(|b| b.save(path)),
            3 => image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w, h, px).map(|b| b.save(path)),
            c => return Err(DataError::Png(format!("cannot write {c}-channel image as PNG"))),
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(DataError::Png(format!("{}: {e}", path.display()))),
            None => Err(DataError::Png("buffer size mismatch".into())),
        }
    }

    /// Loads an 8- or 16-bit PNG as values in `[0, 1]`, keeping one channel
    /// for grayscale inputs and three otherwise.
    pub fn load_png(path: &Path) -> Result<Image, DataError> {
        let img = image::open(path).map_err(|e| DataError::Png(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().channel_count() <= 2 {
            let buf = img.to_luma16();
            Image::new(w, h, 1, buf.into_raw().into_iter().map(|x| x as f32 / 65535.0).collect())
        } else {
            let buf = img.to_rgb16();
            Image::new(w, h, 3, buf.into_raw().into_iter().map(|x| x as f32 / 65535.0).collect())
        }
    }
}

/// Clamp to `[0, 1]` then raise to `1/gamma`.
pub fn tonemap(image: &Image, gamma: f64) -> Image {
    let inv = (1.0 / gamma) as f32;
    image.map(|x| {
        let c = x.clamp(0.0, 1.0);
        if inv == 1.0 {
            c
        } else {
            c.powf(inv)
        }
    })
}

/// Canonical ground truth for synthetic bursts.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub transmission: Image,
    pub obstruction: Option<Image>,
    pub alpha: Option<Image>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Burst {
    pub frames: Vec<Image>,
    pub timestamps: Vec<f64>,
    pub intrinsics: Intrinsics,
    /// Row-major 3×3 per frame.
    pub device_rotations: Vec<[f64; 9]>,
    pub ground_truth: Option<GroundTruth>,
}

const IDENTITY9: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

impl Burst {
    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.frames.len();
        if n == 0 {
            return Err(DataError::Invalid("burst has no frames".into()));
        }
        if self.timestamps.len() != n {
            return Err(DataError::Invalid(format!("{} timestamps for {n} frames", self.timestamps.len())));
        }
        if self.device_rotations.len() != n {
            return Err(DataError::Invalid(format!("{} device rotations for {n} frames", self.device_rotations.len())));
        }
        if self.timestamps[0] != 0.0 || (n > 1 && self.timestamps[n - 1] != 1.0) {
            return Err(DataError::Invalid("timestamps must start at 0 and end at 1".into()));
        }
        if let Some(i) = (1..n).find(|&i| !(self.timestamps[i] > self.timestamps[i - 1])) {
            return Err(DataError::Invalid(format!("timestamps not strictly increasing at frame {i}")));
        }
        let (w, h) = (self.width(), self.height());
        for (i, f) in self.frames.iter().enumerate() {
            if f.width() != w || f.height() != h || f.channels() != 3 {
                return Err(DataError::Invalid(format!("frame {i} has mismatched size")));
            }
            if let Some(x) = f.data().iter().find(|x| !(x.is_finite() && (0.0..=1.0).contains(*x))) {
                return Err(DataError::Invalid(format!("frame {i} has pixel {x} outside [0, 1]")));
            }
        }
        self.intrinsics.validate().map_err(|e| DataError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Frames at `indices` with timestamps renormalized to `[0, 1]`.
    pub fn subset(&self, indices: &[usize]) -> Result<Burst, DataError> {
        if indices.is_empty() {
            return Err(DataError::Invalid("empty frame subset".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.frames.len()) {
            return Err(DataError::Invalid(format!("frame index {bad} out of range")));
        }
        let t0 = self.timestamps[indices[0]];
        let span = self.timestamps[*indices.last().expect("non-empty")] - t0;
        let timestamps = indices
            .iter()
            .map(|&i| if span > 0.0 { (self.timestamps[i] - t0) / span } else { 0.0 })
            .collect();
        let out = Burst {
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            timestamps,
            intrinsics: self.intrinsics,
            device_rotations: indices.iter().map(|&i| self.device_rotations[i]).collect(),
            ground_truth: self.ground_truth.clone(),
        };
        out.validate()?;
        Ok(out)
    }
}

/// Evenly spaced timestamps on `[0, 1]`.
pub fn uniform_timestamps(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

#[derive(Serialize, Deserialize)]
struct GroundTruthMeta {
    transmission: String,
    #[serde(default)]
    obstruction: Option<String>,
    #[serde(default)]
    alpha: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    version: u32,
    width: usize,
    height: usize,
    frame_count: usize,
    timestamps: Vec<f64>,
    intrinsics: Vec<f64>,
    device_rotations: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<GroundTruthMeta>,
}

const REQUIRED_FIELDS: [&str; 7] =
    ["version", "width", "height", "frame_count", "timestamps", "intrinsics", "device_rotations"];

fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("frames").join(format!("frame_{i:04}.f32"))
}

pub fn save_bundle(burst: &Burst, dir: &Path) -> Result<(), DataError> {
    burst.validate()?;
    fs::create_dir_all(dir.join("frames")).map_err(io_err(dir))?;
    for (i, f) in burst.frames.iter().enumerate() {
        f.write_raw(&frame_path(dir, i))?;
    }
    let ground_truth = match &burst.ground_truth {
        Some(gt) => {
            gt.transmission.write_raw(&dir.join("gt_transmission.f32"))?;
            let mut meta = GroundTruthMeta { transmission: "gt_transmission.f32".into(), obstruction: None, alpha: None };
            if let Some(o) = &gt.obstruction {
                o.write_raw(&dir.join("gt_obstruction.f32"))?;
                meta.obstruction = Some("gt_obstruction.f32".into());
            }
            if let Some(a) = &gt.alpha {
                a.write_raw(&dir.join("gt_alpha.f32"))?;
                meta.alpha = Some("gt_alpha.f32".into());
            }
            Some(meta)
        }
        None => None,
    };
    let meta = BundleMeta {
        version: BUNDLE_VERSION,
        width: burst.width(),
        height: burst.height(),
        frame_count: burst.frame_count(),
        timestamps: burst.timestamps.clone(),
        intrinsics: burst.intrinsics.row_major().to_vec(),
        device_rotations: burst.device_rotations.iter().map(|r| r.to_vec()).collect(),
        ground_truth,
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| DataError::Metadata(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn load_bundle(dir: &Path) -> Result<Burst, DataError> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::Metadata(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| DataError::Metadata("meta.json is not an object".into()))?;
    if let Some(missing) = REQUIRED_FIELDS.iter().find(|k| !obj.contains_key(**k)) {
        return Err(DataError::MissingField(missing.to_string()));
    }
    let version = obj["version"].as_u64().ok_or_else(|| DataError::Metadata("field 'version' is not an integer".into()))?;
    if version != BUNDLE_VERSION as u64 {
        return Err(DataError::Version(version as u32));
    }
    let meta: BundleMeta = serde_json::from_value(value).map_err(|e| DataError::Metadata(e.to_string()))?;
    if meta.timestamps.len() != meta.frame_count {
        return Err(DataError::Metadata("field 'timestamps' length does not match frame_count".into()));
    }
    if meta.device_rotations.len() != meta.frame_count || meta.device_rotations.iter().any(|r| r.len() != 9) {
        return Err(DataError::Metadata("field 'device_rotations' must hold frame_count × 9 reals".into()));
    }
    let intrinsics =
        Intrinsics::from_row_major(&meta.intrinsics).map_err(|e| DataError::Metadata(format!("field 'intrinsics': {e}")))?;
    let (w, h) = (meta.width, meta.height);
    let frames = (0..meta.frame_count)
        .map(|i| Image::read_raw(&frame_path(dir, i), w, h, 3))
        .collect::<Result<Vec<_>, _>>()?;
    let ground_truth = match &meta.ground_truth {
        Some(g) => Some(GroundTruth {
            transmission: Image::read_raw(&dir.join(&g.transmission), w, h, 3)?,
            obstruction: g.obstruction.as_ref().map(|p| Image::read_raw(&dir.join(p), w, h, 3)).transpose()?,
            alpha: g.alpha.as_ref().map(|p| Image::read_raw(&dir.join(p), w, h, 1)).transpose()?,
        }),
        None => None,
    };
    let burst = Burst {
        frames,
        timestamps: meta.timestamps,
        intrinsics,
        device_rotations: meta.device_rotations.iter().map(|r| r.as_slice().try_into().expect("checked length")).collect(),
        ground_truth,
    };
    burst.validate()?;
    Ok(burst)
}

/// Procedural color texture over field coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Constant { color: [f64; 3] },
    /// Linear ramp between two colors along `angle` (radians).
    Gradient { from: [f64; 3], to: [f64; 3], angle: f64 },
    Checker { cells: usize, a: [f64; 3], b: [f64; 3] },
    /// Seeded value noise: `octaves` octaves starting at `frequency` cells
    /// across the unit square, mapped to `mean ± contrast` per channel.
    Noise { octaves: usize, frequency: f64, mean: [f64; 3], contrast: f64, seed: u64 },
    /// Sum of sinusoids per channel.
    Waves { frequency: f64, mean: [f64; 3], contrast: f64, seed: u64 },
}

/// Procedural alpha matte over obstruction-plane field coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaPattern {
    Constant { value: f64 },
    /// `count` vertical bars per unit, each covering `coverage` of its period.
    Bars { count: usize, coverage: f64, softness: f64 },
    Grid { count: usize, coverage: f64, softness: f64 },
    Blob { center: [f64; 2], radius: f64, softness: f64 },
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    if e1 <= e0 {
        return if x >= e0 { 1.0 } else { 0.0 };
    }
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn lattice(seed: u64, ix: i64, iy: i64, c: u64) -> f64 {
    let mut h = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ c.wrapping_mul(0x1656_67B1_9E37_79F9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn value_noise(seed: u64, x: f64, y: f64, c: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let (sx, sy) = (smoothstep(0.0, 1.0, x - fx), smoothstep(0.0, 1.0, y - fy));
    let a = lattice(seed, ix, iy, c);
    let b = lattice(seed, ix + 1, iy, c);
    let d = lattice(seed, ix, iy + 1, c);
    let e = lattice(seed, ix + 1, iy + 1, c);
    let top = a + (b - a) * sx;
    let bot = d + (e - d) * sx;
    top + (bot - top) * sy
}

fn periodic_mask(x: f64, count: usize, coverage: f64, softness: f64) -> f64 {
    let p = (x * count as f64).rem_euclid(1.0);
    let s = softness * count as f64;
    let lo = 0.5 - coverage / 2.0;
    let hi = 0.5 + coverage / 2.0;
    smoothstep(lo - s / 2.0, lo + s / 2.0, p) * (1.0 - smoothstep(hi - s / 2.0, hi + s / 2.0, p))
}

impl Texture {
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let clamp = |c: [f64; 3]| c.map(|v| v.clamp(0.0, 1.0));
        match self {
            Texture::Constant { color } => clamp(*color),
            Texture::Gradient { from, to, angle } => {
                let s = ((x - 0.5) * angle.cos() + (y - 0.5) * angle.sin() + 0.5).clamp(0.0, 1.0);
                clamp([0, 1, 2].map(|c| from[c] + (to[c] - from[c]) * s))
            }
            Texture::Checker { cells, a, b } => {
                let n = *cells as f64;
                let parity = ((x * n).floor() as i64 + (y * n).floor() as i64).rem_euclid(2);
                clamp(if parity == 0 { *a } else { *b })
            }
            Texture::Noise { octaves, frequency, mean, contrast, seed } => {
                let mut out = [0.0; 3];
                for (c, o) in out.iter_mut().enumerate() {
                    let (mut f, mut amp, mut acc, mut norm) = (*frequency, 1.0, 0.0, 0.0);
                    for k in 0..(*octaves).max(1) {
                        acc += amp * value_noise(seed.wrapping_add(k as u64 * 7919), x * f, y * f, c as u64);
                        norm += amp;
                        f *= 2.0;
                        amp *= 0.5;
                    }
                    *o = mean[c] + contrast * acc / norm;
                }
                clamp(out)
            }
            Texture::Waves { frequency, mean, contrast, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut out = [0.0; 3];
                for (c, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for _ in 0..3 {
                        let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        let f: f64 = frequency * rng.gen_range(0.5..1.0);
                        let ph: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        acc += (std::f64::consts::TAU * f * (x * ang.cos() + y * ang.sin()) + ph).sin();
                    }
                    *o = mean[c] + contrast * acc / 3.0;
                }
                clamp(out)
            }
        }
    }
}

impl AlphaPattern {
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let a = match self {
            AlphaPattern::Constant { value } => *value,
            AlphaPattern::Bars { count, coverage, softness } => periodic_mask(x, *count, *coverage, *softness),
            AlphaPattern::Grid { count, coverage, softness } => {
                let gx = periodic_mask(x, *count, *coverage, *softness);
                let gy = periodic_mask(y, *count, *coverage, *softness);
                gx.max(gy)
            }
            AlphaPattern::Blob { center, radius, softness } => {
                let d = ((x - center[0]).powi(2) + (y - center[1]).powi(2)).sqrt();
                1.0 - smoothstep(radius - softness / 2.0, radius + softness / 2.0, d)
            }
        };
        a.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthObstruction {
    pub texture: Texture,
    pub alpha: AlphaPattern,
    #[serde(default = "default_ob_depth")]
    pub depth: f64,
}

fn default_ob_depth() -> f64 {
    0.5
}

fn default_tr_depth() -> f64 {
    1.0
}

fn default_knots() -> usize {
    6
}

fn default_intrinsics() -> Intrinsics {
    Intrinsics::identity()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub transmission: Texture,
    #[serde(default = "default_tr_depth")]
    pub transmission_depth: f64,
    #[serde(default)]
    pub obstruction: Option<SynthObstruction>,
    /// Largest lateral camera displacement between any two frames.
    #[serde(default)]
    pub translation_amplitude: f64,
    /// Largest rotation angle (radians) relative to the first frame.
    #[serde(default)]
    pub rotation_amplitude: f64,
    #[serde(default = "default_knots")]
    pub shake_knots: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_intrinsics")]
    pub intrinsics: Intrinsics,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Invalid(m.to_string()));
        if self.width == 0 || self.height == 0 || self.frame_count == 0 {
            return bad("resolution and frame count must be positive");
        }
        if !(self.transmission_depth > 0.0) {
            return bad("transmission depth must be positive");
        }
        if let Some(ob) = &self.obstruction {
            if !(ob.depth > 0.0) || ob.depth == self.transmission_depth {
                return bad("obstruction depth must be positive and differ from the transmission depth");
            }
        }
        if !(self.translation_amplitude >= 0.0 && self.rotation_amplitude >= 0.0 && self.noise_sigma >= 0.0) {
            return bad("amplitudes and noise must be non-negative");
        }
        if self.shake_knots < 2 {
            return bad("shake needs at least 2 knots");
        }
        self.intrinsics.validate().map_err(|e| DataError::Invalid(e.to_string()))
    }
}

/// Ground-truth camera trajectory of a synthetic burst.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub translations: Vec<[f64; 3]>,
    pub rotations: Vec<Matrix3<f64>>,
}

fn shake_track(rng: &mut ChaCha8Rng, knots: usize) -> SplineTrack<f64> {
    let pts = (0..knots * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SplineTrack::new(pts, knots, 3, SplineMode::CubicHermite).expect("valid layout")
}

/// Smooth random trajectory with the first frame at the identity pose.
pub fn shake_trajectory(spec: &SynthSpec, timestamps: &[f64]) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_5A4E);
    let tr = shake_track(&mut rng, spec.shake_knots);
    let rot = shake_track(&mut rng, spec.shake_knots);
    let at = |track: &SplineTrack<f64>, t: f64| {
        let v = track.eval(t).expect("t in range");
        let z = track.eval(timestamps[0]).expect("t in range");
        Vector3::new(v[0] - z[0], v[1] - z[1], v[2] - z[2])
    };
    let raw_t: Vec<Vector3<f64>> = timestamps.iter().map(|&t| at(&tr, t)).collect();
    let raw_r: Vec<Vector3<f64>> = timestamps.iter().map(|&t| at(&rot, t)).collect();
    let mut spread = 0.0f64;
    for a in &raw_t {
        for b in &raw_t {
            spread = spread.max(((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt());
        }
    }
    let t_scale = if spread > 0.0 { spec.translation_amplitude / spread } else { 0.0 };
    let max_angle = raw_r.iter().map(|r| r.norm()).fold(0.0, f64::max);
    let r_scale = if max_angle > 0.0 { spec.rotation_amplitude / max_angle } else { 0.0 };
    Trajectory {
        translations: raw_t.iter().map(|v| [v.x * t_scale, v.y * t_scale, 0.1 * v.z * t_scale]).collect(),
        rotations: raw_r
            .iter()
            .map(|r| UnitQuaternion::from_scaled_axis(r * r_scale).to_rotation_matrix().into_inner())
            .collect(),
    }
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
}

/// Field coordinates where the ray through `(u, v)` meets a fronto plane.
fn field_hit(k: &Intrinsics, kinv: &Matrix3<f64>, o: &[f64; 3], r: &Matrix3<f64>, u: f64, v: f64, depth: f64) -> (f64, f64) {
    let d = r * (kinv * Vector3::new(u, v, 1.0));
    let d = [d.x / d.z, d.y / d.z, 1.0];
    let (pu, pv) = crate::camera::project_plane(*o, d, &Plane::fronto(depth)).expect("camera in front of plane");
    k.plane_to_field(pu, pv)
}

/// Renders a burst by evaluating the two-plane model under a random shake.
pub fn synth_burst(spec: &SynthSpec) -> Result<(Burst, Trajectory), DataError> {
    spec.validate()?;
    let (w, h, n) = (spec.width, spec.height, spec.frame_count);
    let timestamps = uniform_timestamps(n);
    let traj = shake_trajectory(spec, &timestamps);
    let k = spec.intrinsics;
    let kinv = k.inverse();
    let pixel = |x: usize, y: usize| ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
    let frames: Vec<Image> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (o, r) = (traj.translations[i], traj.rotations[i]);
            let mut data = Vec::with_capacity(w * h * 3);
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = pixel(x, y);
                    let (tx, ty) = field_hit(&k, &kinv, &o, &r, u, v, spec.transmission_depth);
                    let mut c = spec.transmission.sample(tx, ty);
                    if let Some(ob) = &spec.obstruction {
                        let (ox, oy) = field_hit(&k, &kinv, &o, &r, u, v, ob.depth);
                        let a = ob.alpha.sample(ox, oy);
                        let co = ob.texture.sample(ox, oy);
                        for ch in 0..3 {
                            c[ch] += a * (co[ch] - c[ch]);
                        }
                    }
                    data.extend(c.iter().map(|&v| v as f32));
                }
            }
            Image::new(w, h, 3, data).expect("frame size")
        })
        .collect();
    let mut frames = frames;
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| DataError::Invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x0015_E5EE);
        for f in &mut frames {
            for p in f.data_mut() {
                *p = (*p as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let ground_truth = GroundTruth {
        transmission: Image::from_fn(w, h, 3, |x, y, c| {
            let (u, v) = pixel(x, y);
            spec.transmission.sample(u, v)[c] as f32
        }),
        obstruction: spec.obstruction.as_ref().map(|ob| {
            Image::from_fn(w, h, 3, |x, y, c| {
                let (u, v) = pixel(x, y);
                ob.texture.sample(u, v)[c] as f32
            })
        }),
        alpha: spec.obstruction.as_ref().map(|ob| {
            Image::from_fn(w, h, 1, |x, y, _| {
                let (u, v) = pixel(x, y);
                ob.alpha.sample(u, v) as f32
            })
        }),
    };
    let burst = Burst {
        frames,
        timestamps,
        intrinsics: k,
        device_rotations: traj.rotations.iter().map(row_major).collect(),
        ground_truth: Some(ground_truth),
    };
    burst.validate()?;
    Ok((burst, traj))
}

pub fn identity_rotations(n: usize) -> Vec<[f64; 9]> {
    vec![IDENTITY9; n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            width: 24,
            height: 16,
            frame_count: 5,
            transmission: Texture::Noise { octaves: 3, frequency: 4.0, mean: [0.5, 0.4, 0.6], contrast: 0.3, seed: 1 },
            transmission_depth: 1.0,
            obstruction: Some(SynthObstruction {
                texture: Texture::Constant { color: [0.9, 0.8, 0.1] },
                alpha: AlphaPattern::Bars { count: 4, coverage: 0.25, softness: 0.01 },
                depth: 0.5,
            }),
            translation_amplitude: 0.02,
            rotation_amplitude: 0.0,
            shake_knots: 6,
            noise_sigma: 0.0,
            seed: 3,
            intrinsics: Intrinsics::identity(),
        }
    }

    #[test]
    fn tonemap_examples() {
        let img = Image::new(3, 1, 1, vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(tonemap(&img, 2.0).data(), &[0.0, 0.5, 1.0]);
        let img = Image::new(2, 1, 1, vec![-0.5, 0.3]).unwrap();
        assert_eq!(tonemap(&img, 1.0).data(), &[0.0, 0.3]);
        for g in [0.5, 1.0, 2.2, 4.0] {
            let img = Image::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
            assert_eq!(tonemap(&img, g).data(), &[0.0, 1.0]);
        }
    }

    #[test]
    fn bilinear_at_centers_is_exact() {
        let img = Image::from_fn(5, 4, 3, |x, y, c| (x * 13 + y * 7 + c) as f32 / 50.0);
        let mut out = [0.0f32; 3];
        for y in 0..4 {
            for x in 0..5 {
                img.bilinear((x as f64 + 0.5) / 5.0, (y as f64 + 0.5) / 4.0, &mut out);
                for c in 0..3 {
                    assert_eq!(out[c], img.get(x, y, c));
                }
            }
        }
    }

    #[test]
    fn bundle_round_trip() {
        let (burst, _) = synth_burst(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&burst, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back, burst);
        for (a, b) in back.frames.iter().zip(&burst.frames) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn missing_intrinsics_is_named() {
        let (burst, _) = synth_burst(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&burst, dir.path()).unwrap();
        let path = dir.path().join("meta.json");
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("intrinsics");
        fs::write(&path, v.to_string()).unwrap();
        let err = load_bundle(dir.path()).unwrap_err();
        assert!(err.to_string().contains("intrinsics"), "{err}");
    }

    #[test]
    fn truncated_frame_and_bad_version() {
        let (burst, _) = synth_burst(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&burst, dir.path()).unwrap();
        let f = frame_path(dir.path(), 2);
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(DataError::TruncatedFrame { .. })));
        fs::write(&f, &bytes).unwrap();
        let path = dir.path().join("meta.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 7");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(DataError::Version(7))));
    }

    #[test]
    fn static_noiseless_frames_identical() {
        let mut s = spec();
        s.translation_amplitude = 0.0;
        let (burst, _) = synth_burst(&s).unwrap();
        for f in &burst.frames[1..] {
            assert_eq!(f, &burst.frames[0]);
        }
    }

    #[test]
    fn zero_alpha_gives_pure_transmission() {
        let mut s = spec();
        s.obstruction.as_mut().unwrap().alpha = AlphaPattern::Constant { value: 0.0 };
        let (with, traj) = synth_burst(&s).unwrap();
        let mut plain = s.clone();
        plain.obstruction = None;
        let (without, traj2) = synth_burst(&plain).unwrap();
        assert_eq!(traj, traj2);
        assert_eq!(with.frames, without.frames);
    }

    #[test]
    fn first_frame_is_canonical_view() {
        let mut s = spec();
        s.obstruction = None;
        s.rotation_amplitude = 0.01;
        let (burst, traj) = synth_burst(&s).unwrap();
        assert_eq!(traj.translations[0], [0.0; 3]);
        assert!((traj.rotations[0] - Matrix3::identity()).abs().max() < 1e-15);
        let gt = burst.ground_truth.as_ref().unwrap();
        for (a, b) in burst.frames[0].data().iter().zip(gt.transmission.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_disparity_matches_pinhole_parallax() {
        let mut s = spec();
        s.frame_count = 42;
        s.translation_amplitude = 0.03;
        let ts = uniform_timestamps(42);
        let traj = shake_trajectory(&s, &ts);
        // a fixed pixel sees both planes; the relative shift between the two
        // hits across frames is the inter-layer disparity
        let k = Intrinsics::identity();
        let kinv = k.inverse();
        let hits: Vec<(f64, f64)> = traj
            .translations
            .iter()
            .zip(&traj.rotations)
            .map(|(o, r)| {
                let a = field_hit(&k, &kinv, o, r, 0.5, 0.5, 0.5);
                let b = field_hit(&k, &kinv, o, r, 0.5, 0.5, 1.0);
                (a.0 - b.0, a.1 - b.1)
            })
            .collect();
        let mut max = 0.0f64;
        for a in &hits {
            for b in &hits {
                max = max.max(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt());
            }
        }
        let oracle = 0.03 * (1.0 / 0.5 - 1.0 / 1.0);
        assert!((max - oracle).abs() < 0.1 * oracle, "{max} vs {oracle}");
    }

    #[test]
    fn subset_renormalizes_time() {
        let (burst, _) = synth_burst(&spec()).unwrap();
        let sub = burst.subset(&[1, 2, 3]).unwrap();
        assert_eq!(sub.timestamps, vec![0.0, 0.5, 1.0]);
        assert_eq!(sub.frames[0], burst.frames[1]);
        assert!(burst.subset(&[]).is_err());
    }

    #[test]
    fn png_round_trip() {
        let img = Image::from_fn(4, 3, 3, |x, y, c| (x + y + c) as f32 / 9.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p, 1.0).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert!(img.data().iter().zip(back.data()).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}
