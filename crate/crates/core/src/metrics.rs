//! Image quality metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Image;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize, usize), (usize, usize, usize)),
    #[error("image {0}x{1} smaller than the {WINDOW}x{WINDOW} window")]
    TooSmall(usize, usize),
}

fn dims(i: &Image) -> (usize, usize, usize) {
    (i.width(), i.height(), i.channels())
}

fn check(a: &Image, b: &Image) -> Result<(), MetricError> {
    if !a.same_shape(b) {
        return Err(MetricError::Shape(dims(a), dims(b)));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64, MetricError> {
    check(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (WINDOW / 2) as f64;
    let g: Vec<f64> = (0..WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian filter, valid region only.
fn filter(img: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            horiz[y * ow + x] = (0..WINDOW).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|k| g[k] * horiz[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity on Rec. 709 luminance with an 11×11
/// Gaussian window (σ = 1.5) over all fully contained windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < WINDOW || h < WINDOW {
        return Err(MetricError::TooSmall(w, h));
    }
    let (la, lb) = (a.luminance(), b.luminance());
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let inputs = [la.clone(), lb.clone(), prod(&la, &la), prod(&lb, &lb), prod(&la, &lb)];
    let f: Vec<Vec<f64>> = inputs.par_iter().map(|x| filter(x, w, h, &g)).collect();
    let total: f64 = (0..f[0].len())
        .map(|i| {
            let (ma, mb) = (f[0][i], f[1][i]);
            let va = f[2][i] - ma * ma;
            let vb = f[3][i] - mb * mb;
            let cov = f[4][i] - ma * mb;
            ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
        })
        .sum();
    Ok(total / f[0].len() as f64)
}

/// Intersection over union of masks thresholded at 0.5 (first channel);
/// 1.0 when both are empty.
pub fn mask_iou(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check(a, b)?;
    let c = a.channels();
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data().iter().step_by(c).zip(b.data().iter().step_by(c)) {
        let (p, q) = (*x >= 0.5, *y >= 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Serialized as the string "inf" for identical images.
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
}

fn ser_psnr<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum P {
        N(f64),
        S(String),
    }
    match P::deserialize(d)? {
        P::N(x) => Ok(x),
        P::S(s) if s == "inf" => Ok(f64::INFINITY),
        P::S(s) => Err(serde::de::Error::custom(format!("bad psnr {s}"))),
    }
}

impl MetricReport {
    pub fn compute(pred: &Image, reference: &Image, masks: Option<(&Image, &Image)>) -> Result<Self, MetricError> {
        Ok(Self {
            psnr_db: psnr(pred, reference, 1.0)?,
            ssim: ssim(pred, reference)?,
            iou: masks.map(|(p, r)| mask_iou(p, r)).transpose()?,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
