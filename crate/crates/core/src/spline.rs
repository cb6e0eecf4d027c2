//! Temporal splines `S(t, P)` over uniformly spaced control points.
//!
//! The cubic mode is a Hermite spline whose tangents are half the backward
//! and forward differences around the segment start,
//! `m0 = (P[i] − P[i−1]) / 2` and `m1 = (P[i+1] − P[i]) / 2`. The time
//! parameter maps onto the control polygon as `t_s = t·(|P| − 1)`, with the
//! segment index clamped to `[0, |P| − 2]` and the left tangent neighbour
//! clamped to index 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{CustomOp, DiffError, InputGrads, Tape, Tensor, Var};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplineMode {
    CubicHermite,
    Linear,
}

impl SplineMode {
    pub fn min_points(self) -> usize {
        match self {
            SplineMode::CubicHermite => 2,
            SplineMode::Linear => 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("spline time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("{mode:?} spline needs at least {min} control points, got {count}")]
    TooFewPoints { mode: SplineMode, min: usize, count: usize },
    #[error("control point buffer of length {len} does not hold {count}×{dims}")]
    BadLayout { len: usize, count: usize, dims: usize },
}

impl From<SplineError> for DiffError {
    fn from(e: SplineError) -> Self {
        DiffError::Other(e.to_string())
    }
}

/// Control-point indices and weights at one time; at most three distinct
/// points contribute.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplineBasis<T> {
    pub index: [u32; 3],
    pub weight: [T; 3],
    /// d weight / d t
    pub dweight: [T; 3],
}

fn check_count(count: usize, mode: SplineMode) -> Result<(), SplineError> {
    if count < mode.min_points() {
        return Err(SplineError::TooFewPoints { mode, min: mode.min_points(), count });
    }
    Ok(())
}

/// Basis for evaluating a spline of `count` points at time `t`.
pub fn spline_basis<T: Real>(t: T, count: usize, mode: SplineMode) -> Result<SplineBasis<T>, SplineError> {
    check_count(count, mode)?;
    if !(t >= T::zero() && t <= T::one()) {
        return Err(SplineError::TimeOutOfRange(t.as_f64()));
    }
    let zero = T::zero();
    if count == 1 {
        return Ok(SplineBasis { index: [0, 0, 0], weight: [T::one(), zero, zero], dweight: [zero; 3] });
    }
    let span = T::lit((count - 1) as f64);
    let ts = t * span;
    let seg = ts.floor().to_usize().unwrap_or(0).min(count - 2);
    let tr = ts - T::lit(seg as f64);
    let i = seg as u32;
    Ok(match mode {
        SplineMode::Linear => SplineBasis {
            index: [i, i + 1, i],
            weight: [T::one() - tr, tr, zero],
            dweight: [-span, span, zero],
        },
        SplineMode::CubicHermite => {
            let (two, three) = (T::lit(2.0), T::lit(3.0));
            let half = T::lit(0.5);
            let tr2 = tr * tr;
            let tr3 = tr2 * tr;
            let h00 = two * tr3 - three * tr2 + T::one();
            let h01 = -two * tr3 + three * tr2;
            let h10 = tr3 - two * tr2 + tr;
            let h11 = tr3 - tr2;
            let (four, six) = (T::lit(4.0), T::lit(6.0));
            let d00 = six * tr2 - six * tr;
            let d01 = -six * tr2 + six * tr;
            let d10 = three * tr2 - four * tr + T::one();
            let d11 = three * tr2 - two * tr;
            // S = h00 P_i + h01 P_{i+1} + h10 (P_i − P_{i−1})/2 + h11 (P_{i+1} − P_i)/2
            let im = i.saturating_sub(1);
            SplineBasis {
                index: [im, i, i + 1],
                weight: [-h10 * half, h00 + (h10 - h11) * half, h01 + h11 * half],
                dweight: [
                    -d10 * half * span,
                    (d00 + (d10 - d11) * half) * span,
                    (d01 + d11 * half) * span,
                ],
            }
        }
    })
}

/// A set of `count × dims` control points and an evaluation mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineTrack<T> {
    points: Vec<T>,
    count: usize,
    dims: usize,
    mode: SplineMode,
}

impl<T: Real> SplineTrack<T> {
    pub fn new(points: Vec<T>, count: usize, dims: usize, mode: SplineMode) -> Result<Self, SplineError> {
        check_count(count, mode)?;
        if dims == 0 || points.len() != count * dims {
            return Err(SplineError::BadLayout { len: points.len(), count, dims });
        }
        Ok(Self { points, count, dims, mode })
    }

    pub fn zeros(count: usize, dims: usize, mode: SplineMode) -> Result<Self, SplineError> {
        Self::new(vec![T::zero(); count * dims], count, dims, mode)
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn mode(&self) -> SplineMode {
        self.mode
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.points[i * self.dims..(i + 1) * self.dims]
    }

    pub fn eval(&self, t: T) -> Result<Vec<T>, SplineError> {
        Ok(self.eval_with_derivative(t)?.0)
    }

    /// Value and time derivative `dS/dt`.
    pub fn eval_with_derivative(&self, t: T) -> Result<(Vec<T>, Vec<T>), SplineError> {
        let b = spline_basis(t, self.count, self.mode)?;
        let mut value = vec![T::zero(); self.dims];
        let mut deriv = vec![T::zero(); self.dims];
        for k in 0..3 {
            let p = self.point(b.index[k] as usize);
            for c in 0..self.dims {
                value[c] += b.weight[k] * p[c];
                deriv[c] += b.dweight[k] * p[c];
            }
        }
        Ok((value, deriv))
    }
}

struct SplineOp<T> {
    bases: Vec<SplineBasis<T>>,
    dims: usize,
    shared: bool,
}

impl<T: Real> CustomOp<T> for SplineOp<T> {
    fn name(&self) -> &'static str {
        "spline_eval"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, g: &[T], grads: &mut InputGrads<T>) {
        let row_len = inputs[0].cols();
        let Some(dp) = grads.dense(0) else { return };
        let d = self.dims;
        for (r, b) in self.bases.iter().enumerate() {
            let base = if self.shared { 0 } else { r * row_len };
            let gr = &g[r * d..(r + 1) * d];
            for k in 0..3 {
                let off = base + b.index[k] as usize * d;
                for c in 0..d {
                    dp[off + c] += b.weight[k] * gr[c];
                }
            }
        }
    }
}

/// Batched spline evaluation on the tape. `points` is `[rows, count·dims]`
/// with one track per ray, or `[1, count·dims]` (or a flat vector) shared by
/// every ray. Returns `[times.len(), dims]`.
pub fn spline_eval_op<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    points: Var,
    times: &[T],
    count: usize,
    dims: usize,
    mode: SplineMode,
) -> Result<Var, DiffError> {
    let pv = tape.value(points);
    if pv.cols() != count * dims {
        return Err(DiffError::Shape { op: "spline_eval", shapes: vec![pv.shape().to_vec(), vec![count, dims]] });
    }
    let shared = pv.rows() == 1 && times.len() != 1 || pv.shape().len() == 1;
    if !shared && pv.rows() != times.len() {
        return Err(DiffError::Shape {
            op: "spline_eval",
            shapes: vec![pv.shape().to_vec(), vec![times.len()]],
        });
    }
    let bases = times
        .iter()
        .map(|&t| spline_basis(t, count, mode))
        .collect::<Result<Vec<_>, _>>()?;
    let row_len = count * dims;
    let data = pv.data();
    let mut out = vec![T::zero(); times.len() * dims];
    for (r, b) in bases.iter().enumerate() {
        let base = if shared { 0 } else { r * row_len };
        let o = &mut out[r * dims..(r + 1) * dims];
        for k in 0..3 {
            let off = base + b.index[k] as usize * dims;
            for c in 0..dims {
                o[c] += b.weight[k] * data[off + c];
            }
        }
    }
    let out = Tensor::new(vec![times.len(), dims], out)?;
    Ok(tape.custom(&[points], out, Box::new(SplineOp { bases, dims, shared })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check_gradients;
    use proptest::prelude::*;

    /// Direct transcription of the Hermite form with explicit tangents.
    fn hermite_oracle(p: &[f64], t: f64) -> f64 {
        let n = p.len();
        let ts = t * (n - 1) as f64;
        let i = (ts.floor() as usize).min(n - 2);
        let tr = ts - i as f64;
        let prev = p[i.saturating_sub(1)];
        let m0 = (p[i] - prev) / 2.0;
        let m1 = (p[i + 1] - p[i]) / 2.0;
        (2.0 * tr.powi(3) - 3.0 * tr.powi(2) + 1.0) * p[i]
            + (-2.0 * tr.powi(3) + 3.0 * tr.powi(2)) * p[i + 1]
            + (tr.powi(3) - 2.0 * tr.powi(2) + tr) * m0
            + (tr.powi(3) - tr.powi(2)) * m1
    }

    #[test]
    fn worked_example_matches_basis_weights() {
        // weights (0.5, 0.5, 0.125, −0.125) on P1, P2 and the half differences
        let (p0, p1, p2) = (0.0f64, 1.0, 0.0);
        let oracle = 0.5 * p1 + 0.5 * p2 + 0.125 * (p1 - p0) / 2.0 - 0.125 * (p2 - p1) / 2.0;
        assert!((oracle - 0.625).abs() < 1e-15);
        let track = SplineTrack::new(vec![0.0, 1.0, 0.0, -1.0], 4, 1, SplineMode::CubicHermite).unwrap();
        let v: f64 = track.eval(0.5).unwrap()[0];
        assert!((v - 0.625).abs() < 1e-15, "{v}");
        assert!((hermite_oracle(&[0.0, 1.0, 0.0, -1.0], 0.5) - 0.625).abs() < 1e-15);
    }

    #[test]
    fn constant_track_is_constant() {
        let p = [0.3, -1.7];
        let pts: Vec<f64> = (0..7).flat_map(|_| p).collect();
        let track = SplineTrack::new(pts, 7, 2, SplineMode::CubicHermite).unwrap();
        for k in 0..=1000 {
            let v = track.eval(k as f64 / 1000.0).unwrap();
            assert!((v[0] - p[0]).abs() <= 1e-12 && (v[1] - p[1]).abs() <= 1e-12);
        }
    }

    #[test]
    fn knots_interpolate_exactly() {
        let pts = vec![0.2, -0.4, 1.3, 0.9, -2.0, 0.7];
        let track = SplineTrack::new(pts.clone(), 6, 1, SplineMode::CubicHermite).unwrap();
        for (i, &p) in pts.iter().enumerate() {
            let t = i as f64 / 5.0;
            assert_eq!(track.eval(t).unwrap()[0], p, "knot {i}");
        }
    }

    #[test]
    fn endpoints() {
        let track = SplineTrack::new(vec![1.0, 2.0, 4.0], 3, 1, SplineMode::CubicHermite).unwrap();
        assert_eq!(track.eval(0.0).unwrap()[0], 1.0);
        assert_eq!(track.eval(1.0).unwrap()[0], 4.0);
    }

    #[test]
    fn errors() {
        let track = SplineTrack::new(vec![1.0, 2.0], 2, 1, SplineMode::CubicHermite).unwrap();
        assert!(matches!(track.eval(1.5), Err(SplineError::TimeOutOfRange(_))));
        assert!(matches!(track.eval(-0.1), Err(SplineError::TimeOutOfRange(_))));
        assert!(matches!(
            SplineTrack::<f64>::zeros(1, 2, SplineMode::CubicHermite),
            Err(SplineError::TooFewPoints { .. })
        ));
        assert!(SplineTrack::<f64>::zeros(1, 2, SplineMode::Linear).is_ok());
    }

    #[test]
    fn continuity_at_interior_knots() {
        let pts: Vec<f64> = vec![0.0, 1.0, -0.5, 2.0, 0.25, -1.0, 0.75];
        let n = pts.len();
        let maxp = pts.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        let track = SplineTrack::new(pts, n, 1, SplineMode::CubicHermite).unwrap();
        let eps = 1e-6;
        for i in 1..n - 1 {
            let t = i as f64 / (n - 1) as f64;
            let (l, dl) = track.eval_with_derivative(t - eps).unwrap();
            let (r, dr) = track.eval_with_derivative(t + eps).unwrap();
            assert!((l[0] - r[0]).abs() <= 10.0 * eps * maxp);
            // one-sided difference quotients
            let c = track.eval(t).unwrap()[0];
            let left = (c - l[0]) / eps;
            let right = (r[0] - c) / eps;
            let scale = (n - 1) as f64 * (n - 1) as f64 * maxp * 40.0;
            assert!((left - right).abs() <= scale * eps, "knot {i}: {left} vs {right}");
            assert!((dl[0] - dr[0]).abs() <= scale * eps);
        }
    }

    #[test]
    fn linear_two_points_stays_on_segment() {
        let track = SplineTrack::new(vec![0.5, -1.0, 2.0, 3.0], 2, 2, SplineMode::Linear).unwrap();
        for k in 0..=100 {
            let v = track.eval(k as f64 / 100.0).unwrap();
            let (dx, dy) = (2.0 - 0.5, 3.0 + 1.0);
            let cross = (v[0] - 0.5) * dy - (v[1] + 1.0) * dx;
            assert!(cross.abs() <= 1e-12);
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let track = SplineTrack::new(vec![0.0, 1.0, -0.5, 2.0, 0.25], 5, 1, SplineMode::CubicHermite).unwrap();
        for &t in &[0.1, 0.33, 0.6, 0.9] {
            let h = 1e-6;
            let fd = (track.eval(t + h).unwrap()[0] - track.eval(t - h).unwrap()[0]) / (2.0 * h);
            let d: f64 = track.eval_with_derivative(t).unwrap().1[0];
            assert!((fd - d).abs() < 1e-6, "{t}: {fd} vs {d}");
        }
    }

    #[test]
    fn tape_op_gradient_check() {
        let times = [0.0, 0.15, 0.5, 0.77, 1.0];
        for &mode in &[SplineMode::CubicHermite, SplineMode::Linear] {
            // per-ray tracks
            let x = Tensor::new(vec![5, 8], (0..40).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.4).collect()).unwrap();
            let err = check_gradients(
                |t, p| {
                    let s = spline_eval_op(t, p, &times, 4, 2, mode)?;
                    let s = t.mul(s, s)?;
                    Ok(t.sum(s))
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{mode:?}: {err}");
            // one shared track
            let x = Tensor::new(vec![1, 8], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
            let err = check_gradients(
                |t, p| {
                    let s = spline_eval_op(t, p, &times, 4, 2, mode)?;
                    let s = t.mul(s, s)?;
                    Ok(t.sum(s))
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "{mode:?} shared: {err}");
        }
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_pure(pts in proptest::collection::vec(-3.0f64..3.0, 2..12), ts in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
            let n = pts.len();
            let track = SplineTrack::new(pts.clone(), n, 1, SplineMode::CubicHermite).unwrap();
            let forward: Vec<f64> = ts.iter().map(|&t| track.eval(t).unwrap()[0]).collect();
            let mut rev = ts.clone();
            rev.reverse();
            let backward: Vec<f64> = rev.iter().map(|&t| track.eval(t).unwrap()[0]).collect();
            for (i, &t) in ts.iter().enumerate() {
                prop_assert!((forward[i] - hermite_oracle(&pts, t)).abs() < 1e-12);
                prop_assert_eq!(forward[i], backward[ts.len() - 1 - i]);
            }
        }
    }
}
