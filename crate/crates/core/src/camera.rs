//! Rigid camera model: pose splines with a small-angle rotation offset on
//! top of device rotations, ray generation and fronto-parallel plane
//! projection.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::real::Real;
use crate::spline::{spline_eval_op, SplineError, SplineMode, SplineTrack};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("degenerate ray: |D_z| = {0:e} before normalization")]
    DegenerateRay(f64),
    #[error("camera on or behind plane: Π_z − O_z = {0:e}")]
    CameraOnPlane(f64),
    #[error("timestamps not sorted at index {0}")]
    UnsortedTimestamps(usize),
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("invalid plane: {0}")]
    Plane(String),
    #[error("invalid pose model: {0}")]
    Pose(String),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

impl From<CameraError> for DiffError {
    fn from(e: CameraError) -> Self {
        DiffError::Other(e.to_string())
    }
}

/// Upper-triangular pinhole matrix in normalized image units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub k: [[f64; 3]; 3],
}

impl Intrinsics {
    pub fn new(k: [[f64; 3]; 3]) -> Result<Self, CameraError> {
        let me = Self { k };
        me.validate()?;
        Ok(me)
    }

    pub fn identity() -> Self {
        Self { k: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn from_focal(focal: f64, cx: f64, cy: f64) -> Self {
        Self { k: [[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]] }
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self, CameraError> {
        if v.len() != 9 {
            return Err(CameraError::Intrinsics(format!("expected 9 entries, got {}", v.len())));
        }
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn row_major(&self) -> [f64; 9] {
        let k = &self.k;
        [k[0][0], k[0][1], k[0][2], k[1][0], k[1][1], k[1][2], k[2][0], k[2][1], k[2][2]]
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let k = &self.k;
        if !self.row_major().iter().all(|x| x.is_finite()) {
            return Err(CameraError::Intrinsics("non-finite entry".into()));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(CameraError::Intrinsics("focal entries must be positive".into()));
        }
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[2][2] != 1.0 {
            return Err(CameraError::Intrinsics("expected upper-triangular K with K[2][2] = 1".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.k[r][c])
    }

    pub fn inverse(&self) -> Matrix3<f64> {
        self.matrix().try_inverse().expect("validated intrinsics are invertible")
    }

    /// `K⁻¹·(u, v, 1)`.
    pub fn unproject(&self, u: f64, v: f64) -> Vector3<f64> {
        self.inverse() * Vector3::new(u, v, 1.0)
    }

    /// Maps plane coordinates into field coordinates, `K·(x, y, 1)` without
    /// the homogeneous row, so that an unmoved camera sees `(u, v)`.
    pub fn plane_to_field(&self, x: f64, y: f64) -> (f64, f64) {
        let k = &self.k;
        (k[0][0] * x + k[0][1] * y + k[0][2], k[1][1] * y + k[1][2])
    }
}

/// Plane locked to the z axis at `depth`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub depth: f64,
    pub axis_u: [f64; 3],
    pub axis_v: [f64; 3],
}

impl Plane {
    pub fn fronto(depth: f64) -> Self {
        Self { depth, axis_u: [1.0, 0.0, 0.0], axis_v: [0.0, 1.0, 0.0] }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.depth > 0.0) {
            return Err(CameraError::Plane(format!("depth {} must be positive", self.depth)));
        }
        let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        if dot(&self.axis_u, &self.axis_v).abs() > 1e-9
            || (dot(&self.axis_u, &self.axis_u) - 1.0).abs() > 1e-9
            || (dot(&self.axis_v, &self.axis_v) - 1.0).abs() > 1e-9
        {
            return Err(CameraError::Plane("axes must be orthonormal".into()));
        }
        Ok(())
    }
}

/// `[[0, −z, y], [z, 0, −x], [−y, x, 0]]`.
pub fn skew(r: [f64; 3]) -> Matrix3<f64> {
    Matrix3::new(0.0, -r[2], r[1], r[2], 0.0, -r[0], -r[1], r[0], 0.0)
}

fn so3_exp(w: Vector3<f64>) -> Matrix3<f64> {
    UnitQuaternion::from_scaled_axis(w).to_rotation_matrix().into_inner()
}

/// Per-frame device rotations relative to the first frame, composed from
/// piecewise-constant angular velocity samples `(time, ω)`. Each sample's
/// rate holds until the next sample; before the first sample the first rate
/// applies. Without samples every frame gets the identity.
pub fn integrate_gyro(samples: &[(f64, [f64; 3])], frame_times: &[f64]) -> Result<Vec<Matrix3<f64>>, CameraError> {
    for (i, w) in frame_times.windows(2).enumerate() {
        if !(w[1] >= w[0]) {
            return Err(CameraError::UnsortedTimestamps(i + 1));
        }
    }
    for (i, w) in samples.windows(2).enumerate() {
        if !(w[1].0 >= w[0].0) {
            return Err(CameraError::UnsortedTimestamps(i + 1));
        }
    }
    if samples.is_empty() || frame_times.is_empty() {
        return Ok(vec![Matrix3::identity(); frame_times.len()]);
    }
    let rate_at = |t: f64| -> ([f64; 3], f64) {
        // active rate at t and the time the rate changes next
        let idx = samples.partition_point(|s| s.0 <= t);
        let rate = if idx == 0 { samples[0].1 } else { samples[idx - 1].1 };
        let next = samples.get(idx).map(|s| s.0).unwrap_or(f64::INFINITY);
        (rate, next)
    };
    let mut out = Vec::with_capacity(frame_times.len());
    let mut r = Matrix3::identity();
    let mut t = frame_times[0];
    out.push(r);
    for &target in &frame_times[1..] {
        while t < target {
            let (w, next) = rate_at(t);
            let end = next.min(target);
            let dt = end - t;
            r *= so3_exp(Vector3::new(w[0], w[1], w[2]) * dt);
            t = end;
        }
        out.push(r);
    }
    Ok(out)
}

/// Number of pose control points for a burst of `frames` frames.
pub fn pose_control_points(frames: usize) -> usize {
    (frames / 3).max(4)
}

/// Translation and rotation-offset splines plus device rotations.
#[derive(Clone, Debug)]
pub struct PoseModel<T: Real> {
    /// `[1, count·3]` translation control points.
    pub translation: Tensor<T>,
    /// `[1, count·3]` rotation offsets `(r_x, r_y, r_z)`.
    pub rotation: Tensor<T>,
    pub count: usize,
    pub eta_r: f64,
    /// Normalized timestamps of `device_rotations`, sorted.
    pub device_times: Vec<f64>,
    pub device_rotations: Vec<Matrix3<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct PoseVars {
    pub translation: Var,
    pub rotation: Var,
}

impl<T: Real> PoseModel<T> {
    /// Zero tracks; identity device rotations when none are given.
    pub fn new(
        count: usize,
        eta_r: f64,
        device_times: Vec<f64>,
        device_rotations: Vec<Matrix3<f64>>,
    ) -> Result<Self, CameraError> {
        if count < 2 {
            return Err(CameraError::Pose(format!("{count} control points, need at least 2")));
        }
        let (device_times, device_rotations) = if device_rotations.is_empty() {
            (vec![0.0], vec![Matrix3::identity()])
        } else {
            (device_times, device_rotations)
        };
        if device_times.len() != device_rotations.len() {
            return Err(CameraError::Pose("device rotation / timestamp count mismatch".into()));
        }
        for (i, w) in device_times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(CameraError::UnsortedTimestamps(i + 1));
            }
        }
        for (i, r) in device_rotations.iter().enumerate() {
            let err = (r.transpose() * r - Matrix3::identity()).abs().max();
            if err > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
                return Err(CameraError::Pose(format!("device rotation {i} is not a rotation")));
            }
        }
        Ok(Self {
            translation: Tensor::zeros(&[1, count * 3]),
            rotation: Tensor::zeros(&[1, count * 3]),
            count,
            eta_r,
            device_times,
            device_rotations,
        })
    }

    pub fn translation_track(&self) -> SplineTrack<T> {
        SplineTrack::new(self.translation.data().to_vec(), self.count, 3, SplineMode::CubicHermite)
            .expect("validated layout")
    }

    pub fn rotation_track(&self) -> SplineTrack<T> {
        SplineTrack::new(self.rotation.data().to_vec(), self.count, 3, SplineMode::CubicHermite)
            .expect("validated layout")
    }

    /// Device rotation at `t`, spherically interpolated between the
    /// bracketing samples and held constant outside them.
    pub fn device_rotation(&self, t: f64) -> Matrix3<f64> {
        let ts = &self.device_times;
        let n = ts.len();
        if n == 1 || t <= ts[0] {
            return self.device_rotations[0];
        }
        if t >= ts[n - 1] {
            return self.device_rotations[n - 1];
        }
        let hi = ts.partition_point(|&x| x <= t).min(n - 1);
        let lo = hi - 1;
        let s = (t - ts[lo]) / (ts[hi] - ts[lo]);
        if s == 0.0 {
            return self.device_rotations[lo];
        }
        let qa = UnitQuaternion::from_matrix(&self.device_rotations[lo]);
        let qb = UnitQuaternion::from_matrix(&self.device_rotations[hi]);
        qa.slerp(&qb, s).to_rotation_matrix().into_inner()
    }

    /// `T(t)` and `R(t) = R^D(t) + η_R·skew(S(t, P^R))`.
    pub fn eval(&self, t: f64) -> Result<([f64; 3], Matrix3<f64>), CameraError> {
        let tt = T::lit(t);
        let tr = self.translation_track().eval(tt)?;
        let rr = self.rotation_track().eval(tt)?;
        let tr = [tr[0].as_f64(), tr[1].as_f64(), tr[2].as_f64()];
        let rr = [rr[0].as_f64(), rr[1].as_f64(), rr[2].as_f64()];
        Ok((tr, self.device_rotation(t) + skew(rr) * self.eta_r))
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> PoseVars {
        PoseVars { translation: tape.param(&self.translation), rotation: tape.param(&self.rotation) }
    }

    pub fn bind_frozen<'a>(&'a self, tape: &mut Tape<'a, T>) -> PoseVars {
        PoseVars { translation: tape.frozen(&self.translation), rotation: tape.frozen(&self.rotation) }
    }
}

/// Ray origin `T(t)` and direction `R(t)·K⁻¹·(u, v, 1)` scaled to `D_z = 1`.
pub fn generate_ray<T: Real>(
    u: f64,
    v: f64,
    t: f64,
    k: &Intrinsics,
    pose: &PoseModel<T>,
) -> Result<([f64; 3], [f64; 3]), CameraError> {
    let (o, r) = pose.eval(t)?;
    let d = r * k.unproject(u, v);
    if d.z.abs() < 1e-9 {
        return Err(CameraError::DegenerateRay(d.z.abs()));
    }
    Ok((o, [d.x / d.z, d.y / d.z, 1.0]))
}

/// Intersect a ray (with `D_z = 1`) with `plane`, returning plane
/// coordinates scaled by the ray length to the plane.
pub fn project_plane(o: [f64; 3], d: [f64; 3], plane: &Plane) -> Result<(f64, f64), CameraError> {
    let depth = plane.depth - o[2];
    if depth <= 1e-6 {
        return Err(CameraError::CameraOnPlane(depth));
    }
    let q = [o[0] + depth * d[0], o[1] + depth * d[1], o[2] + depth * d[2]];
    let dot = |a: &[f64; 3]| q[0] * a[0] + q[1] * a[1] + q[2] * a[2];
    Ok((dot(&plane.axis_u) / depth, dot(&plane.axis_v) / depth))
}

/// Per-ray constants for a batch of rays.
#[derive(Clone, Debug)]
pub struct RayBatch<T> {
    pub times: Vec<T>,
    /// `K⁻¹·(u, v, 1)`, `[N, 3]` column-split.
    pub cam_dir: [Vec<T>; 3],
    /// `R^D(t)·K⁻¹·(u, v, 1)`.
    pub device_dir: [Vec<T>; 3],
}

impl<T: Real> RayBatch<T> {
    pub fn new(pixels: &[(f64, f64, f64)], k: &Intrinsics, pose: &PoseModel<T>) -> Self {
        let kinv = k.inverse();
        let n = pixels.len();
        let mut cam_dir = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
        let mut device_dir = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
        let mut times = Vec::with_capacity(n);
        let mut cached: Option<(f64, Matrix3<f64>)> = None;
        for &(u, v, t) in pixels {
            let d0 = kinv * Vector3::new(u, v, 1.0);
            let rd = match cached {
                Some((ct, r)) if ct == t => r,
                _ => {
                    let r = pose.device_rotation(t);
                    cached = Some((t, r));
                    r
                }
            };
            let dd = rd * d0;
            for c in 0..3 {
                cam_dir[c].push(T::lit(d0[c]));
                device_dir[c].push(T::lit(dd[c]));
            }
            times.push(T::lit(t));
        }
        Self { times, cam_dir, device_dir }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Differentiable ray origins and directions for a batch.
#[derive(Clone, Copy, Debug)]
pub struct RayVars {
    pub origin: [Var; 3],
    /// `D_x`, `D_y` (D_z is 1).
    pub dir: [Var; 2],
}

fn column<'a, T: Real>(tape: &mut Tape<'a, T>, data: &[T]) -> Var {
    tape.constant(Tensor::new(vec![data.len(), 1], data.to_vec()).expect("non-empty batch"))
}

pub fn generate_rays_op<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    pose: &PoseModel<T>,
    vars: PoseVars,
    rays: &RayBatch<T>,
) -> Result<RayVars, DiffError> {
    let origin = spline_eval_op(tape, vars.translation, &rays.times, pose.count, 3, SplineMode::CubicHermite)?;
    let r = spline_eval_op(tape, vars.rotation, &rays.times, pose.count, 3, SplineMode::CubicHermite)?;
    let o = [tape.slice_cols(origin, 0, 1)?, tape.slice_cols(origin, 1, 1)?, tape.slice_cols(origin, 2, 1)?];
    let rc = [tape.slice_cols(r, 0, 1)?, tape.slice_cols(r, 1, 1)?, tape.slice_cols(r, 2, 1)?];
    let d0 = [column(tape, &rays.cam_dir[0]), column(tape, &rays.cam_dir[1]), column(tape, &rays.cam_dir[2])];
    let eta = T::lit(pose.eta_r);
    // R·d0 = R^D·d0 + η·(r × d0)
    let mut dir = [Var(0); 3];
    for c in 0..3 {
        let (a, b) = ((c + 1) % 3, (c + 2) % 3);
        let p = tape.mul(rc[a], d0[b])?;
        let q = tape.mul(rc[b], d0[a])?;
        let cross = tape.sub(p, q)?;
        let cross = tape.scale(cross, eta);
        let base = column(tape, &rays.device_dir[c]);
        dir[c] = tape.add(base, cross)?;
    }
    if let Some(&z) = tape
        .value(dir[2])
        .data()
        .iter()
        .find(|z| !(z.abs() >= T::lit(1e-9)))
    {
        return Err(CameraError::DegenerateRay(z.abs().as_f64()).into());
    }
    let dx = tape.div(dir[0], dir[2])?;
    let dy = tape.div(dir[1], dir[2])?;
    Ok(RayVars { origin: o, dir: [dx, dy] })
}

/// Plane coordinates `[N, 1]` × 2 for a batch of rays.
pub fn project_plane_op<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    rays: &RayVars,
    plane: &Plane,
) -> Result<[Var; 2], DiffError> {
    let pz = T::lit(plane.depth);
    let neg_oz = tape.scale(rays.origin[2], -T::one());
    let depth = tape.offset(neg_oz, pz);
    if let Some(&d) = tape.value(depth).data().iter().find(|d| !(**d > T::lit(1e-6))) {
        return Err(CameraError::CameraOnPlane(d.as_f64()).into());
    }
    // ⟨Q, a⟩ / depth with Q = O + depth·D, Q_z = Π_z
    let mut out = [Var(0); 2];
    for (slot, axis) in [plane.axis_u, plane.axis_v].iter().enumerate() {
        let mut acc: Option<Var> = None;
        for c in 0..2 {
            if axis[c] == 0.0 {
                continue;
            }
            let od = tape.div(rays.origin[c], depth)?;
            let term = tape.add(od, rays.dir[c])?;
            let term = tape.scale(term, T::lit(axis[c]));
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        if axis[2] != 0.0 {
            let one = tape.constant(Tensor::new(tape.value(depth).shape().to_vec(), vec![T::one(); tape.value(depth).len()])?);
            let inv = tape.div(one, depth)?;
            let term = tape.scale(inv, T::lit(axis[2] * plane.depth));
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        out[slot] = match acc {
            Some(a) => a,
            None => {
                let n = tape.value(depth).len();
                tape.constant(Tensor::zeros(&[n, 1]))
            }
        };
    }
    Ok(out)
}

/// Field coordinates `[N, 2]` from plane coordinates.
pub fn plane_to_field_op<'a, T: Real>(tape: &mut Tape<'a, T>, k: &Intrinsics, uv: [Var; 2]) -> Result<Var, DiffError> {
    let kk = &k.k;
    let mut x = tape.scale(uv[0], T::lit(kk[0][0]));
    if kk[0][1] != 0.0 {
        let s = tape.scale(uv[1], T::lit(kk[0][1]));
        x = tape.add(x, s)?;
    }
    let x = tape.offset(x, T::lit(kk[0][2]));
    let y = tape.scale(uv[1], T::lit(kk[1][1]));
    let y = tape.offset(y, T::lit(kk[1][2]));
    tape.concat_cols(&[x, y])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check_gradients;

    fn identity_pose() -> PoseModel<f64> {
        PoseModel::new(4, 0.01, vec![], vec![]).unwrap()
    }

    #[test]
    fn gyro_identity_cases() {
        let frames = [0.0, 0.1, 0.2, 0.3];
        let zero = vec![(0.0, [0.0; 3]), (0.15, [0.0; 3]), (0.3, [0.0; 3])];
        for r in integrate_gyro(&zero, &frames).unwrap() {
            assert!((r - Matrix3::identity()).abs().max() < 1e-15);
        }
        let none = integrate_gyro(&[], &frames).unwrap();
        assert_eq!(none, vec![Matrix3::identity(); 4]);
        assert!(matches!(integrate_gyro(&[], &[0.0, 0.2, 0.1]), Err(CameraError::UnsortedTimestamps(2))));
    }

    #[test]
    fn gyro_constant_rate_about_z() {
        let w = 0.7;
        let samples: Vec<(f64, [f64; 3])> = (0..=20).map(|i| (i as f64 * 0.05, [0.0, 0.0, w])).collect();
        let frames = [0.0, 0.33, 0.61, 1.0];
        let rots = integrate_gyro(&samples, &frames).unwrap();
        for (r, &t) in rots.iter().zip(&frames) {
            let a = w * t;
            let want = Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0);
            assert!((r - want).abs().max() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn pose_evaluation() {
        let pose = identity_pose();
        let (t, r) = pose.eval(0.37).unwrap();
        assert_eq!(t, [0.0; 3]);
        assert_eq!(r, Matrix3::identity());

        let mut pose = identity_pose();
        pose.eta_r = 0.05;
        for c in 0..4 {
            pose.rotation.data_mut()[c * 3..c * 3 + 3].copy_from_slice(&[0.2, -0.3, 0.5]);
        }
        let (_, r) = pose.eval(0.6).unwrap();
        let (a, b, c) = (0.2, -0.3, 0.5);
        let want = Matrix3::identity() + Matrix3::new(0.0, -c, b, c, 0.0, -a, -b, a, 0.0) * 0.05;
        assert!((r - want).abs().max() < 1e-15);

        pose.eta_r = 0.0;
        let rd = so3_exp(Vector3::new(0.0, 0.1, 0.0));
        pose.device_times = vec![0.0, 1.0];
        pose.device_rotations = vec![Matrix3::identity(), rd];
        let (_, r) = pose.eval(1.0).unwrap();
        assert_eq!(r, rd);
        // halfway slerp is half the angle
        let (_, r) = pose.eval(0.5).unwrap();
        assert!((r - so3_exp(Vector3::new(0.0, 0.05, 0.0))).abs().max() < 1e-12);
    }

    #[test]
    fn rotation_stays_near_orthonormal() {
        let mut pose = identity_pose();
        pose.eta_r = 0.01;
        let pts = [0.5, -1.0, 2.0, 1.5, -0.2, 0.3, 0.0, 0.9, -1.7, 0.4, 0.4, 0.4];
        pose.rotation.data_mut().copy_from_slice(&pts);
        let maxp = pts.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        for k in 0..=20 {
            let (_, r) = pose.eval(k as f64 / 20.0).unwrap();
            let dev = (r.transpose() * r - Matrix3::identity()).norm();
            assert!(dev <= 3.0 * (0.01 * maxp).powi(2) + 1e-9, "{dev}");
        }
    }

    #[test]
    fn ray_examples() {
        let pose = identity_pose();
        let (o, d) = generate_ray(0.25, 0.75, 0.3, &Intrinsics::identity(), &pose).unwrap();
        assert_eq!(o, [0.0; 3]);
        assert_eq!(d, [0.25, 0.75, 1.0]);
        let k = Intrinsics::new([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let (_, d) = generate_ray(0.5, 0.5, 0.0, &k, &pose).unwrap();
        // oracle: solve K·x = (0.5, 0.5, 1)
        let x = k.matrix().lu().solve(&Vector3::new(0.5, 0.5, 1.0)).unwrap();
        assert!((d[0] - x.x / x.z).abs() < 1e-15 && (d[1] - x.y / x.z).abs() < 1e-15);
        assert_eq!([d[0], d[1], d[2]], [0.25, 0.25, 1.0]);
    }

    #[test]
    fn degenerate_ray() {
        let mut pose = identity_pose();
        pose.device_rotations = vec![so3_exp(Vector3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0))];
        let err = generate_ray(0.0, 0.0, 0.0, &Intrinsics::identity(), &pose).unwrap_err();
        assert!(matches!(err, CameraError::DegenerateRay(_)));
    }

    #[test]
    fn projection_examples() {
        let d = [0.25, 0.75, 1.0];
        assert_eq!(project_plane([0.0; 3], d, &Plane::fronto(1.0)).unwrap(), (0.25, 0.75));
        let (u, v) = project_plane([0.1, 0.0, 0.0], d, &Plane::fronto(2.0)).unwrap();
        // oracle: parametric intersection O + s·D with s solving O_z + s·D_z = 2
        let s = (2.0 - 0.0) / d[2];
        let q = [0.1 + s * d[0], 0.0 + s * d[1]];
        assert!((q[0] - 0.6).abs() < 1e-15 && (q[1] - 1.5).abs() < 1e-15);
        assert!((u - q[0] / 2.0).abs() < 1e-15 && (v - q[1] / 2.0).abs() < 1e-15);
        assert!((u - 0.3).abs() < 1e-15 && (v - 0.75).abs() < 1e-15);
        let a = project_plane([0.0; 3], d, &Plane::fronto(1.0)).unwrap();
        let b = project_plane([0.0; 3], d, &Plane::fronto(2.0)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(project_plane([0.0, 0.0, 1.0], d, &Plane::fronto(1.0)), Err(CameraError::CameraOnPlane(_))));
    }

    #[test]
    fn zero_pose_projection_identity() {
        let pose = identity_pose();
        for &depth in &[0.5, 1.0, 2.5] {
            for i in 0..=10 {
                for j in 0..=10 {
                    let (u, v) = (i as f64 / 10.0, j as f64 / 10.0);
                    let (o, d) = generate_ray(u, v, 0.5, &Intrinsics::identity(), &pose).unwrap();
                    let (pu, pv) = project_plane(o, d, &Plane::fronto(depth)).unwrap();
                    assert!((pu - u).abs() <= 1e-12 && (pv - v).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn tape_projection_matches_scalar_path() {
        let mut pose = identity_pose();
        pose.eta_r = 0.05;
        for (i, v) in pose.translation.data_mut().iter_mut().enumerate() {
            *v = ((i * 5) % 7) as f64 * 0.01 - 0.03;
        }
        for (i, v) in pose.rotation.data_mut().iter_mut().enumerate() {
            *v = ((i * 3) % 5) as f64 * 0.1 - 0.2;
        }
        let k = Intrinsics::from_focal(1.2, 0.5, 0.45);
        let pixels = [(0.1, 0.2, 0.0), (0.7, 0.4, 0.35), (0.95, 0.9, 1.0)];
        let batch = RayBatch::new(&pixels, &k, &pose);
        let mut tape = Tape::new();
        let vars = pose.bind(&mut tape);
        let rays = generate_rays_op(&mut tape, &pose, vars, &batch).unwrap();
        let plane = Plane::fronto(0.7);
        let uv = project_plane_op(&mut tape, &rays, &plane).unwrap();
        let field = plane_to_field_op(&mut tape, &k, uv).unwrap();
        for (r, &(u, v, t)) in pixels.iter().enumerate() {
            let (o, d) = generate_ray(u, v, t, &k, &pose).unwrap();
            let (pu, pv) = project_plane(o, d, &plane).unwrap();
            assert!((tape.value(uv[0]).data()[r] - pu).abs() < 1e-14);
            assert!((tape.value(uv[1]).data()[r] - pv).abs() < 1e-14);
            let (fx, fy) = k.plane_to_field(pu, pv);
            assert!((tape.value(field).data()[2 * r] - fx).abs() < 1e-14);
            assert!((tape.value(field).data()[2 * r + 1] - fy).abs() < 1e-14);
        }
    }

    #[test]
    fn projection_gradients() {
        let mut pose = identity_pose();
        pose.eta_r = 0.05;
        let k = Intrinsics::from_focal(1.1, 0.5, 0.5);
        let pixels = [(0.1, 0.2, 0.0), (0.7, 0.4, 0.35), (0.5, 0.9, 0.8), (0.3, 0.3, 1.0)];
        let batch = RayBatch::new(&pixels, &k, &pose);
        let plane = Plane::fronto(0.5);
        let objective = |t: &mut Tape<'_, f64>, tr: Var, rot: Var| -> Result<Var, DiffError> {
            let rays = generate_rays_op(t, &pose, PoseVars { translation: tr, rotation: rot }, &batch)?;
            let uv = project_plane_op(t, &rays, &plane)?;
            let f = plane_to_field_op(t, &k, uv)?;
            let w = t.constant(Tensor::new(vec![4, 2], vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.7, 2.0, 1.1])?);
            let f = t.mul(f, w)?;
            let f = t.pow(f, 2.0);
            Ok(t.sum(f))
        };
        let tr0 = Tensor::new(vec![1, 12], (0..12).map(|i| (i as f64 * 0.37).sin() * 0.05).collect()).unwrap();
        let rot0 = Tensor::new(vec![1, 12], (0..12).map(|i| (i as f64 * 0.71).cos() * 0.5).collect()).unwrap();
        let err = check_gradients(
            |t, v| {
                let r = t.constant(rot0.clone());
                objective(t, v, r)
            },
            &tr0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "translation {err}");
        let err = check_gradients(
            |t, v| {
                let tr = t.constant(tr0.clone());
                objective(t, tr, v)
            },
            &rot0,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "rotation {err}");
    }
}
