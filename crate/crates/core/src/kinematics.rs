//! Rotation representations, frame arithmetic and the differential-flatness
//! map from flat outputs (position derivatives + yaw) to thrust and body rates.
//!
//! Attitude from flat outputs uses the heading-vector construction
//! `x_B = (y_C × z_B) / ‖y_C × z_B‖`, `y_B = z_B × x_B`, where
//! `y_C = (−sin ψ, cos ψ, 0)`. It is singular when the thrust axis is parallel
//! to `y_C`; [`singularity_avoiding_yaw`] picks a constant heading that keeps a
//! given set of thrust axes away from that set.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use num_dual::DualNum;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Sampling period of primitive frames (s).
pub const FRAME_DT: f64 = 0.1;

/// Minimum column norm accepted by the 6D rotation decoder.
const DEGENERATE_NORM: f64 = 1e-8;
/// Thrust-norm singularity threshold as a fraction of hover thrust.
pub const THRUST_SINGULARITY_FRACTION: f64 = 0.05;
/// `‖y_C × z_B‖` below this is treated as a heading singularity.
const HEADING_SINGULARITY: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("degenerate 6D rotation: {0}")]
    Degenerate(&'static str),
    #[error("matrix is not a proper rotation (orthogonality error {orth:.3e}, det {det:.6})")]
    NotRotation { orth: f64, det: f64 },
    #[error("thrust norm {norm:.4} N below singularity threshold {threshold:.4} N")]
    ThrustSingularity { norm: f64, threshold: f64 },
    #[error("thrust axis parallel to the heading vector (yaw {yaw:.4} rad)")]
    HeadingSingularity { yaw: f64 },
    #[error("invalid quadrotor parameters: {0}")]
    InvalidParams(String),
}

/// Continuous 6D rotation encoding: the first two columns of a rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot6D {
    pub a1: Vec3,
    pub a2: Vec3,
}

impl Rot6D {
    pub fn identity() -> Self {
        Self {
            a1: Vec3::x(),
            a2: Vec3::y(),
        }
    }

    pub fn from_array(v: &[f64]) -> Self {
        Self {
            a1: Vec3::new(v[0], v[1], v[2]),
            a2: Vec3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.a1.x, self.a1.y, self.a1.z, self.a2.x, self.a2.y, self.a2.z,
        ]
    }

    pub fn to_matrix(&self) -> Result<Mat3, KinematicsError> {
        rot6d_to_matrix(self)
    }

    /// Gram-Schmidt canonical form of the encoding.
    pub fn canonicalize(&self) -> Result<Rot6D, KinematicsError> {
        let m = rot6d_to_matrix(self)?;
        Ok(Rot6D {
            a1: m.column(0).into_owned(),
            a2: m.column(1).into_owned(),
        })
    }

    /// Body z-axis implied by the encoding.
    pub fn z_axis(&self) -> Result<Vec3, KinematicsError> {
        Ok(rot6d_to_matrix(self)?.column(2).into_owned())
    }
}

pub fn rot6d_to_matrix(r: &Rot6D) -> Result<Mat3, KinematicsError> {
    let n1 = r.a1.norm();
    if !(n1 > DEGENERATE_NORM) {
        return Err(KinematicsError::Degenerate("first column near zero"));
    }
    let b1 = r.a1 / n1;
    let u2 = r.a2 - b1 * b1.dot(&r.a2);
    let n2 = u2.norm();
    if !(n2 > DEGENERATE_NORM) {
        return Err(KinematicsError::Degenerate(
            "second column near zero or parallel to the first",
        ));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Mat3::from_columns(&[b1, b2, b3]))
}

pub fn matrix_to_rot6d(m: &Mat3) -> Result<Rot6D, KinematicsError> {
    let orth = (m.transpose() * m - Mat3::identity()).abs().max();
    let det = m.determinant();
    if !(orth <= 1e-6) || !((det - 1.0).abs() <= 1e-6) {
        return Err(KinematicsError::NotRotation { orth, det });
    }
    Ok(Rot6D {
        a1: m.column(0).into_owned(),
        a2: m.column(1).into_owned(),
    })
}

/// One discretized maneuver state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    /// Padding flag (`s = 1`).
    pub padding: bool,
    pub p: Vec3,
    pub r: Rot6D,
}

impl StateFrame {
    pub fn new(p: Vec3, r: Rot6D) -> Self {
        Self {
            padding: false,
            p,
            r,
        }
    }

    pub fn s(&self) -> f64 {
        if self.padding {
            1.0
        } else {
            0.0
        }
    }

    /// `[s, p, r]` channel layout.
    pub fn to_channels(&self) -> [f64; 10] {
        let r = self.r.to_array();
        [
            self.s(),
            self.p.x,
            self.p.y,
            self.p.z,
            r[0],
            r[1],
            r[2],
            r[3],
            r[4],
            r[5],
        ]
    }

    pub fn from_channels(c: &[f64]) -> Self {
        Self {
            padding: c[0] >= 0.5,
            p: Vec3::new(c[1], c[2], c[3]),
            r: Rot6D::from_array(&c[4..10]),
        }
    }
}

/// Flat outputs and their derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatState {
    pub p: Vec3,
    pub v: Vec3,
    pub a: Vec3,
    pub j: Vec3,
    pub yaw: f64,
    pub yaw_rate: f64,
}

impl FlatState {
    pub fn at_rest(p: Vec3) -> Self {
        Self {
            p,
            v: Vec3::zeros(),
            a: Vec3::zeros(),
            j: Vec3::zeros(),
            yaw: 0.0,
            yaw_rate: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.p, self.v, self.a, self.j]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
            && self.yaw.is_finite()
            && self.yaw_rate.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadParams {
    pub mass: f64,
    pub g: f64,
    pub v_max: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub omega_max_xy: f64,
    pub omega_max_z: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            g: 9.81,
            v_max: 10.0,
            f_min: 2.0,
            f_max: 40.0,
            omega_max_xy: 12.0,
            omega_max_z: 10.0,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        let vals = [
            self.mass,
            self.g,
            self.v_max,
            self.f_min,
            self.f_max,
            self.omega_max_xy,
            self.omega_max_z,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(KinematicsError::InvalidParams(
                "all parameters must be positive".into(),
            ));
        }
        let hover = self.mass * self.g;
        if !(self.f_min < hover && hover < self.f_max) {
            return Err(KinematicsError::InvalidParams(format!(
                "need f_min < m·g < f_max, got {} < {} < {}",
                self.f_min, hover, self.f_max
            )));
        }
        Ok(())
    }

    pub fn thrust_singularity(&self) -> f64 {
        THRUST_SINGULARITY_FRACTION * self.mass * self.g
    }
}

/// World-frame net thrust `m·(a + g·e_z)`.
pub fn flat_thrust(a: &Vec3, params: &QuadParams) -> Vec3 {
    params.mass * (a + Vec3::new(0.0, 0.0, params.g))
}

pub(crate) fn add3<D: DualNum<Primitive = f64> + Copy>(a: [D; 3], b: [D; 3]) -> [D; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn sub3<D: DualNum<Primitive = f64> + Copy>(a: [D; 3], b: [D; 3]) -> [D; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn scale3<D: DualNum<Primitive = f64> + Copy>(a: [D; 3], s: D) -> [D; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot3<D: DualNum<Primitive = f64> + Copy>(a: [D; 3], b: [D; 3]) -> D {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3<D: DualNum<Primitive = f64> + Copy>(a: [D; 3], b: [D; 3]) -> [D; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn lift3<D: DualNum<Primitive = f64> + Copy>(v: &Vec3) -> [D; 3] {
    [D::from(v.x), D::from(v.y), D::from(v.z)]
}

/// Thrust vector, differentiable in the acceleration.
pub(crate) fn thrust_generic<D: DualNum<Primitive = f64> + Copy>(a: [D; 3], params: &QuadParams) -> [D; 3] {
    let m = D::from(params.mass);
    [a[0] * m, a[1] * m, (a[2] + D::from(params.g)) * m]
}

/// Body rates from acceleration/jerk at a fixed heading, differentiable in
/// `(a, j)`. Singularities are detected on the real parts.
pub(crate) fn body_rate_generic<D: DualNum<Primitive = f64> + Copy>(
    a: [D; 3],
    j: [D; 3],
    yaw: f64,
    yaw_rate: f64,
    params: &QuadParams,
) -> Result<[D; 3], KinematicsError> {
    let f = thrust_generic(a, params);
    let n = dot3(f, f).sqrt();
    let threshold = params.thrust_singularity();
    if !(n.re() > threshold) {
        return Err(KinematicsError::ThrustSingularity {
            norm: n.re(),
            threshold,
        });
    }
    let inv_n = n.recip();
    let z = scale3(f, inv_n);
    let fdot = scale3(j, D::from(params.mass));
    // ż = (I − z zᵀ) ḟ / ‖f‖
    let zdot = scale3(sub3(fdot, scale3(z, dot3(z, fdot))), inv_n);

    let (s, c) = yaw.sin_cos();
    let x_c: [D; 3] = [D::from(c), D::from(s), D::from(0.0)];
    let y_c: [D; 3] = [D::from(-s), D::from(c), D::from(0.0)];
    let w = cross3(y_c, z);
    let wn = dot3(w, w).sqrt();
    if !(wn.re() > HEADING_SINGULARITY) {
        return Err(KinematicsError::HeadingSingularity { yaw });
    }
    let inv_wn = wn.recip();
    let x_b = scale3(w, inv_wn);
    let y_b = cross3(z, x_b);

    let wdot = add3(
        cross3(scale3(x_c, D::from(-yaw_rate)), z),
        cross3(y_c, zdot),
    );
    let wx = -dot3(zdot, y_b);
    let wy = dot3(zdot, x_b);
    let wz = dot3(wdot, y_b) * inv_wn;
    Ok([wx, wy, wz])
}

/// Rotation matrix implied by thrust direction and heading.
pub fn flat_attitude(state: &FlatState, params: &QuadParams) -> Result<Mat3, KinematicsError> {
    let f = flat_thrust(&state.a, params);
    let n = f.norm();
    let threshold = params.thrust_singularity();
    if !(n > threshold) {
        return Err(KinematicsError::ThrustSingularity { norm: n, threshold });
    }
    attitude_from_axis(&(f / n), state.yaw)
}

/// Heading-vector attitude construction for a unit thrust axis.
pub fn attitude_from_axis(z: &Vec3, yaw: f64) -> Result<Mat3, KinematicsError> {
    let y_c = Vec3::new(-yaw.sin(), yaw.cos(), 0.0);
    let w = y_c.cross(z);
    let wn = w.norm();
    if !(wn > HEADING_SINGULARITY) {
        return Err(KinematicsError::HeadingSingularity { yaw });
    }
    let x_b = w / wn;
    let y_b = z.cross(&x_b);
    Ok(Mat3::from_columns(&[x_b, y_b, *z]))
}

/// Body angular velocity (rad/s) from flat outputs.
pub fn flat_bodyrate(state: &FlatState, params: &QuadParams) -> Result<Vec3, KinematicsError> {
    let a = lift3::<f64>(&state.a);
    let j = lift3::<f64>(&state.j);
    let w = body_rate_generic(a, j, state.yaw, state.yaw_rate, params)?;
    Ok(Vec3::new(w[0], w[1], w[2]))
}

/// Z-Y-X Euler angles `(roll, pitch, yaw)`.
pub fn euler_zyx(m: &Mat3) -> Vec3 {
    let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
    let roll = m[(2, 1)].atan2(m[(2, 2)]);
    let yaw = m[(1, 0)].atan2(m[(0, 0)]);
    Vec3::new(roll, pitch, yaw)
}

/// Wrap an angle into `(−π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameDelta {
    pub dp: Vec3,
    /// Wrapped Z-Y-X Euler differences `(roll, pitch, yaw)`.
    pub dtheta: Vec3,
    /// Either frame is within 1e-3 rad of the pitch gimbal lock.
    pub gimbal_lock: bool,
}

pub fn frame_delta(prev: &StateFrame, next: &StateFrame) -> Result<FrameDelta, KinematicsError> {
    let ra = rot6d_to_matrix(&prev.r)?;
    let rb = rot6d_to_matrix(&next.r)?;
    let ea = euler_zyx(&ra);
    let eb = euler_zyx(&rb);
    let d = eb - ea;
    let near_lock = |e: &Vec3| (e.y.abs() - PI / 2.0).abs() < 1e-3;
    Ok(FrameDelta {
        dp: next.p - prev.p,
        dtheta: Vec3::new(wrap_angle(d.x), wrap_angle(d.y), wrap_angle(d.z)),
        gimbal_lock: near_lock(&ea) || near_lock(&eb),
    })
}

/// Rotate `prev` by the smallest rotation carrying its z-axis onto `z_new`.
///
/// Propagating this along a thrust-axis curve gives the zero-twist attitude
/// profile (no spin about the body z-axis).
pub fn transport_attitude(prev: &Mat3, z_new: &Vec3) -> Mat3 {
    let z_old: Vec3 = prev.column(2).into_owned();
    let axis = z_old.cross(z_new);
    let s = axis.norm();
    let c = z_old.dot(z_new);
    if s < 1e-12 {
        if c > 0.0 {
            return *prev;
        }
        // antipodal flip: rotate by π about the body x-axis
        let x: Vec3 = prev.column(0).into_owned();
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(x), PI);
        return rot.matrix() * prev;
    }
    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), s.atan2(c));
    let m = rot.matrix() * prev;
    // re-orthonormalize to stop drift over long propagations
    rot6d_to_matrix(&Rot6D {
        a1: m.column(0).into_owned(),
        a2: m.column(1).into_owned(),
    })
    .unwrap_or(m)
}

/// Heading policy used when evaluating body rates of a flat trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadingPolicy {
    /// Constant heading in radians.
    Constant(f64),
    /// Constant heading chosen to keep the sampled thrust axes far from the
    /// heading singularity.
    AvoidSingularity,
}

impl Default for HeadingPolicy {
    fn default() -> Self {
        HeadingPolicy::AvoidSingularity
    }
}

impl HeadingPolicy {
    pub fn resolve(&self, thrust_axes: &[Vec3]) -> f64 {
        match self {
            HeadingPolicy::Constant(y) => *y,
            HeadingPolicy::AvoidSingularity => singularity_avoiding_yaw(thrust_axes),
        }
    }
}

/// Constant yaw maximizing the minimum angle between `±y_C` and every axis.
/// Scans a 0.5° grid; ties resolve to the smallest yaw.
pub fn singularity_avoiding_yaw(axes: &[Vec3]) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..720 {
        let yaw = (k as f64) * PI / 360.0 - PI;
        let y_c = Vec3::new(-yaw.sin(), yaw.cos(), 0.0);
        let score = axes
            .iter()
            .map(|z| {
                let n = z.norm();
                if n < 1e-12 {
                    1.0
                } else {
                    1.0 - (z.dot(&y_c) / n).abs()
                }
            })
            .fold(f64::INFINITY, f64::min);
        if score > best.0 + 1e-12 {
            best = (score, yaw);
        }
    }
    best.1
}
