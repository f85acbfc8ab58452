//! Objective `J = w_s·L_s + ρ_T·ΣT + w_att·L_att + penalties` with
//! analytic gradients w.r.t. intermediate waypoints and durations.

use super::corridor::Corridor;
use super::keyframes::Keyframes;
use super::spline::{basis, Minco, PolySpline};
use super::PostprocessError;
use crate::kinematics::{body_rate_generic, dot3, lift3, thrust_generic, FlatState, QuadParams, Vec3};
use nalgebra::SVector;
use num_dual::{gradient, DualNum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub smooth: f64,
    /// ρ_T, per second of total duration.
    pub time: f64,
    pub attitude: f64,
    /// Cubic hinge on keyframe alignment below `PenaltyLimits::attitude_cos`.
    pub alignment: f64,
    pub velocity: f64,
    pub thrust: f64,
    pub omega_xy: f64,
    pub omega_z: f64,
    pub corridor: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            smooth: 1.0,
            time: 2000.0,
            attitude: 2000.0,
            alignment: 1.0e6,
            velocity: 1.0e6,
            thrust: 1.0e6,
            omega_xy: 1.0e6,
            omega_z: 1.0e6,
            corridor: 1.0e7,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        let all = [
            self.smooth,
            self.time,
            self.attitude,
            self.alignment,
            self.velocity,
            self.thrust,
            self.omega_xy,
            self.omega_z,
            self.corridor,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(PostprocessError::InvalidInput("cost weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Limits the penalties act on (tightened from the vehicle limits).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyLimits {
    pub v_max: f64,
    pub f_min: f64,
    pub f_max: f64,
    pub omega_xy: f64,
    pub omega_z: f64,
    /// Floor on cos∠(f, z_ref) at keyframes.
    pub attitude_cos: f64,
}

/// Required thrust-to-reference alignment at keyframes.
pub const MIN_ATTITUDE_COS: f64 = 0.9;

impl PenaltyLimits {
    pub fn tightened(p: &QuadParams, scale: f64) -> Self {
        Self {
            attitude_cos: 1.0 - (1.0 - MIN_ATTITUDE_COS) * scale,
            v_max: p.v_max * scale,
            f_min: p.f_min / scale,
            f_max: p.f_max * scale,
            omega_xy: p.omega_max_xy * scale,
            omega_z: p.omega_max_z * scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptProblem {
    pub keyframes: Keyframes,
    pub corridor: Corridor,
    pub params: QuadParams,
    pub weights: CostWeights,
    /// Quadrature intervals per segment.
    pub quad_points: usize,
    /// Whether the ω_z penalty is active.
    pub omega_z_on: bool,
    pub limits: PenaltyLimits,
    /// Boundary-condition order.
    pub s: usize,
    /// Constant heading used by the flatness map.
    pub yaw: f64,
    pub head: FlatState,
    pub tail: FlatState,
}

impl OptProblem {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        self.weights.validate()?;
        if self.quad_points < 8 {
            return Err(PostprocessError::InvalidInput("quadrature needs >= 8 samples per segment".into()));
        }
        if self.keyframes.len() < 2 || self.corridor.polyhedra.len() + 1 != self.keyframes.len() {
            return Err(PostprocessError::InvalidInput(
                "corridor must hold one polyhedron per keyframe segment".into(),
            ));
        }
        Ok(())
    }

    pub fn n_segments(&self) -> usize {
        self.keyframes.len() - 1
    }

    fn effective_weights(&self) -> CostWeights {
        let mut w = self.weights.clone();
        if !self.omega_z_on {
            w.omega_z = 0.0;
        }
        w
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub smooth: f64,
    pub time: f64,
    pub attitude: f64,
    pub alignment: f64,
    pub velocity: f64,
    pub thrust: f64,
    pub omega_xy: f64,
    pub omega_z: f64,
    pub corridor: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct CostEval {
    pub breakdown: CostBreakdown,
    pub grad_waypoints: Vec<Vec3>,
    pub grad_durations: Vec<f64>,
    pub spline: PolySpline,
}

fn hinge3<D: DualNum<Primitive = f64> + Copy>(g: D) -> D {
    if g.re() > 0.0 {
        g * g * g
    } else {
        D::from(0.0)
    }
}

/// Unweighted cubic-hinge integrands `[velocity, thrust, omega_xy, omega_z]`.
fn penalty_terms<D: DualNum<Primitive = f64> + Copy>(
    v: [D; 3],
    a: [D; 3],
    j: [D; 3],
    lim: &PenaltyLimits,
    yaw: f64,
    params: &QuadParams,
) -> Result<[D; 4], crate::kinematics::KinematicsError> {
    let v2 = dot3(v, v);
    let pv = hinge3((v2 - lim.v_max * lim.v_max) / (lim.v_max * lim.v_max));
    let f = thrust_generic(a, params);
    let f2 = dot3(f, f);
    let fmax2 = lim.f_max * lim.f_max;
    let fmin2 = lim.f_min * lim.f_min;
    let pf = hinge3((f2 - fmax2) / fmax2) + hinge3((-f2 + fmin2) / fmin2);
    let w = body_rate_generic(a, j, yaw, 0.0, params)?;
    let wxy2 = w[0] * w[0] + w[1] * w[1];
    let lxy2 = lim.omega_xy * lim.omega_xy;
    let pxy = hinge3((wxy2 - lxy2) / lxy2);
    let lz2 = lim.omega_z * lim.omega_z;
    let pz = hinge3((w[2] * w[2] - lz2) / lz2);
    Ok([pv, pf, pxy, pz])
}

/// Smoothness integral `∫‖p^(s)‖²` of one segment and `‖p^(s)(T)‖²`;
/// accumulates the weighted coefficient gradient.
fn smooth_segment(coeffs: &[Vec3], t: f64, s: usize, weight: f64, grad_c: &mut [Vec3]) -> (f64, f64) {
    let nc = coeffs.len();
    let alpha = |k: usize| basis(k, s, 1.0);
    let mut cost = 0.0;
    for k in s..nc {
        for l in s..nc {
            let e = (k + l - 2 * s) as i32;
            let q = alpha(k) * alpha(l) * t.powi(e + 1) / (e + 1) as f64;
            cost += q * coeffs[k].dot(&coeffs[l]);
            grad_c[k] += 2.0 * weight * q * coeffs[l];
        }
    }
    let ps = coeffs
        .iter()
        .enumerate()
        .fold(Vec3::zeros(), |acc, (k, c)| acc + basis(k, s, t) * c);
    (cost, ps.norm_squared())
}

/// Evaluate J and its gradient w.r.t. intermediate waypoints and durations.
pub fn eval_costs(
    problem: &OptProblem,
    waypoints: &[Vec3],
    durations: &[f64],
) -> Result<CostEval, PostprocessError> {
    let minco = Minco::solve(waypoints, durations, &problem.head, &problem.tail, problem.s)?;
    let sp = &minco.spline;
    let m = sp.n_segments();
    let nc = sp.n_coeffs();
    let w = problem.effective_weights();
    let params = &problem.params;
    let mut br = CostBreakdown::default();
    let mut gc = vec![Vec3::zeros(); nc * m];
    let mut gt = vec![0.0; m];

    for i in 0..m {
        let t = durations[i];
        let (c, dt) = smooth_segment(sp.segment(i), t, problem.s, w.smooth, &mut gc[i * nc..(i + 1) * nc]);
        br.smooth += w.smooth * c;
        gt[i] += w.smooth * dt + w.time;
        br.time += w.time * t;
    }

    // attitude alignment at keyframe times
    for (kidx, z) in problem.keyframes.z_ref.iter().enumerate() {
        let (seg, at_end) = if kidx == 0 { (0, false) } else { (kidx - 1, true) };
        let tl = if at_end { durations[seg] } else { 0.0 };
        let a = sp.eval_segment(seg, tl, 2);
        let f = params.mass * (a + Vec3::new(0.0, 0.0, params.g));
        let n = f.norm();
        if n < params.thrust_singularity() {
            return Err(PostprocessError::FlatnessSingularity {
                time: sp.knot_times()[kidx],
                reason: format!("thrust norm {n:.4} at keyframe {kidx}"),
            });
        }
        let cosv = f.dot(z) / n;
        br.attitude -= w.attitude * cosv;
        let span = 1.0 - problem.limits.attitude_cos;
        let gap = ((problem.limits.attitude_cos - cosv) / span).max(0.0);
        br.alignment += w.alignment * gap * gap * gap;
        let dj_dcos = -w.attitude - w.alignment * 3.0 * gap * gap / span;
        let grad_a = dj_dcos * params.mass * (z / n - f * (f.dot(z) / (n * n * n)));
        for k in 0..nc {
            gc[seg * nc + k] += basis(k, 2, tl) * grad_a;
        }
        if at_end {
            gt[seg] += grad_a.dot(&sp.eval_segment(seg, tl, 3));
        }
    }

    // penalty quadrature
    let kq = problem.quad_points;
    let lim = problem.limits;
    let yaw = problem.yaw;
    let knots = sp.knot_times();
    for i in 0..m {
        let t_seg = durations[i];
        let poly = &problem.corridor.polyhedra[i];
        for jn in 0..=kq {
            let frac = jn as f64 / kq as f64;
            let tl = frac * t_seg;
            let tw = if jn == 0 || jn == kq { 0.5 } else { 1.0 } / kq as f64;
            let omega = tw * t_seg;
            let x: [Vec3; 5] = std::array::from_fn(|d| sp.eval_segment(i, tl, d));
            let terms = penalty_terms(lift3::<f64>(&x[1]), lift3(&x[2]), lift3(&x[3]), &lim, yaw, params)
                .map_err(|e| PostprocessError::FlatnessSingularity {
                    time: knots[i] + tl,
                    reason: e.to_string(),
                })?;
            let weights = [w.velocity, w.thrust, w.omega_xy, w.omega_z];
            let h_dyn: f64 = terms.iter().zip(&weights).map(|(t, w)| t * w).sum();
            br.velocity += omega * w.velocity * terms[0];
            br.thrust += omega * w.thrust * terms[1];
            br.omega_xy += omega * w.omega_xy * terms[2];
            br.omega_z += omega * w.omega_z * terms[3];

            // corridor rows
            let mut h_cor = 0.0;
            let mut g_p = Vec3::zeros();
            for (an, bn) in poly.a.iter().zip(&poly.b) {
                let g = an.dot(&x[0]) - bn;
                if g > 0.0 {
                    h_cor += w.corridor * g * g * g;
                    g_p += w.corridor * 3.0 * g * g * an;
                }
            }
            br.corridor += omega * h_cor;

            let mut g_state = [g_p, Vec3::zeros(), Vec3::zeros(), Vec3::zeros()];
            if h_dyn > 0.0 {
                let z = SVector::<f64, 9>::from_fn(|r, _| x[1 + r / 3][r % 3]);
                let (_, g) = gradient(
                    |v: SVector<num_dual::DualSVec64<9>, 9>| {
                        let vv = [v[0], v[1], v[2]];
                        let aa = [v[3], v[4], v[5]];
                        let jj = [v[6], v[7], v[8]];
                        match penalty_terms(vv, aa, jj, &lim, yaw, params) {
                            Ok(t) => {
                                t[0] * weights[0] + t[1] * weights[1] + t[2] * weights[2] + t[3] * weights[3]
                            }
                            Err(_) => num_dual::DualSVec64::<9>::from(0.0),
                        }
                    },
                    &z,
                );
                for d in 0..3 {
                    g_state[d + 1] = Vec3::new(g[3 * d], g[3 * d + 1], g[3 * d + 2]);
                }
            }
            let h = h_dyn + h_cor;
            if h == 0.0 && g_state.iter().all(|g| g.norm_squared() == 0.0) {
                continue;
            }
            for k in 0..nc {
                let mut acc = Vec3::zeros();
                for (d, gs) in g_state.iter().enumerate() {
                    acc += basis(k, d, tl) * gs;
                }
                gc[i * nc + k] += omega * acc;
            }
            let mut dh_dt = 0.0;
            for (d, gs) in g_state.iter().enumerate() {
                dh_dt += gs.dot(&x[d + 1]) * frac;
            }
            gt[i] += tw * h + omega * dh_dt;
        }
    }

    br.total = br.smooth
        + br.time
        + br.attitude
        + br.alignment
        + br.velocity
        + br.thrust
        + br.omega_xy
        + br.omega_z
        + br.corridor;
    let gw = minco.backprop(&gc, &mut gt);
    Ok(CostEval {
        breakdown: br,
        grad_waypoints: gw,
        grad_durations: gt,
        spline: minco.spline,
    })
}
