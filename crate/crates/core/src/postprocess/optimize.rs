//! Problem assembly from chained frames, the two-stage solve and the dense
//! feasibility audit.

use super::corridor::{box_is_free, build_corridor, seed_box, Corridor, CorridorParams, Polyhedron};
use super::costs::{eval_costs, CostBreakdown, CostWeights, OptProblem, PenaltyLimits};
use super::keyframes::{extract_keyframes, Keyframes};
use super::lbfgs::{minimize, LbfgsParams};
use super::spline::PolySpline;
use super::PostprocessError;
use crate::environment::{Aabb, SdfGrid};
use crate::kinematics::{flat_attitude, flat_bodyrate, flat_thrust, FlatState, HeadingPolicy, QuadParams, StateFrame, Vec3, FRAME_DT};
use nalgebra::{Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    /// Keyframe threshold on body z-axis deviation, degrees.
    pub alpha_deg: f64,
    /// Boundary-condition order (3: minimum jerk, 4: minimum snap).
    pub s: usize,
    pub corridor: CorridorParams,
    pub weights: CostWeights,
    pub quad_points: usize,
    /// Penalty limits are the vehicle limits scaled by this factor.
    pub limit_scale: f64,
    pub heading: HeadingPolicy,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    /// Segments spanning more frames than this are split.
    pub max_segment_frames: usize,
    pub audit_samples: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            alpha_deg: 30.0,
            s: 3,
            corridor: CorridorParams::default(),
            weights: CostWeights::default(),
            quad_points: 16,
            limit_scale: 0.92,
            heading: HeadingPolicy::AvoidSingularity,
            stage1_iters: 120,
            stage2_iters: 120,
            max_segment_frames: 10,
            audit_samples: 100,
        }
    }
}

/// Decision variables: intermediate waypoints and segment durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub waypoints: Vec<Vec3>,
    pub durations: Vec<f64>,
}

impl Decision {
    fn pack(&self) -> Vec<f64> {
        let mut x: Vec<f64> = self.waypoints.iter().flat_map(|w| w.iter().copied()).collect();
        x.extend(self.durations.iter().map(|t| t.ln()));
        x
    }

    fn unpack(x: &[f64], n_wp: usize) -> Decision {
        Decision {
            waypoints: (0..n_wp).map(|i| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])).collect(),
            durations: x[3 * n_wp..].iter().map(|t| t.exp()).collect(),
        }
    }
}

/// Boundary states from one-sided second-order differences of the frames.
pub fn estimate_boundary(frames: &[StateFrame]) -> Result<(FlatState, FlatState), PostprocessError> {
    if frames.len() < 4 {
        return Err(PostprocessError::InvalidInput("need at least four frames".into()));
    }
    let h = FRAME_DT;
    let p = |i: usize| frames[i].p;
    let n = frames.len() - 1;
    let head = FlatState {
        p: p(0),
        v: (-3.0 * p(0) + 4.0 * p(1) - p(2)) / (2.0 * h),
        a: (2.0 * p(0) - 5.0 * p(1) + 4.0 * p(2) - p(3)) / (h * h),
        ..FlatState::at_rest(p(0))
    };
    let tail = FlatState {
        p: p(n),
        v: (3.0 * p(n) - 4.0 * p(n - 1) + p(n - 2)) / (2.0 * h),
        a: (2.0 * p(n) - 5.0 * p(n - 1) + 4.0 * p(n - 2) - p(n - 3)) / (h * h),
        ..FlatState::at_rest(p(n))
    };
    Ok((head, tail))
}

/// Split segments that are too long or whose seed box is not free.
pub fn refine_keyframes(
    frames: &[StateFrame],
    mut kf: Keyframes,
    grid: Option<&SdfGrid>,
    corridor: &CorridorParams,
    max_segment_frames: usize,
) -> Result<Keyframes, PostprocessError> {
    loop {
        let mut split = None;
        for w in kf.indices.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi - lo < 2 {
                continue;
            }
            let too_long = hi - lo > max_segment_frames;
            let blocked = grid
                .map(|g| !box_is_free(&seed_box(frames, lo, hi, corridor.r_quad), g, corridor.margin))
                .unwrap_or(false);
            if too_long || blocked {
                split = Some((lo + hi) / 2);
                break;
            }
        }
        match split {
            Some(k) => kf.insert(frames, k)?,
            None => return Ok(kf),
        }
    }
}

fn open_corridor(frames: &[StateFrame], kf: &Keyframes, params: &CorridorParams) -> Corridor {
    let boxes: Vec<Aabb> = kf
        .indices
        .windows(2)
        .map(|w| {
            let b = seed_box(frames, w[0], w[1], params.r_quad);
            Aabb::new(b.min.add_scalar(-params.max_expand), b.max.add_scalar(params.max_expand))
        })
        .collect();
    Corridor {
        polyhedra: boxes.iter().map(Polyhedron::from_box).collect(),
        boxes,
    }
}

/// Build the optimization problem and its initial guess from chained frames.
pub fn prepare_problem(
    frames: &[StateFrame],
    grid: Option<&SdfGrid>,
    boundary: Option<(FlatState, FlatState)>,
    params: &QuadParams,
    config: &PostprocessConfig,
) -> Result<(OptProblem, Decision), PostprocessError> {
    params.validate()?;
    let kf = extract_keyframes(frames, config.alpha_deg.to_radians())?;
    let kf = refine_keyframes(frames, kf, grid, &config.corridor, config.max_segment_frames)?;
    let corridor = match grid {
        Some(g) => build_corridor(frames, &kf, g, &config.corridor)?,
        None => open_corridor(frames, &kf, &config.corridor),
    };
    let (head, tail) = match boundary {
        Some(b) => b,
        None => estimate_boundary(frames)?,
    };
    let axes: Vec<Vec3> = frames.iter().map(|f| f.r.z_axis()).collect::<Result<_, _>>()?;
    let yaw = config.heading.resolve(&axes);
    let init = Decision {
        waypoints: kf.waypoints[1..kf.len() - 1].to_vec(),
        durations: kf.stamps.windows(2).map(|w| w[1] - w[0]).collect(),
    };
    let problem = OptProblem {
        keyframes: kf,
        corridor,
        params: *params,
        weights: config.weights.clone(),
        quad_points: config.quad_points,
        omega_z_on: true,
        limits: PenaltyLimits::tightened(params, config.limit_scale),
        s: config.s,
        yaw,
        head,
        tail,
    };
    problem.validate()?;
    Ok((problem, init))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub omega_z_on: bool,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    pub j_trace: Vec<f64>,
    pub costs: CostBreakdown,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityAudit {
    pub samples_per_segment: usize,
    pub max_speed: f64,
    pub min_thrust: f64,
    pub max_thrust: f64,
    pub max_omega_xy: f64,
    pub max_omega_z: f64,
    pub corridor_violation: f64,
    pub min_attitude_cos: f64,
    pub violation_velocity: f64,
    pub violation_thrust: f64,
    pub violation_omega_xy: f64,
    pub violation_omega_z: f64,
}

impl FeasibilityAudit {
    /// Dynamic limits hold within `tol`.
    pub fn dynamically_feasible(&self, tol: f64) -> bool {
        [
            self.violation_velocity,
            self.violation_thrust,
            self.violation_omega_xy,
            self.violation_omega_z,
        ]
        .iter()
        .all(|v| *v <= tol)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptReport {
    pub stages: Vec<StageReport>,
    pub converged: bool,
    pub audit: FeasibilityAudit,
    pub keyframe_indices: Vec<usize>,
    pub yaw: f64,
}

#[derive(Debug, Clone)]
pub struct OptOutcome {
    pub spline: PolySpline,
    pub decision: Decision,
    pub report: OptReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    /// ω_z penalty off, then fully constrained from the warm start.
    TwoStage,
    /// Fully constrained from the start with the combined iteration budget.
    SingleStage,
}

fn run_stage(problem: &OptProblem, init: &Decision, iters: usize) -> Result<(Decision, StageReport), PostprocessError> {
    let start = Instant::now();
    let n_wp = init.waypoints.len();
    let objective = |x: &[f64]| {
        let d = Decision::unpack(x, n_wp);
        let ev = eval_costs(problem, &d.waypoints, &d.durations).ok()?;
        let mut g: Vec<f64> = ev.grad_waypoints.iter().flat_map(|w| w.iter().copied()).collect();
        g.extend(ev.grad_durations.iter().zip(&d.durations).map(|(gt, t)| gt * t));
        if !ev.breakdown.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((ev.breakdown.total, g))
    };
    let lb = LbfgsParams {
        max_iters: iters,
        ..LbfgsParams::default()
    };
    let res = match minimize(objective, &init.pack(), &lb) {
        Some(r) => r,
        None => {
            // surface the underlying evaluation error at the initial point
            eval_costs(problem, &init.waypoints, &init.durations)?;
            return Err(PostprocessError::InvalidInput("non-finite objective at the initial guess".into()));
        }
    };
    let d = Decision::unpack(&res.x, n_wp);
    let ev = eval_costs(problem, &d.waypoints, &d.durations)?;
    Ok((
        d,
        StageReport {
            omega_z_on: problem.omega_z_on,
            iterations: res.iterations,
            converged: res.converged,
            line_search_failed: res.line_search_failed,
            j_trace: res.trace,
            costs: ev.breakdown,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

pub fn hierarchical_optimize(
    problem: &OptProblem,
    init: &Decision,
    config: &PostprocessConfig,
    mode: SolveMode,
) -> Result<OptOutcome, PostprocessError> {
    problem.validate()?;
    let mut stages = Vec::new();
    let decision = match mode {
        SolveMode::TwoStage => {
            let relaxed = OptProblem {
                omega_z_on: false,
                ..problem.clone()
            };
            let (d1, r1) = run_stage(&relaxed, init, config.stage1_iters)?;
            stages.push(r1);
            let full = OptProblem {
                omega_z_on: true,
                ..problem.clone()
            };
            let (d2, r2) = run_stage(&full, &d1, config.stage2_iters)?;
            stages.push(r2);
            d2
        }
        SolveMode::SingleStage => {
            let full = OptProblem {
                omega_z_on: true,
                ..problem.clone()
            };
            let (d, r) = run_stage(&full, init, config.stage1_iters + config.stage2_iters)?;
            stages.push(r);
            d
        }
    };
    let ev = eval_costs(problem, &decision.waypoints, &decision.durations)?;
    let audit = audit_trajectory(&ev.spline, problem, config.audit_samples)?;
    let converged = stages.last().map(|s| s.converged).unwrap_or(false);
    Ok(OptOutcome {
        spline: ev.spline,
        decision,
        report: OptReport {
            stages,
            converged,
            audit,
            keyframe_indices: problem.keyframes.indices.clone(),
            yaw: problem.yaw,
        },
    })
}

/// Dense audit against the vehicle limits (not the tightened ones).
pub fn audit_trajectory(
    spline: &PolySpline,
    problem: &OptProblem,
    samples_per_segment: usize,
) -> Result<FeasibilityAudit, PostprocessError> {
    let p = &problem.params;
    let n = samples_per_segment.max(2);
    let mut au = FeasibilityAudit {
        samples_per_segment: n,
        min_thrust: f64::INFINITY,
        corridor_violation: f64::NEG_INFINITY,
        min_attitude_cos: f64::INFINITY,
        ..Default::default()
    };
    let knots = spline.knot_times();
    for i in 0..spline.n_segments() {
        let poly = problem.corridor.polyhedra.get(i);
        for k in 0..n {
            let t = knots[i] + spline.durations[i] * k as f64 / (n - 1) as f64;
            let tl = spline.durations[i] * k as f64 / (n - 1) as f64;
            let st = FlatState {
                p: spline.eval_segment(i, tl, 0),
                v: spline.eval_segment(i, tl, 1),
                a: spline.eval_segment(i, tl, 2),
                j: spline.eval_segment(i, tl, 3),
                yaw: problem.yaw,
                yaw_rate: 0.0,
            };
            let f = flat_thrust(&st.a, p).norm();
            let w = flat_bodyrate(&st, p).map_err(|e| PostprocessError::FlatnessSingularity {
                time: t,
                reason: e.to_string(),
            })?;
            au.max_speed = au.max_speed.max(st.v.norm());
            au.max_thrust = au.max_thrust.max(f);
            au.min_thrust = au.min_thrust.min(f);
            au.max_omega_xy = au.max_omega_xy.max(w.x.hypot(w.y));
            au.max_omega_z = au.max_omega_z.max(w.z.abs());
            if let Some(poly) = poly {
                au.corridor_violation = au.corridor_violation.max(poly.violation(&st.p));
            }
        }
    }
    for (kidx, z) in problem.keyframes.z_ref.iter().enumerate() {
        let a = spline.eval(knots[kidx], 2);
        let f = flat_thrust(&a, p);
        au.min_attitude_cos = au.min_attitude_cos.min(f.dot(z) / f.norm());
    }
    au.violation_velocity = (au.max_speed - p.v_max).max(0.0);
    au.violation_thrust = (au.max_thrust - p.f_max).max(p.f_min - au.min_thrust).max(0.0);
    au.violation_omega_xy = (au.max_omega_xy - p.omega_max_xy).max(0.0);
    au.violation_omega_z = (au.max_omega_z - p.omega_max_z).max(0.0);
    Ok(au)
}

/// One-call pipeline: keyframes, corridor, two-stage solve, audit.
pub fn postprocess_frames(
    frames: &[StateFrame],
    grid: Option<&SdfGrid>,
    boundary: Option<(FlatState, FlatState)>,
    params: &QuadParams,
    config: &PostprocessConfig,
) -> Result<(OptProblem, OptOutcome), PostprocessError> {
    let (problem, init) = prepare_problem(frames, grid, boundary, params, config)?;
    let out = hierarchical_optimize(&problem, &init, config, SolveMode::TwoStage)?;
    Ok((problem, out))
}

/// Sampled trajectory as CSV: time, position, velocity, acceleration, thrust,
/// body rates and attitude quaternion (w, x, y, z).
pub fn trajectory_csv(spline: &PolySpline, yaw: f64, params: &QuadParams, rate_hz: f64) -> Result<String, PostprocessError> {
    let mut out = String::from("t,px,py,pz,vx,vy,vz,ax,ay,az,fx,fy,fz,wx,wy,wz,qw,qx,qy,qz\n");
    let total = spline.total_duration();
    let n = (total * rate_hz).floor() as usize;
    for k in 0..=n {
        let t = (k as f64 / rate_hz).min(total);
        let st = spline.flat_state(t, yaw);
        let f = flat_thrust(&st.a, params);
        let to_err = |e: crate::kinematics::KinematicsError| PostprocessError::FlatnessSingularity {
            time: t,
            reason: e.to_string(),
        };
        let w = flat_bodyrate(&st, params).map_err(to_err)?;
        let r = flat_attitude(&st, params).map_err(to_err)?;
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        let vals = [
            t, st.p.x, st.p.y, st.p.z, st.v.x, st.v.y, st.v.z, st.a.x, st.a.y, st.a.z, f.x, f.y, f.z, w.x, w.y,
            w.z, q.w, q.i, q.j, q.k,
        ];
        let line: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{attitude_from_axis, matrix_to_rot6d};
    use crate::postprocess::spline::spline_from_waypoints;

    /// Frames sampled from a gentle rest-to-rest spline.
    fn gentle_frames() -> (Vec<StateFrame>, FlatState, FlatState) {
        let head = FlatState::at_rest(Vec3::zeros());
        let tail = FlatState::at_rest(Vec3::new(4.0, 1.0, 0.5));
        let sp = spline_from_waypoints(&[Vec3::new(2.0, 1.5, 0.3)], &[2.0, 2.0], &head, &tail, 3).unwrap();
        let p = QuadParams::default();
        let frames = (0..=40)
            .map(|k| {
                let st = sp.flat_state(k as f64 * FRAME_DT, 0.0);
                let z = flat_thrust(&st.a, &p).normalize();
                StateFrame::new(st.p, matrix_to_rot6d(&attitude_from_axis(&z, 0.0).unwrap()).unwrap())
            })
            .collect();
        (frames, head, tail)
    }

    #[test]
    fn feasible_instance_stays_put_in_stage_two() {
        let (frames, head, tail) = gentle_frames();
        let cfg = PostprocessConfig::default();
        let p = QuadParams::default();
        let (problem, out) = postprocess_frames(&frames, None, Some((head, tail)), &p, &cfg).unwrap();
        let s1 = out.report.stages[0].costs.total;
        let s2 = out.report.stages[1].costs.total;
        assert!((s1 - s2).abs() <= 0.01 * s1.abs(), "{s1} -> {s2}");
        assert!(out.report.audit.dynamically_feasible(1e-3));
        assert!(out.report.audit.corridor_violation <= 1e-3);
        assert_eq!(problem.keyframes.indices[0], 0);
    }

    #[test]
    fn boundary_estimate_is_exact_for_quadratics() {
        let frames: Vec<StateFrame> = (0..6)
            .map(|k| {
                let t = k as f64 * FRAME_DT;
                StateFrame::new(Vec3::new(t * t, 2.0 * t, 1.0), crate::Rot6D::identity())
            })
            .collect();
        let (h, t) = estimate_boundary(&frames).unwrap();
        assert!((h.v - Vec3::new(0.0, 2.0, 0.0)).norm() < 1e-9);
        assert!((h.a - Vec3::new(2.0, 0.0, 0.0)).norm() < 1e-9);
        assert!((t.v - Vec3::new(1.0, 2.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let (frames, head, tail) = gentle_frames();
        let (problem, init) =
            prepare_problem(&frames, None, Some((head, tail)), &QuadParams::default(), &PostprocessConfig::default())
                .unwrap();
        let ev = eval_costs(&problem, &init.waypoints, &init.durations).unwrap();
        let csv = trajectory_csv(&ev.spline, problem.yaw, &problem.params, 50.0).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), 20);
        assert_eq!(lines.len(), 1 + 201);
    }
}
