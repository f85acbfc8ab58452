//! Expert primitive dataset from parametric maneuver templates.
//!
//! Each primitive is cut from one continuous C² curve: a prior transition
//! (source of the history window), a lead-in, the maneuver core, a connector
//! and a short straight coast that ends exactly on the target. Positions are
//! anchored so that `history[0].p` is the origin and the entry heading is +x.
//! Attitudes follow the thrust axis with zero twist about body z.

use crate::binio::{self, invalid};
use crate::kinematics::{
    attitude_from_axis, flat_thrust, matrix_to_rot6d, transport_attitude, FlatState, Mat3, QuadParams, Rot6D,
    StateFrame, Vec3, FRAME_DT,
};
use crate::postprocess::spline::{spline_from_waypoints, PolySpline};
use nalgebra::Rotation3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const N_A: usize = 60;
pub const N_H: usize = 5;
pub const CHANNELS: usize = 10;
const MAGIC: &[u8; 5] = b"AERO1";
const VERSION: u32 = 1;
/// Longest template (s); leaves room in the 6 s window.
pub const MAX_TEMPLATE_DURATION: f64 = 5.5;
const COAST_DURATION: f64 = 0.5;
const STRETCH: f64 = 1.25;
const MAX_TRANSITION: f64 = 3.0;
const MIN_TARGET_DISTANCE: f64 = 0.25;
const TEMPLATE_ATTEMPTS: usize = 60;
/// Fine step for attitude transport and template checks.
const FINE_DT: f64 = FRAME_DT / 20.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("target {target:?} lies within {MIN_TARGET_DISTANCE} m of the entry point")]
    Degenerate { target: Vec3 },
    #[error("entry speed {0:.3} m/s outside [0.5, 8]")]
    EntrySpeed(f64),
    #[error("{action:?} template rejected: {rule}")]
    TemplateRule { action: ActionLabel, rule: String },
    #[error("curve of {duration:.2} s does not fit {n_a} frames; regenerate the template")]
    DurationOverflow { duration: f64, n_a: usize },
    #[error("invalid primitive: {0}")]
    Invalid(String),
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionLabel {
    PowerLoop,
    BarrelRoll,
    SplitS,
    ImmelmannTurn,
    WallRide,
    /// Action omitted (inference only).
    None,
}

impl ActionLabel {
    pub const MANEUVERS: [ActionLabel; 5] = [
        ActionLabel::PowerLoop,
        ActionLabel::BarrelRoll,
        ActionLabel::SplitS,
        ActionLabel::ImmelmannTurn,
        ActionLabel::WallRide,
    ];
    /// Size of the one-hot action encoding (maneuvers + null).
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        match self {
            ActionLabel::PowerLoop => 0,
            ActionLabel::BarrelRoll => 1,
            ActionLabel::SplitS => 2,
            ActionLabel::ImmelmannTurn => 3,
            ActionLabel::WallRide => 4,
            ActionLabel::None => 5,
        }
    }

    pub fn from_index(i: usize) -> Option<ActionLabel> {
        Self::MANEUVERS.get(i).copied().or(if i == 5 { Some(ActionLabel::None) } else { None })
    }
}

/// One dataset sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub frames: Vec<StateFrame>,
    pub history: Vec<StateFrame>,
    pub target: Vec3,
    pub action: ActionLabel,
    /// Index of the first padding frame, or `frames.len()`.
    pub active_len: usize,
}

fn rotate_frame(f: &StateFrame, rot: &Mat3, pivot: &Vec3) -> StateFrame {
    StateFrame {
        padding: f.padding,
        p: rot * (f.p - pivot) + pivot,
        r: Rot6D {
            a1: rot * f.r.a1,
            a2: rot * f.r.a2,
        },
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

impl Primitive {
    pub fn active(&self) -> &[StateFrame] {
        &self.frames[..self.active_len]
    }

    /// Rotate about the world z-axis through `pivot`.
    pub fn rotated_z(&self, angle: f64, pivot: &Vec3) -> Primitive {
        let rot = *Rotation3::from_axis_angle(&Vec3::z_axis(), angle).matrix();
        Primitive {
            frames: self.frames.iter().map(|f| rotate_frame(f, &rot, pivot)).collect(),
            history: self.history.iter().map(|f| rotate_frame(f, &rot, pivot)).collect(),
            target: rot * (self.target - pivot) + pivot,
            action: self.action,
            active_len: self.active_len,
        }
    }

    pub fn translated(&self, d: &Vec3) -> Primitive {
        let mv = |f: &StateFrame| StateFrame { p: f.p + d, ..*f };
        Primitive {
            frames: self.frames.iter().map(mv).collect(),
            history: self.history.iter().map(mv).collect(),
            target: self.target + d,
            action: self.action,
            active_len: self.active_len,
        }
    }

    /// Round every value to f32 so the in-memory copy equals the stored one.
    pub fn quantized(&self) -> Primitive {
        let q = |f: &StateFrame| StateFrame::from_channels(&f.to_channels().map(quantize));
        Primitive {
            frames: self.frames.iter().map(q).collect(),
            history: self.history.iter().map(q).collect(),
            target: self.target.map(quantize),
            action: self.action,
            active_len: self.active_len,
        }
    }

    pub fn validate(&self, params: &QuadParams, n_a: usize, n_h: usize, target_tol: f64) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Invalid(m));
        if self.frames.len() != n_a || self.history.len() != n_h {
            return bad(format!(
                "expected {n_a} frames and {n_h} history, got {} and {}",
                self.frames.len(),
                self.history.len()
            ));
        }
        if self.active_len == 0 || self.active_len > n_a {
            return bad(format!("active_len {} out of range", self.active_len));
        }
        for (i, f) in self.frames.iter().enumerate() {
            if f.padding != (i >= self.active_len) {
                return bad(format!("padding flag of frame {i} inconsistent with active_len {}", self.active_len));
            }
        }
        if self.history.iter().any(|f| f.padding) {
            return bad("history frame flagged as padding".into());
        }
        let step = params.v_max * FRAME_DT + 1e-4;
        let seq: Vec<&StateFrame> = self.history.iter().chain(self.active()).collect();
        for (k, w) in seq.windows(2).enumerate() {
            let d = (w[1].p - w[0].p).norm();
            if d > step {
                return bad(format!("step {k} moves {d:.3} m (> {step:.3})"));
            }
        }
        for f in self.history.iter().chain(&self.frames) {
            let m = f.r.to_matrix().map_err(|e| DatasetError::Invalid(e.to_string()))?;
            let orth = (m.transpose() * m - Mat3::identity()).abs().max();
            if orth > 1e-5 || (f.r.a1.norm() - 1.0).abs() > 1e-5 || f.r.a1.dot(&f.r.a2).abs() > 1e-5 {
                return bad("rotation channels are not orthonormal".into());
            }
        }
        let end = self.frames[self.active_len - 1].p;
        let err = (end - self.target).norm();
        if err > target_tol {
            return bad(format!("terminal error {err:.3} m exceeds {target_tol}"));
        }
        for f in &self.frames[self.active_len..] {
            if f.p != end {
                return bad("padding frames must repeat the terminal state".into());
            }
        }
        Ok(())
    }
}

/// Curve of one template, time zero at the entry state.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateCurve {
    pub action: ActionLabel,
    pub spline: PolySpline,
    /// Maneuver core interval within the curve.
    pub core: (f64, f64),
}

impl TemplateCurve {
    pub fn duration(&self) -> f64 {
        self.spline.total_duration()
    }
}

/// Analytic maneuver sketch in a local frame: starts at the origin.
struct Sketch {
    duration: f64,
    eval: Box<dyn Fn(f64) -> [Vec3; 3]>,
}

fn rot_z(angle: f64) -> Mat3 {
    *Rotation3::from_axis_angle(&Vec3::z_axis(), angle).matrix()
}

fn heading_of(v: &Vec3) -> f64 {
    v.y.atan2(v.x)
}

impl Sketch {
    /// Rotate so the initial horizontal velocity points along +x.
    fn aligned(self) -> Sketch {
        let v0 = (self.eval)(0.0)[1];
        let rot = rot_z(-heading_of(&v0));
        let eval = self.eval;
        Sketch {
            duration: self.duration,
            eval: Box::new(move |t| eval(t).map(|x| rot * x)),
        }
    }

    fn time_reversed(self) -> Sketch {
        let d = self.duration;
        let eval = self.eval;
        let end = eval(d)[0];
        Sketch {
            duration: d,
            eval: Box::new(move |t| {
                let [p, v, a] = eval(d - t);
                [p - end, -v, a]
            }),
        }
    }
}

fn power_loop(rng: &mut ChaCha8Rng, g: f64) -> Sketch {
    let r = rng.random_range(1.2..=2.5);
    let v = rng.random_range(1.3..=1.45) * (g * r).sqrt();
    let drift = rng.random_range(0.0..=0.4);
    let w = v / r;
    Sketch {
        duration: 2.0 * PI / w,
        eval: Box::new(move |t| {
            let th = w * t;
            let (s, c) = th.sin_cos();
            [
                Vec3::new(r * s + drift * t, 0.0, r * (1.0 - c)),
                Vec3::new(v * c + drift, 0.0, v * s),
                Vec3::new(-v * w * s, 0.0, v * w * c),
            ]
        }),
    }
}

/// Helix `(u t, σρ sin Ωt, ρ(1 − cos Ωt))` with `ρΩ² = k·g`.
fn helix(u: f64, omega: f64, k: f64, sign: f64, g: f64, turns: f64) -> Sketch {
    let rho = k * g / (omega * omega);
    Sketch {
        duration: turns * 2.0 * PI / omega,
        eval: Box::new(move |t| {
            let (s, c) = (omega * t).sin_cos();
            [
                Vec3::new(u * t, sign * rho * s, rho * (1.0 - c)),
                Vec3::new(u, sign * rho * omega * c, rho * omega * s),
                Vec3::new(0.0, -sign * rho * omega * omega * s, rho * omega * omega * c),
            ]
        }),
    }
}

fn barrel_roll(rng: &mut ChaCha8Rng, g: f64) -> Sketch {
    let period = rng.random_range(1.2..=1.8);
    let advance = rng.random_range(2.0..=4.0);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    helix(advance / period, 2.0 * PI / period, rng.random_range(2.2..=2.6), sign, g, 1.0)
}

/// Half roll into inverted flight, then a descending half loop in the
/// vertical plane of the entry direction. The lateral drift of the roll is
/// kept through the loop so the exit velocity is exactly reversed.
fn split_s(rng: &mut ChaCha8Rng, g: f64) -> Sketch {
    let half = rng.random_range(0.65..=0.85);
    let omega = PI / half;
    let k = rng.random_range(1.9..=2.2);
    let u = rng.random_range(4.5..=5.5);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let roll = helix(u, omega, k, sign, g, 0.5);
    let [pj, vj, _] = (roll.eval)(half);
    let drift = vj.y;
    let rb = u * u / (k * g);
    let phidot = u / rb;
    let loop_t = PI / phidot;
    let roll_eval = roll.eval;
    let duration = half + loop_t;
    // steady sink so the roll's climb never outweighs the loop's drop
    let sink = (2.0 * (pj.z - rb) + rng.random_range(0.3..=0.8)).max(0.0) / duration;
    Sketch {
        duration,
        eval: Box::new(move |t| {
            let [p, v, a] = if t <= half {
                roll_eval(t)
            } else {
                let tl = t - half;
                let (s, c) = (phidot * tl).sin_cos();
                [
                    pj + Vec3::new(rb * s, drift * tl, rb * (c - 1.0)),
                    Vec3::new(u * c, drift, -u * s),
                    Vec3::new(-u * phidot * s, 0.0, -u * phidot * c),
                ]
            };
            [p - Vec3::z() * (sink * t), v - Vec3::z() * sink, a]
        }),
    }
}

fn wall_ride(rng: &mut ChaCha8Rng, g: f64, sign: f64) -> Sketch {
    let r = rng.random_range(1.2..=2.0);
    let bank = rng.random_range(62f64..=70.0).to_radians();
    let acc = g * bank.tan();
    let v = (acc * r).sqrt();
    let sweep = rng.random_range(0.5 * PI..=PI);
    let w = v / r;
    Sketch {
        duration: sweep / w,
        eval: Box::new(move |t| {
            let (s, c) = (w * t).sin_cos();
            [
                Vec3::new(r * s, sign * r * (1.0 - c), 0.0),
                Vec3::new(v * c, sign * v * s, 0.0),
                Vec3::new(-acc * s, sign * acc * c, 0.0),
            ]
        }),
    }
}

fn quintic(from: &FlatState, to: &FlatState, t: f64) -> PolySpline {
    spline_from_waypoints(&[], &[t], from, to, 3).expect("single-segment quintic with positive duration")
}

fn flat(p: Vec3, v: Vec3, a: Vec3) -> FlatState {
    FlatState {
        p,
        v,
        a,
        ..FlatState::at_rest(p)
    }
}

/// Min-jerk fit of a sketch through its 0.1 s samples with exact boundary
/// states, placed by `rot` and `origin`.
fn fit_sketch(sk: &Sketch, rot: &Mat3, origin: &Vec3) -> PolySpline {
    let n = ((sk.duration / FRAME_DT).round() as usize).max(2);
    let h = sk.duration / n as f64;
    let at = |t: f64| {
        let [p, v, a] = (sk.eval)(t);
        flat(rot * p + origin, rot * v, rot * a)
    };
    let wps: Vec<Vec3> = (1..n).map(|k| at(k as f64 * h).p).collect();
    spline_from_waypoints(&wps, &vec![h; n], &at(0.0), &at(sk.duration), 3)
        .expect("positive durations give a regular system")
}

fn concat(parts: &[PolySpline]) -> PolySpline {
    PolySpline {
        s: 3,
        durations: parts.iter().flat_map(|p| p.durations.iter().copied()).collect(),
        coeffs: parts.iter().flat_map(|p| p.coeffs.iter().copied()).collect(),
    }
}

fn thrust_axis(a: &Vec3, params: &QuadParams) -> Vec3 {
    flat_thrust(a, params).normalize()
}

/// Total angle swept by the thrust axis over `[t0, t1]`.
fn z_sweep(sp: &PolySpline, t0: f64, t1: f64, params: &QuadParams) -> f64 {
    let n = ((t1 - t0) / FINE_DT).ceil() as usize;
    let mut total = 0.0;
    let mut prev = thrust_axis(&sp.eval(t0, 2), params);
    for k in 1..=n {
        let t = t0 + (t1 - t0) * k as f64 / n as f64;
        let z = thrust_axis(&sp.eval(t, 2), params);
        total += prev.dot(&z).clamp(-1.0, 1.0).acos();
        prev = z;
    }
    total
}

fn check_limits(sp: &PolySpline, params: &QuadParams, action: ActionLabel, piece: &str) -> Result<(), DatasetError> {
    let rule = |r: String| {
        Err(DatasetError::TemplateRule {
            action,
            rule: format!("{piece}: {r}"),
        })
    };
    let total = sp.total_duration();
    let n = (total / FINE_DT).ceil() as usize;
    for k in 0..=n {
        let t = (k as f64 * FINE_DT).min(total);
        let v = sp.eval(t, 1);
        let a = sp.eval(t, 2);
        let j = sp.eval(t, 3);
        let f = flat_thrust(&a, params);
        let fnorm = f.norm();
        if v.norm() > params.v_max {
            return rule(format!("speed {:.2} m/s at t={t:.2}", v.norm()));
        }
        if fnorm < params.f_min || fnorm > params.f_max {
            return rule(format!("thrust {fnorm:.2} N at t={t:.2}"));
        }
        let z = f / fnorm;
        let fdot = params.mass * j;
        let zdot = (fdot - z * z.dot(&fdot)) / fnorm;
        if zdot.norm() > params.omega_max_xy {
            return rule(format!("tilt rate {:.2} rad/s at t={t:.2}", zdot.norm()));
        }
    }
    Ok(())
}

fn horizontal_heading_change(a: &Vec3, b: &Vec3) -> f64 {
    let ha = Vec3::new(a.x, a.y, 0.0).normalize();
    let hb = Vec3::new(b.x, b.y, 0.0).normalize();
    ha.dot(&hb).clamp(-1.0, 1.0).acos()
}

fn check_signature(curve: &TemplateCurve, params: &QuadParams) -> Result<(), DatasetError> {
    let action = curve.action;
    let rule = |r: String| Err(DatasetError::TemplateRule { action, rule: r });
    let (t0, t1) = curve.core;
    let sp = &curve.spline;
    match action {
        ActionLabel::PowerLoop | ActionLabel::BarrelRoll => {
            let sweep = z_sweep(sp, t0, t1, params);
            if sweep < 1.8 * PI {
                return rule(format!("z-axis sweep {sweep:.3} rad < 1.8π"));
            }
        }
        ActionLabel::SplitS | ActionLabel::ImmelmannTurn => {
            let turn = horizontal_heading_change(&sp.eval(t0, 1), &sp.eval(t1, 1));
            if turn < 0.7 * PI {
                return rule(format!("heading reversal {turn:.3} rad < 0.7π"));
            }
            let dz = sp.eval(t1, 0).z - sp.eval(t0, 0).z;
            if action == ActionLabel::SplitS && dz >= 0.0 {
                return rule(format!("altitude change {dz:.3} m is not a descent"));
            }
            if action == ActionLabel::ImmelmannTurn && dz <= 0.0 {
                return rule(format!("altitude change {dz:.3} m is not a climb"));
            }
        }
        ActionLabel::WallRide => {
            let mid = 0.5 * (t0 + t1);
            let tilt = thrust_axis(&sp.eval(mid, 2), params).z.clamp(-1.0, 1.0).acos();
            if tilt < 60f64.to_radians() {
                return rule(format!("bank {:.1}° < 60°", tilt.to_degrees()));
            }
        }
        ActionLabel::None => return rule("no template for the null action".into()),
    }
    Ok(())
}

/// One randomized template from `entry` to `target` (world frame). Returns a
/// rule error when a sampled parameter set violates a limit or the maneuver
/// signature; callers retry with fresh randomness.
pub fn generate_template(
    action: ActionLabel,
    target: &Vec3,
    entry: &FlatState,
    params: &QuadParams,
    rng: &mut ChaCha8Rng,
) -> Result<TemplateCurve, DatasetError> {
    let speed = entry.v.norm();
    if !(0.5..=8.0).contains(&speed) {
        return Err(DatasetError::EntrySpeed(speed));
    }
    if (target - entry.p).norm() < MIN_TARGET_DISTANCE {
        return Err(DatasetError::Degenerate { target: *target });
    }
    let g = params.g;
    // local frame: entry at origin heading +x
    let psi_e = heading_of(&entry.v);
    let to_local = rot_z(-psi_e);
    let to_world = rot_z(psi_e);
    let tgt = to_local * (target - entry.p);
    let entry_l = flat(Vec3::zeros(), to_local * entry.v, to_local * entry.a);

    let side = if tgt.y >= 0.0 { 1.0 } else { -1.0 };
    let sketch = match action {
        ActionLabel::PowerLoop => power_loop(rng, g),
        ActionLabel::BarrelRoll => barrel_roll(rng, g),
        ActionLabel::SplitS => split_s(rng, g),
        ActionLabel::ImmelmannTurn => split_s(rng, g).time_reversed(),
        ActionLabel::WallRide => wall_ride(rng, g, side),
        ActionLabel::None => {
            return Err(DatasetError::TemplateRule {
                action,
                rule: "no template for the null action".into(),
            })
        }
    }
    .aligned();

    let bearing = tgt.y.atan2(tgt.x);
    let psi_c = (0.5 * bearing).clamp(-PI / 4.0, PI / 4.0) + rng.random_range(-0.15..=0.15);
    let core_rot = rot_z(psi_c);
    let core_v0 = (sketch.eval)(0.0)[1].norm();
    let place = |t: f64, origin: &Vec3| {
        let [p, v, a] = (sketch.eval)(t);
        flat(core_rot * p + origin, core_rot * v, core_rot * a)
    };
    // stretch the transitions until they respect the limits
    let mut lead_t = rng.random_range(0.6..=1.2);
    let (lead, core_origin) = loop {
        let lead_len = lead_t * 0.5 * (entry_l.v.norm() + core_v0);
        let origin = rot_z(0.5 * psi_c) * Vec3::new(lead_len, 0.0, 0.0);
        let lead = quintic(&entry_l, &place(0.0, &origin), lead_t);
        match check_limits(&lead, params, action, "lead-in") {
            Ok(()) => break (lead, origin),
            Err(e) if lead_t * STRETCH > MAX_TRANSITION => return Err(e),
            Err(_) => lead_t *= STRETCH,
        }
    };
    let core = fit_sketch(&sketch, &core_rot, &core_origin);
    let core_end = place(sketch.duration, &core_origin);

    let coast_speed = rng.random_range(1.5..=3.5);
    let dir = (tgt - core_end.p).normalize();
    let coast_v = dir * coast_speed;
    let coast_start = flat(tgt - coast_v * COAST_DURATION, coast_v, Vec3::zeros());
    let dist = (coast_start.p - core_end.p).norm();
    let cos_turn = core_end.v.normalize().dot(&dir);
    let mut conn_t = (2.0 * dist / (core_end.v.norm() + coast_speed) + 0.5 * (1.0 - cos_turn)).max(0.6);
    let connector = loop {
        let raw = lead_t + sketch.duration + conn_t + COAST_DURATION;
        let total = (raw / FRAME_DT - 1e-9).ceil() * FRAME_DT;
        if total > MAX_TEMPLATE_DURATION + 1e-9 {
            return Err(DatasetError::TemplateRule {
                action,
                rule: format!("duration {total:.2} s exceeds {MAX_TEMPLATE_DURATION} s"),
            });
        }
        let connector = quintic(&core_end, &coast_start, conn_t + total - raw);
        match check_limits(&connector, params, action, "connector") {
            Ok(()) => break connector,
            Err(e) if conn_t * STRETCH > MAX_TRANSITION => return Err(e),
            Err(_) => conn_t *= STRETCH,
        }
    };
    let coast = quintic(&coast_start, &flat(tgt, coast_v, Vec3::zeros()), COAST_DURATION);
    let mut spline = concat(&[lead, core, connector, coast]);
    // back to the world frame
    let nc = spline.n_coeffs();
    for (k, c) in spline.coeffs.iter_mut().enumerate() {
        *c = to_world * *c;
        if k % nc == 0 {
            *c += entry.p;
        }
    }
    let core_range = (lead_t, lead_t + sketch.duration);
    let curve = TemplateCurve {
        action,
        spline,
        core: core_range,
    };
    check_limits(&curve.spline, params, action, "curve")?;
    check_signature(&curve, params)?;
    Ok(curve)
}

/// Attitudes along `sp` at the requested times (ascending, on the fine grid),
/// transported with zero twist from `initial`.
fn transported_attitudes(sp: &PolySpline, initial: Mat3, times: &[f64], params: &QuadParams) -> Vec<Mat3> {
    let mut out = Vec::with_capacity(times.len());
    let mut r = initial;
    let mut t = 0.0;
    for &target in times {
        let steps = ((target - t) / FINE_DT).round() as i64;
        for _ in 0..steps.max(0) {
            t += FINE_DT;
            r = transport_attitude(&r, &thrust_axis(&sp.eval(t, 2), params));
        }
        t = target;
        out.push(r);
    }
    out
}

/// Sample a combined prior+template curve into a primitive. `t_entry` is the
/// entry time within `full`; the template lasts `duration` seconds.
pub fn discretize_primitive(
    full: &PolySpline,
    t_entry: f64,
    duration: f64,
    initial_attitude: Mat3,
    target: &Vec3,
    action: ActionLabel,
    params: &QuadParams,
    n_a: usize,
    n_h: usize,
) -> Result<Primitive, DatasetError> {
    if duration > n_a as f64 * FRAME_DT + 1e-9 {
        return Err(DatasetError::DurationOverflow { duration, n_a });
    }
    let active_len = (duration / FRAME_DT).round() as usize;
    let mut times: Vec<f64> = (0..n_h)
        .map(|k| t_entry - (n_h - 1 - k) as f64 * FRAME_DT)
        .collect();
    times.extend((0..active_len).map(|i| t_entry + (i + 1) as f64 * FRAME_DT));
    if times[0] < -1e-9 {
        return Err(DatasetError::Invalid("prior transition shorter than the history window".into()));
    }
    let att = transported_attitudes(full, initial_attitude, &times, params);
    let frame = |k: usize| -> Result<StateFrame, DatasetError> {
        let r = matrix_to_rot6d(&att[k]).map_err(|e| DatasetError::Invalid(e.to_string()))?;
        Ok(StateFrame::new(full.eval(times[k], 0), r))
    };
    let history = (0..n_h).map(frame).collect::<Result<Vec<_>, _>>()?;
    let mut frames = (n_h..n_h + active_len).map(frame).collect::<Result<Vec<_>, _>>()?;
    let last = *frames.last().ok_or_else(|| DatasetError::Invalid("empty template".into()))?;
    frames.resize(
        n_a,
        StateFrame {
            padding: true,
            ..last
        },
    );
    Ok(Primitive {
        frames,
        history,
        target: *target,
        action,
        active_len,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    /// Target offset bounds relative to `history[0]` in the entry frame.
    pub bounds: [[f64; 2]; 3],
    pub resolution: f64,
    pub actions: Vec<ActionLabel>,
    /// Targets per action; `None` takes the full grid.
    pub targets_per_action: Option<usize>,
    pub augment_deg: Vec<f64>,
    pub seed: u64,
    pub n_a: usize,
    pub n_h: usize,
    pub target_tol: f64,
    /// Half-width (rad) of the uniform entry yaw offset from the entry heading.
    /// Chained primitives exit with arbitrary yaw, so entries must cover it too.
    pub entry_yaw_spread: f64,
    pub params: QuadParams,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            bounds: [[0.0, 8.0], [-6.0, 6.0], [-1.0, 1.0]],
            resolution: 1.0,
            actions: ActionLabel::MANEUVERS.to_vec(),
            targets_per_action: None,
            augment_deg: vec![90.0, 180.0, 270.0],
            seed: 7,
            n_a: N_A,
            n_h: N_H,
            target_tol: 0.15,
            entry_yaw_spread: PI,
            params: QuadParams::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.resolution > 0.0) {
            return Err(DatasetError::Spec("resolution must be positive".into()));
        }
        if self.bounds.iter().any(|b| !(b[1] >= b[0])) {
            return Err(DatasetError::Spec("bounds must be non-empty".into()));
        }
        if self.actions.is_empty() || self.actions.contains(&ActionLabel::None) {
            return Err(DatasetError::Spec("actions must be non-empty maneuvers".into()));
        }
        if !(0.0..=PI).contains(&self.entry_yaw_spread) {
            return Err(DatasetError::Spec("entry_yaw_spread must lie in [0, π]".into()));
        }
        if self.n_h < 2 || self.n_a < 2 {
            return Err(DatasetError::Spec("n_a and n_h must be >= 2".into()));
        }
        self.params.validate().map_err(|e| DatasetError::Spec(e.to_string()))
    }

    pub fn grid_targets(&self) -> Vec<Vec3> {
        let axis = |b: [f64; 2]| -> Vec<f64> {
            let n = ((b[1] - b[0]) / self.resolution + 1e-9).floor() as usize;
            (0..=n).map(|k| b[0] + k as f64 * self.resolution).collect()
        };
        let (xs, ys, zs) = (axis(self.bounds[0]), axis(self.bounds[1]), axis(self.bounds[2]));
        let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
        for &x in &xs {
            for &y in &ys {
                for &z in &zs {
                    out.push(Vec3::new(x, y, z));
                }
            }
        }
        out
    }
}

/// Per-primitive rng stream derived from (seed, index).
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Build one anchored primitive whose target is `offset` from `history[0]`.
pub fn build_primitive(
    action: ActionLabel,
    offset: &Vec3,
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Primitive, DatasetError> {
    let params = &spec.params;
    let mut last_err = None;
    for _ in 0..TEMPLATE_ATTEMPTS {
        let v_e = rng.random_range(1.5..=4.0);
        let entry = flat(Vec3::zeros(), Vec3::new(v_e, 0.0, 0.0), Vec3::zeros());
        let back = rng.random_range(1.0..=3.0);
        let dir = Rotation3::from_euler_angles(0.0, rng.random_range(-0.15..=0.15), rng.random_range(-0.3..=0.3))
            * Vec3::x();
        let v_p = rng.random_range(1.0..=4.0);
        let prior_state = flat(-back * dir, v_p * dir, Vec3::zeros());
        let min_t = (spec.n_h - 1) as f64 * FRAME_DT + FRAME_DT;
        let t_pre = ((2.0 * back / (v_p + v_e)).max(min_t) / FRAME_DT).ceil() * FRAME_DT;
        let prior = quintic(&prior_state, &entry, t_pre);
        let anchor = prior.eval(t_pre - (spec.n_h - 1) as f64 * FRAME_DT, 0);
        let target = anchor + offset;
        let curve = match generate_template(action, &target, &entry, params, rng) {
            Ok(c) => c,
            Err(e @ (DatasetError::TemplateRule { .. } | DatasetError::Degenerate { .. })) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let full = concat(&[prior.clone(), curve.spline.clone()]);
        let z0 = thrust_axis(&full.eval(0.0, 2), params);
        let yaw0 = heading_of(&prior_state.v) + rng.random_range(-spec.entry_yaw_spread..=spec.entry_yaw_spread);
        let r0 = attitude_from_axis(&z0, yaw0).map_err(|e| DatasetError::Invalid(e.to_string()))?;
        let prim = discretize_primitive(
            &full,
            t_pre,
            curve.duration(),
            r0,
            &target,
            action,
            params,
            spec.n_a,
            spec.n_h,
        )?
        .translated(&-anchor);
        match prim.validate(params, spec.n_a, spec.n_h, spec.target_tol) {
            Ok(()) => return Ok(prim),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or(DatasetError::Invalid("no attempts".into())))
}

/// Original plus one copy per angle, each rotated about the world z-axis
/// through its first-frame position and re-anchored at `history[0]`.
pub fn augment_z_rotations(prims: &[Primitive], angles_rad: &[f64]) -> Vec<Primitive> {
    let mut out = Vec::with_capacity(prims.len() * (1 + angles_rad.len()));
    for p in prims {
        out.push(p.clone());
        for &a in angles_rad {
            let r = p.rotated_z(a, &p.frames[0].p);
            let anchor = r.history[0].p;
            out.push(r.translated(&-anchor));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n_a: usize,
    pub n_h: usize,
    pub dt: f64,
    pub primitives: Vec<Primitive>,
}

pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let grid = spec.grid_targets();
    let mut base = Vec::new();
    for (ai, &action) in spec.actions.iter().enumerate() {
        let chosen: Vec<Vec3> = match spec.targets_per_action {
            None => grid.clone(),
            Some(k) => {
                let mut rng = stream_rng(spec.seed, u64::MAX - ai as u64);
                let mut idx: Vec<usize> = (0..grid.len()).collect();
                // partial Fisher-Yates
                for i in 0..k.min(idx.len()) {
                    let j = rng.random_range(i..idx.len());
                    idx.swap(i, j);
                }
                idx[..k.min(grid.len())].iter().map(|&i| grid[i]).collect()
            }
        };
        for (ti, off) in chosen.iter().enumerate() {
            let index = (ai * grid.len() + ti) as u64;
            let mut rng = stream_rng(spec.seed, index);
            let prim = build_primitive(action, off, spec, &mut rng)?;
            base.push(prim.quantized());
        }
    }
    let angles: Vec<f64> = spec.augment_deg.iter().map(|d| d.to_radians()).collect();
    let primitives = augment_z_rotations(&base, &angles)
        .into_iter()
        .map(|p| p.quantized())
        .collect();
    Ok(Dataset {
        n_a: spec.n_a,
        n_h: spec.n_h,
        dt: FRAME_DT,
        primitives,
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Dataset {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        binio::write_u32(w, VERSION)?;
        binio::write_u32(w, self.primitives.len() as u32)?;
        binio::write_u32(w, self.n_a as u32)?;
        binio::write_u32(w, self.n_h as u32)?;
        binio::write_f32(w, self.dt as f32)?;
        binio::write_u32(w, CHANNELS as u32)?;
        for p in &self.primitives {
            binio::write_u32(w, p.action.index() as u32)?;
            binio::write_u32(w, p.active_len as u32)?;
            binio::write_f32s(w, p.target.iter().map(|v| *v as f32))?;
            for f in p.history.iter().chain(&p.frames) {
                binio::write_f32s(w, f.to_channels().iter().map(|v| *v as f32))?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Dataset> {
        let magic: [u8; 5] = binio::read_array(r)?;
        if &magic != MAGIC {
            return Err(invalid("not an AERO1 dataset"));
        }
        let version = binio::read_u32(r)?;
        if version != VERSION {
            return Err(invalid(format!("unsupported dataset version {version}")));
        }
        let count = binio::read_u32(r)? as usize;
        let n_a = binio::read_u32(r)? as usize;
        let n_h = binio::read_u32(r)? as usize;
        // shortest decimal form recovers the f64 the writer started from
        let dt: f64 = binio::read_f32(r)?.to_string().parse().map_err(invalid)?;
        let ch = binio::read_u32(r)? as usize;
        if ch != CHANNELS {
            return Err(invalid(format!("expected {CHANNELS} channels, found {ch}")));
        }
        let mut primitives = Vec::with_capacity(count);
        for _ in 0..count {
            let action = ActionLabel::from_index(binio::read_u32(r)? as usize)
                .ok_or_else(|| invalid("unknown action id"))?;
            let active_len = binio::read_u32(r)? as usize;
            let t = binio::read_f32s(r, 3)?;
            let vals = binio::read_f32s(r, (n_h + n_a) * CHANNELS)?;
            let fr: Vec<StateFrame> = vals
                .chunks_exact(CHANNELS)
                .map(|c| {
                    let c64: Vec<f64> = c.iter().map(|v| *v as f64).collect();
                    StateFrame::from_channels(&c64)
                })
                .collect();
            primitives.push(Primitive {
                history: fr[..n_h].to_vec(),
                frames: fr[n_h..].to_vec(),
                target: Vec3::new(t[0] as f64, t[1] as f64, t[2] as f64),
                action,
                active_len,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(invalid("trailing bytes after dataset records"));
        }
        Ok(Dataset {
            n_a,
            n_h,
            dt,
            primitives,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let e = io_err(path);
        let mut w = BufWriter::new(File::create(path).map_err(&e)?);
        self.write_to(&mut w).map_err(&e)?;
        w.flush().map_err(&e)
    }

    pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
        let e = io_err(path);
        let mut r = BufReader::new(File::open(path).map_err(&e)?);
        Dataset::read_from(&mut r).map_err(&e)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }
}
