//! Conditional denoising diffusion over primitives.
//!
//! Samples live in a normalized local frame: positions are expressed
//! relative to `history[0]`, rotated so the last history velocity points
//! along +x and divided by the dataset's per-axis position spread. The
//! denoiser predicts the clean sample directly; reverse steps use the
//! Gaussian posterior of the forward process.

pub mod model;
pub mod train;

use crate::dataset::{ActionLabel, Primitive};
use crate::kinematics::{Mat3, Rot6D, StateFrame, Vec3};
use candle_core::{DType, Device, Tensor};
use model::{DenoiserModel, ModelInput, CHANNELS};
use nalgebra::Rotation3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::ModelConfig;
pub use train::{load_checkpoint, loss_curve_csv, loss_values, save_checkpoint, train, LossRecord, TrainConfig, TrainedModel};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("diffusion step {t} outside [1, {max}]")]
    StepRange { t: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step}: loss {loss:.4e} exceeds 1000x the initial {initial:.4e}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub steps: usize,
    pub lambda: f64,
    pub kappa: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 30,
            lambda: 8.0,
            kappa: 1.0,
        }
    }
}

/// Per-step retention and its running product, both indexed from step 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// `ᾱ_t = exp(−λ (t/T)^κ)`, `α_t = ᾱ_t / ᾱ_{t−1}`.
pub fn make_schedule(params: &ScheduleParams) -> Result<NoiseSchedule, DiffusionError> {
    let big_t = params.steps;
    if big_t < 2 {
        return Err(DiffusionError::Config(format!("schedule needs at least 2 steps, got {big_t}")));
    }
    if !(params.lambda > 0.0) || !(params.kappa > 0.0) {
        return Err(DiffusionError::Config("lambda and kappa must be positive".into()));
    }
    let alpha_bar: Vec<f64> = (1..=big_t)
        .map(|t| (-params.lambda * (t as f64 / big_t as f64).powf(params.kappa)).exp())
        .collect();
    if alpha_bar[big_t - 1] > 0.005 {
        return Err(DiffusionError::Config(format!(
            "final cumulative retention {:.4} is above 0.005; raise lambda",
            alpha_bar[big_t - 1]
        )));
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

impl NoiseSchedule {
    /// Schedule from explicit cumulative retentions (strictly decreasing in (0, 1)).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self, DiffusionError> {
        if alpha_bar.is_empty() {
            return Err(DiffusionError::Config("empty schedule".into()));
        }
        let mut alpha = Vec::with_capacity(alpha_bar.len());
        let mut prev = 1.0;
        for &ab in &alpha_bar {
            let a = ab / prev;
            if !(a > 0.0 && a < 1.0) {
                return Err(DiffusionError::Config(format!("per-step retention {a} outside (0, 1)")));
            }
            alpha.push(a);
            prev = ab;
        }
        Ok(Self { alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Posterior `q(x_{t−1} | x_t, x_0)`: mean coefficients on `x_0` and
    /// `x_t`, and the variance.
    pub fn posterior(&self, t: usize) -> Result<(f64, f64, f64), DiffusionError> {
        self.check(t)?;
        let a = self.alpha(t);
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c0 = ab_prev.sqrt() * (1.0 - a) / (1.0 - ab);
        let ct = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - a);
        Ok((c0, ct, var))
    }
}

/// `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`.
pub fn forward_diffuse(x0: &[f64], t: usize, noise: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    sched.check(t)?;
    if x0.len() != noise.len() {
        return Err(DiffusionError::Shape(format!("sample has {} values, noise {}", x0.len(), noise.len())));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect())
}

/// Smallest per-slot position std; slots pinned by the canonical frame
/// (the last history frame is the origin) would otherwise blow up.
pub const MIN_POS_STD: f64 = 0.05;

/// Position standardization shared by training and sampling, per frame slot
/// and axis. Slots past the fitted length pass through unchanged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub frame_mean: Vec<[f64; 3]>,
    pub frame_std: Vec<[f64; 3]>,
    pub hist_mean: Vec<[f64; 3]>,
    pub hist_std: Vec<[f64; 3]>,
    pub target_mean: [f64; 3],
    pub target_std: [f64; 3],
}

fn moments<'a>(points: impl Iterator<Item = &'a Vec3>) -> ([f64; 3], [f64; 3]) {
    let (mut sum, mut sq, mut n) = (Vec3::zeros(), Vec3::zeros(), 0.0);
    for p in points {
        sum += p;
        sq += p.component_mul(p);
        n += 1.0;
    }
    if n == 0.0 {
        return ([0.0; 3], [1.0; 3]);
    }
    let mean = sum / n;
    let var = sq / n - mean.component_mul(&mean);
    (
        [mean.x, mean.y, mean.z],
        [0, 1, 2].map(|i| var[i].max(0.0).sqrt().max(MIN_POS_STD)),
    )
}

fn slot(v: &[[f64; 3]], i: usize, fallback: f64) -> [f64; 3] {
    v.get(i).copied().unwrap_or([fallback; 3])
}

impl Normalizer {
    /// Moments of local-frame positions, per slot.
    pub fn fit(prims: &[Primitive]) -> Self {
        let n_a = prims.iter().map(|p| p.frames.len()).max().unwrap_or(0);
        let n_h = prims.iter().map(|p| p.history.len()).max().unwrap_or(0);
        let (frame_mean, frame_std) = (0..n_a)
            .map(|i| moments(prims.iter().filter_map(|p| p.frames.get(i).map(|f| &f.p))))
            .unzip();
        let (hist_mean, hist_std) = (0..n_h)
            .map(|i| moments(prims.iter().filter_map(|p| p.history.get(i).map(|f| &f.p))))
            .unzip();
        let (target_mean, target_std) = moments(prims.iter().map(|p| &p.target));
        Self {
            frame_mean,
            frame_std,
            hist_mean,
            hist_std,
            target_mean,
            target_std,
        }
    }

    /// Std of frame slot `i`, i.e. ∂p/∂x for the normalized channels.
    pub fn frame_scale(&self, i: usize) -> [f64; 3] {
        slot(&self.frame_std, i, 1.0)
    }

    pub fn encode_target(&self, p: &Vec3) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.target_mean[a]) / self.target_std[a])
    }

    /// Position of frame slot `i` from its three normalized channels.
    pub fn decode_point(&self, i: usize, v: &[f64]) -> Vec3 {
        let (m, s) = (slot(&self.frame_mean, i, 0.0), self.frame_scale(i));
        Vec3::new(m[0] + v[0] * s[0], m[1] + v[1] * s[1], m[2] + v[2] * s[2])
    }

    fn encode(f: &StateFrame, m: [f64; 3], s: [f64; 3]) -> [f64; CHANNELS] {
        let mut c = f.to_channels();
        for a in 0..3 {
            c[1 + a] = (c[1 + a] - m[a]) / s[a];
        }
        c
    }

    pub fn encode_frame(&self, i: usize, f: &StateFrame) -> [f64; CHANNELS] {
        Self::encode(f, slot(&self.frame_mean, i, 0.0), self.frame_scale(i))
    }

    pub fn encode_history(&self, i: usize, f: &StateFrame) -> [f64; CHANNELS] {
        Self::encode(f, slot(&self.hist_mean, i, 0.0), slot(&self.hist_std, i, 1.0))
    }

    /// Channels of frame slot `i` back to physical units; the rotation is
    /// left as predicted.
    pub fn decode_channels(&self, i: usize, c: &[f64]) -> [f64; CHANNELS] {
        let mut out = [0.0; CHANNELS];
        out.copy_from_slice(&c[..CHANNELS]);
        let p = self.decode_point(i, &c[1..4]);
        out[1..4].copy_from_slice(p.as_slice());
        out
    }
}

/// Rigid frame in which the model sees a sample: origin at the last history
/// frame, mean history velocity along +x. Training and sampling share it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalFrame {
    pub origin: Vec3,
    /// Local to world.
    pub rot: Mat3,
}

impl CanonicalFrame {
    pub fn from_history(history: &[StateFrame]) -> Self {
        let origin = history.last().map(|f| f.p).unwrap_or_else(Vec3::zeros);
        // whole-history displacement; robust to jitter in generated frames
        let heading = match history {
            [a, .., b] => {
                let v = b.p - a.p;
                if v.x.hypot(v.y) > 1e-6 {
                    Some(v.y.atan2(v.x))
                } else {
                    None
                }
            }
            _ => None,
        }
        .unwrap_or(0.0);
        Self {
            origin,
            rot: *Rotation3::from_axis_angle(&Vec3::z_axis(), heading).matrix(),
        }
    }

    pub fn identity() -> Self {
        Self {
            origin: Vec3::zeros(),
            rot: Mat3::identity(),
        }
    }

    pub fn point_to_local(&self, p: &Vec3) -> Vec3 {
        self.rot.transpose() * (p - self.origin)
    }

    pub fn point_to_world(&self, p: &Vec3) -> Vec3 {
        self.rot * p + self.origin
    }

    pub fn vector_to_world(&self, v: &Vec3) -> Vec3 {
        self.rot * v
    }

    pub fn vector_to_local(&self, v: &Vec3) -> Vec3 {
        self.rot.transpose() * v
    }

    pub fn frame_to_local(&self, f: &StateFrame) -> StateFrame {
        StateFrame {
            padding: f.padding,
            p: self.point_to_local(&f.p),
            r: Rot6D {
                a1: self.vector_to_local(&f.r.a1),
                a2: self.vector_to_local(&f.r.a2),
            },
        }
    }

    /// Frames, history and target of `p` in this frame.
    pub fn primitive_to_local(&self, p: &Primitive) -> Primitive {
        Primitive {
            frames: p.frames.iter().map(|f| self.frame_to_local(f)).collect(),
            history: p.history.iter().map(|f| self.frame_to_local(f)).collect(),
            target: self.point_to_local(&p.target),
            action: p.action,
            active_len: p.active_len,
        }
    }

    pub fn frame_to_world(&self, f: &StateFrame) -> StateFrame {
        StateFrame {
            padding: f.padding,
            p: self.point_to_world(&f.p),
            r: Rot6D {
                a1: self.vector_to_world(&f.r.a1),
                a2: self.vector_to_world(&f.r.a2),
            },
        }
    }
}

/// Sampling conditions in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditions {
    pub history: Vec<StateFrame>,
    /// `None` selects the unconditional (null) target.
    pub target: Option<Vec3>,
    pub action: ActionLabel,
}

/// Host-side denoiser batch in the normalized local frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseBatch {
    /// Per sample, `n_a × 10` values.
    pub x_t: Vec<Vec<f64>>,
    pub t: usize,
    /// Per sample, `n_h × 10` values.
    pub history: Vec<Vec<f64>>,
    pub target: Vec<Option<[f64; 3]>>,
    pub action: Vec<ActionLabel>,
}

/// Anything that predicts the clean sample from a noisy one.
pub trait Denoiser {
    fn n_a(&self) -> usize;
    fn n_h(&self) -> usize;
    fn predict_x0(&self, batch: &DenoiseBatch) -> Result<Vec<Vec<f64>>, DiffusionError>;
}

fn tensor_from_rows(rows: &[Vec<f64>], dims: &[usize], dtype: DType) -> Result<Tensor, DiffusionError> {
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn one_hot(action: ActionLabel) -> Vec<f64> {
    let mut v = vec![0.0; ActionLabel::COUNT];
    v[action.index()] = 1.0;
    v
}

impl DenoiserModel {
    pub fn input_from_batch(&self, batch: &DenoiseBatch) -> Result<ModelInput, DiffusionError> {
        let b = batch.x_t.len();
        let (n_a, n_h) = (self.config.n_a, self.config.n_h);
        if batch.history.len() != b || batch.target.len() != b || batch.action.len() != b {
            return Err(DiffusionError::Shape("batch fields differ in length".into()));
        }
        if batch.x_t.iter().any(|x| x.len() != n_a * CHANNELS) {
            return Err(DiffusionError::Shape(format!("each sample needs {} values", n_a * CHANNELS)));
        }
        if batch.history.iter().any(|h| h.len() != n_h * CHANNELS) {
            return Err(DiffusionError::Shape(format!("each history needs {} values", n_h * CHANNELS)));
        }
        let dt = self.dtype();
        let targets: Vec<Vec<f64>> = batch.target.iter().map(|t| t.unwrap_or([0.0; 3]).to_vec()).collect();
        let mask: Vec<Vec<f64>> = batch.target.iter().map(|t| vec![if t.is_some() { 1.0 } else { 0.0 }]).collect();
        let actions: Vec<Vec<f64>> = batch.action.iter().map(|a| one_hot(*a)).collect();
        Ok(ModelInput {
            x_t: tensor_from_rows(&batch.x_t, &[b, n_a, CHANNELS], dt)?,
            t: Tensor::from_vec(vec![batch.t as f64; b], b, &Device::Cpu)?.to_dtype(dt)?,
            history: tensor_from_rows(&batch.history, &[b, n_h, CHANNELS], dt)?,
            target: tensor_from_rows(&targets, &[b, 3], dt)?,
            target_mask: tensor_from_rows(&mask, &[b, 1], dt)?,
            action: tensor_from_rows(&actions, &[b, ActionLabel::COUNT], dt)?,
        })
    }
}

impl Denoiser for DenoiserModel {
    fn n_a(&self) -> usize {
        self.config.n_a
    }

    fn n_h(&self) -> usize {
        self.config.n_h
    }

    fn predict_x0(&self, batch: &DenoiseBatch) -> Result<Vec<Vec<f64>>, DiffusionError> {
        let b = batch.x_t.len();
        if b == 0 {
            return Ok(Vec::new());
        }
        let out = self.forward(&self.input_from_batch(batch)?)?;
        let flat = out.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(flat.chunks_exact(self.config.n_a * CHANNELS).map(|c| c.to_vec()).collect())
    }
}

/// Mean adjustment hook applied at every reverse step before noise is added.
pub trait MeanShift {
    /// `means[i]` is sample `i`'s posterior mean in the normalized local frame
    /// of `frames[i]`; `x0_hat` the matching clean prediction.
    fn shift(
        &self,
        t: usize,
        variance: f64,
        means: &mut [Vec<f64>],
        x0_hat: &[Vec<f64>],
        frames: &[CanonicalFrame],
        normalizer: &Normalizer,
    ) -> Result<(), DiffusionError>;
}

/// One reverse step for a batch. At `t = 1` the mean is returned without noise.
pub fn reverse_step<M: Denoiser + ?Sized>(
    model: &M,
    batch: &DenoiseBatch,
    sched: &NoiseSchedule,
    rngs: &mut [ChaCha8Rng],
    shift: Option<(&dyn MeanShift, &[CanonicalFrame], &Normalizer)>,
) -> Result<Vec<Vec<f64>>, DiffusionError> {
    let t = batch.t;
    let (c0, ct, var) = sched.posterior(t)?;
    let x0 = model.predict_x0(batch)?;
    let mut means: Vec<Vec<f64>> = x0
        .iter()
        .zip(&batch.x_t)
        .map(|(a, b)| a.iter().zip(b).map(|(x0, xt)| c0 * x0 + ct * xt).collect())
        .collect();
    if let Some((hook, frames, norm)) = shift {
        hook.shift(t, var, &mut means, &x0, frames, norm)?;
    }
    if t > 1 {
        let sd = var.sqrt();
        for (m, rng) in means.iter_mut().zip(rngs.iter_mut()) {
            for v in m.iter_mut() {
                *v += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(means)
}

/// Decoded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub primitive: Primitive,
    /// The stop flag never crossed 0.5; every frame was kept.
    pub no_stop: bool,
}

/// Encoded conditions for one sample.
pub fn encode_conditions(cond: &Conditions, frame: &CanonicalFrame, norm: &Normalizer) -> (Vec<f64>, Option<[f64; 3]>) {
    let hist: Vec<f64> = cond
        .history
        .iter()
        .enumerate()
        .flat_map(|(i, f)| norm.encode_history(i, &frame.frame_to_local(f)))
        .collect();
    let target = cond.target.map(|t| norm.encode_target(&frame.point_to_local(&t)));
    (hist, target)
}

/// Threshold the stop flag with first-crossing truncation, re-orthonormalize
/// rotations and map back to world coordinates.
pub fn decode_sample(
    x: &[f64],
    n_a: usize,
    frame: &CanonicalFrame,
    norm: &Normalizer,
    cond: &Conditions,
) -> Sample {
    let rows: Vec<[f64; CHANNELS]> = x
        .chunks_exact(CHANNELS)
        .take(n_a)
        .enumerate()
        .map(|(i, c)| norm.decode_channels(i, c))
        .collect();
    let first_stop = rows.iter().position(|c| c[0] >= 0.5);
    let no_stop = first_stop.is_none();
    if no_stop {
        log::warn!("stop flag never crossed 0.5; keeping all {n_a} frames");
    }
    let active_len = first_stop.unwrap_or(n_a).max(1);
    let mut prev = cond
        .history
        .last()
        .map(|f| frame.frame_to_local(f).r)
        .unwrap_or_else(Rot6D::identity);
    let mut frames = Vec::with_capacity(n_a);
    for c in rows.iter().take(active_len) {
        let raw = Rot6D::from_array(&c[4..10]);
        let r = raw.canonicalize().unwrap_or(prev);
        prev = r;
        frames.push(frame.frame_to_world(&StateFrame::new(Vec3::new(c[1], c[2], c[3]), r)));
    }
    let last = frames[active_len - 1];
    frames.resize(n_a, StateFrame { padding: true, ..last });
    let target = cond
        .target
        .unwrap_or_else(|| frames[active_len - 1].p);
    Sample {
        primitive: Primitive {
            frames,
            history: cond.history.clone(),
            target,
            action: cond.action,
            active_len,
        },
        no_stop,
    }
}

/// Per-sample rng stream for batch sampling.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draw `n` samples for one condition set. Sample `i` uses rng stream `i` of
/// `seed`, so results do not depend on the batch size.
pub fn sample_batch<M: Denoiser + ?Sized>(
    model: &M,
    cond: &Conditions,
    norm: &Normalizer,
    sched: &NoiseSchedule,
    seed: u64,
    n: usize,
    shift: Option<&dyn MeanShift>,
) -> Result<Vec<Sample>, DiffusionError> {
    if cond.history.len() != model.n_h() {
        return Err(DiffusionError::Shape(format!(
            "history has {} frames, model expects {}",
            cond.history.len(),
            model.n_h()
        )));
    }
    let frame = CanonicalFrame::from_history(&cond.history);
    let (hist, target) = encode_conditions(cond, &frame, norm);
    let len = model.n_a() * CHANNELS;
    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| sample_rng(seed, i)).collect();
    let mut x: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|r| (0..len).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let frames = vec![frame; n];
    for t in (1..=sched.steps()).rev() {
        let batch = DenoiseBatch {
            x_t: x,
            t,
            history: vec![hist.clone(); n],
            target: vec![target; n],
            action: vec![cond.action; n],
        };
        x = reverse_step(model, &batch, sched, &mut rngs, shift.map(|s| (s, frames.as_slice(), norm)))?;
    }
    Ok(x.iter().map(|v| decode_sample(v, model.n_a(), &frame, norm, cond)).collect())
}

/// Single-sample convenience wrapper.
pub fn sample_primitive<M: Denoiser + ?Sized>(
    model: &M,
    cond: &Conditions,
    norm: &Normalizer,
    sched: &NoiseSchedule,
    seed: u64,
    shift: Option<&dyn MeanShift>,
) -> Result<Sample, DiffusionError> {
    let mut v = sample_batch(model, cond, norm, sched, seed, 1, shift)?;
    Ok(v.remove(0))
}
