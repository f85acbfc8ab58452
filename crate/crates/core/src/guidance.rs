//! Collision guidance during reverse diffusion, batch rejection and chaining
//! of primitives into long-horizon sequences.

use crate::dataset::{ActionLabel, Primitive};
use crate::diffusion::{
    sample_batch, sample_rng, CanonicalFrame, Conditions, Denoiser, DiffusionError, MeanShift, NoiseSchedule,
    Normalizer, Sample,
};
use crate::diffusion::model::CHANNELS;
use crate::environment::SdfGrid;
use crate::kinematics::{frame_delta, matrix_to_rot6d, Mat3, StateFrame, Vec3, FRAME_DT};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points checked per inter-frame segment by the fine audit.
pub const AUDIT_POINTS_PER_SEGMENT: usize = 10;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("guidance config: {0}")]
    Config(String),
    #[error("no collision-free sample at chain index {index} ({} of {} drawn)", stats.collision_free, stats.batch)]
    BatchExhausted { index: usize, stats: BatchStats },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Which parts of the pipeline are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Guided sampling plus coarse batch rejection.
    Ours,
    /// Guided sampling, uniform pick without the coarse check.
    Uncheck,
    /// Neither guidance nor the coarse check.
    Unguided,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Ours, Variant::Uncheck, Variant::Unguided];

    pub fn guided(self) -> bool {
        self != Variant::Unguided
    }

    pub fn checked(self) -> bool {
        self == Variant::Ours
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::Uncheck => "uncheck",
            Variant::Unguided => "unguided",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Activation distance of the hinge (m).
    pub d: f64,
    pub lambda: f64,
    /// Inclusive diffusion-step window in which the mean is shifted.
    pub guide_from_step: usize,
    pub guide_to_step: usize,
    /// Samples drawn per primitive.
    pub batch: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            d: 0.6,
            lambda: 0.15,
            guide_from_step: 2,
            guide_to_step: 30,
            batch: 64,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, steps: usize) -> Result<(), GuidanceError> {
        if !(self.d > 0.0) {
            return Err(GuidanceError::Config("d must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(GuidanceError::Config("lambda must be non-negative".into()));
        }
        if self.guide_from_step < 1 || self.guide_from_step > self.guide_to_step || self.guide_to_step > steps {
            return Err(GuidanceError::Config(format!(
                "window [{}, {}] not inside [1, {steps}]",
                self.guide_from_step, self.guide_to_step
            )));
        }
        if self.batch == 0 {
            return Err(GuidanceError::Config("batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn in_window(&self, t: usize) -> bool {
        (self.guide_from_step..=self.guide_to_step).contains(&t)
    }
}

/// Hinge collision cost Σ max(0, d − sdf) and its gradient per position.
pub fn collision_cost(positions: &[Vec3], grid: &SdfGrid, d: f64) -> (f64, Vec<Vec3>) {
    let mut cost = 0.0;
    let grads = positions
        .iter()
        .map(|p| {
            let q = grid.query(p);
            if q.value < d {
                cost += d - q.value;
                -q.grad
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    (cost, grads)
}

/// Frames before the first predicted stop flag.
fn active_rows(x0_hat: &[f64]) -> usize {
    let rows = x0_hat.len() / CHANNELS;
    (0..rows).position(|i| x0_hat[i * CHANNELS] >= 0.5).unwrap_or(rows)
}

/// SDF classifier guidance as a reverse-step mean shift.
pub struct SdfGuidance<'a> {
    pub grid: &'a SdfGrid,
    pub cfg: &'a GuidanceConfig,
}

impl SdfGuidance<'_> {
    /// Shift for one sample: variance · (−λ ∇c) in normalized local channels.
    /// Frames at or after the predicted stop flag do not contribute.
    pub fn sample_shift(
        &self,
        t: usize,
        variance: f64,
        mean: &[f64],
        x0_hat: &[f64],
        frame: &CanonicalFrame,
        norm: &Normalizer,
    ) -> Vec<f64> {
        let mut out = vec![0.0; mean.len()];
        if !self.cfg.in_window(t) || self.cfg.lambda == 0.0 {
            return out;
        }
        let n = active_rows(x0_hat).min(mean.len() / CHANNELS);
        let world: Vec<Vec3> = (0..n)
            .map(|i| frame.point_to_world(&norm.decode_point(i, &mean[i * CHANNELS + 1..i * CHANNELS + 4])))
            .collect();
        let (cost, grads) = collision_cost(&world, self.grid, self.cfg.d);
        if cost == 0.0 {
            return out;
        }
        for (i, g) in grads.iter().enumerate() {
            let local = frame.vector_to_local(g);
            let scale = norm.frame_scale(i);
            for a in 0..3 {
                // ∂c/∂x_norm = ∂c/∂p · std
                out[i * CHANNELS + 1 + a] = -variance * self.cfg.lambda * local[a] * scale[a];
            }
        }
        out
    }
}

impl MeanShift for SdfGuidance<'_> {
    fn shift(
        &self,
        t: usize,
        variance: f64,
        means: &mut [Vec<f64>],
        x0_hat: &[Vec<f64>],
        frames: &[CanonicalFrame],
        normalizer: &Normalizer,
    ) -> Result<(), DiffusionError> {
        for ((m, x0), f) in means.iter_mut().zip(x0_hat).zip(frames) {
            let s = self.sample_shift(t, variance, m, x0, f, normalizer);
            for (a, b) in m.iter_mut().zip(s) {
                *a += b;
            }
        }
        Ok(())
    }
}

/// Every active frame has non-negative clearance.
pub fn coarse_check(p: &Primitive, grid: &SdfGrid) -> bool {
    p.active().iter().all(|f| grid.value(&f.p) >= 0.0)
}

/// Frame and segment-interpolated clearance check over a polyline.
pub fn fine_audit_points(points: &[Vec3], grid: &SdfGrid) -> bool {
    if points.iter().any(|p| grid.value(p) < 0.0) {
        return false;
    }
    points.windows(2).all(|w| {
        (1..AUDIT_POINTS_PER_SEGMENT).all(|k| {
            let s = k as f64 / AUDIT_POINTS_PER_SEGMENT as f64;
            grid.value(&(w[0] * (1.0 - s) + w[1] * s)) >= 0.0
        })
    })
}

/// Fine audit of a primitive, including the segment from its last history frame.
pub fn fine_audit(p: &Primitive, grid: &SdfGrid) -> bool {
    let pts: Vec<Vec3> = p.history.last().into_iter().chain(p.active()).map(|f| f.p).collect();
    fine_audit_points(&pts, grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub batch: usize,
    /// Samples passing the coarse check.
    pub collision_free: usize,
    pub collision_free_fraction: f64,
    /// Samples eligible for selection under the variant.
    pub eligible: usize,
    /// Eligible samples that also pass the fine audit.
    pub eligible_fine: usize,
    /// Samples whose stop flag never crossed.
    pub no_stop: usize,
}

impl BatchStats {
    /// Probability that a uniformly selected eligible sample passes the fine audit.
    pub fn fine_rate(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.eligible_fine as f64 / self.eligible as f64
        }
    }
}

/// Everything needed to draw samples from a trained model.
pub struct Sampler<'a, M: Denoiser + ?Sized> {
    pub model: &'a M,
    pub normalizer: &'a Normalizer,
    pub schedule: &'a NoiseSchedule,
}

// Manual impls: derive would demand `M: Clone`.
impl<M: Denoiser + ?Sized> Clone for Sampler<'_, M> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<M: Denoiser + ?Sized> Copy for Sampler<'_, M> {}

/// Draw a batch, run the coarse check and pick one sample uniformly among
/// the eligible ones (collision-free for [`Variant::Ours`], all otherwise).
pub fn batch_sample_checked<M: Denoiser + ?Sized>(
    sampler: Sampler<'_, M>,
    cond: &Conditions,
    grid: &SdfGrid,
    cfg: &GuidanceConfig,
    variant: Variant,
    seed: u64,
) -> Result<(Sample, BatchStats), GuidanceError> {
    cfg.validate(sampler.schedule.steps())?;
    let guide = SdfGuidance { grid, cfg };
    let shift: Option<&dyn MeanShift> = if variant.guided() { Some(&guide) } else { None };
    let samples = sample_batch(
        sampler.model,
        cond,
        sampler.normalizer,
        sampler.schedule,
        seed,
        cfg.batch,
        shift,
    )?;
    let free: Vec<bool> = samples.iter().map(|s| coarse_check(&s.primitive, grid)).collect();
    let eligible: Vec<usize> = (0..samples.len()).filter(|&i| !variant.checked() || free[i]).collect();
    let collision_free = free.iter().filter(|&&f| f).count();
    let stats = BatchStats {
        batch: samples.len(),
        collision_free,
        collision_free_fraction: collision_free as f64 / samples.len() as f64,
        eligible: eligible.len(),
        eligible_fine: eligible.iter().filter(|&&i| fine_audit(&samples[i].primitive, grid)).count(),
        no_stop: samples.iter().filter(|s| s.no_stop).count(),
    };
    if eligible.is_empty() {
        return Err(GuidanceError::BatchExhausted { index: 0, stats });
    }
    // stream past the per-sample streams so selection never aliases a sample
    let mut pick = sample_rng(seed, usize::MAX);
    let chosen = eligible[pick.random_range(0..eligible.len())];
    let mut samples = samples;
    Ok((samples.swap_remove(chosen), stats))
}

/// Start pose of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainStart {
    pub position: Vec3,
    /// Heading (rad) of the level entry flight.
    pub heading: f64,
    /// Entry speed (m/s).
    pub speed: f64,
}

/// Constant-velocity level-flight history ending at the start position.
pub fn entry_history(start: &ChainStart, n_h: usize) -> Vec<StateFrame> {
    let dir = Vec3::new(start.heading.cos(), start.heading.sin(), 0.0);
    let rot: Mat3 = nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), start.heading).into_inner();
    let r = matrix_to_rot6d(&rot).expect("yaw rotation is orthonormal");
    (0..n_h)
        .map(|k| {
            let back = (n_h - 1 - k) as f64 * FRAME_DT * start.speed;
            StateFrame::new(start.position - dir * back, r)
        })
        .collect()
}

/// Targets and optional actions of a chained generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainPlan {
    pub targets: Vec<Vec3>,
    pub actions: Vec<ActionLabel>,
    pub seed: u64,
}

impl ChainPlan {
    pub fn n_aero(&self) -> usize {
        self.targets.len()
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        if self.targets.is_empty() || self.targets.len() != self.actions.len() {
            return Err(GuidanceError::Config(format!(
                "plan has {} targets and {} actions",
                self.targets.len(),
                self.actions.len()
            )));
        }
        Ok(())
    }

    /// Seed of the batch drawn for primitive `index`.
    pub fn stage_seed(&self, index: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
    }
}

/// Position and attitude jump between consecutive primitives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Junction {
    pub dp: f64,
    /// Largest wrapped Z-Y-X Euler angle difference (rad).
    pub dtheta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub primitives: Vec<Primitive>,
    pub stats: Vec<BatchStats>,
    /// Junction between each primitive's history tail and its first frame.
    pub junctions: Vec<Junction>,
    /// Whether each selected primitive passes the fine audit.
    pub fine_pass: Vec<bool>,
}

impl ChainResult {
    /// Every primitive passes the fine audit.
    pub fn collision_free(&self) -> bool {
        self.fine_pass.iter().all(|&b| b)
    }

    /// Estimated success rate of chains truncated after `n` primitives:
    /// the chosen prefix must pass, and the last stage contributes the
    /// fraction of its eligible samples that pass.
    pub fn success_rate(&self, n: usize) -> f64 {
        if n == 0 || n > self.stats.len() {
            return 0.0;
        }
        if self.fine_pass[..n - 1].iter().all(|&b| b) {
            self.stats[n - 1].fine_rate()
        } else {
            0.0
        }
    }

    pub fn all_frames(&self) -> Vec<StateFrame> {
        self.primitives.iter().flat_map(|p| p.active().iter().copied()).collect()
    }
}

pub fn junction(prev: &StateFrame, next: &StateFrame) -> Junction {
    match frame_delta(prev, next) {
        Ok(d) => Junction {
            dp: d.dp.norm(),
            dtheta: d.dtheta.amax(),
        },
        Err(_) => Junction {
            dp: (next.p - prev.p).norm(),
            dtheta: f64::INFINITY,
        },
    }
}

/// History for the next primitive: the last `n_h` frames of the previous
/// history followed by the active frames.
pub fn next_history(p: &Primitive, n_h: usize) -> Vec<StateFrame> {
    let all: Vec<StateFrame> = p.history.iter().chain(p.active()).map(|f| StateFrame { padding: false, ..*f }).collect();
    all[all.len() - n_h..].to_vec()
}

/// Generate `plan.n_aero()` primitives in sequence, each conditioned on the
/// tail of its predecessor.
pub fn chain_generate<M: Denoiser + ?Sized>(
    sampler: Sampler<'_, M>,
    plan: &ChainPlan,
    start: &ChainStart,
    grid: &SdfGrid,
    cfg: &GuidanceConfig,
    variant: Variant,
) -> Result<ChainResult, GuidanceError> {
    match chain_generate_partial(sampler, plan, start, grid, cfg, variant)? {
        (result, None) => Ok(result),
        (_, Some((index, stats))) => Err(GuidanceError::BatchExhausted { index, stats }),
    }
}

/// Like [`chain_generate`], but an exhausted batch ends the chain and the
/// primitives accepted so far are returned with the failing index.
pub fn chain_generate_partial<M: Denoiser + ?Sized>(
    sampler: Sampler<'_, M>,
    plan: &ChainPlan,
    start: &ChainStart,
    grid: &SdfGrid,
    cfg: &GuidanceConfig,
    variant: Variant,
) -> Result<(ChainResult, Option<(usize, BatchStats)>), GuidanceError> {
    plan.validate()?;
    let n_h = sampler.model.n_h();
    let mut history = entry_history(start, n_h);
    let mut out = ChainResult {
        primitives: Vec::with_capacity(plan.n_aero()),
        stats: Vec::with_capacity(plan.n_aero()),
        junctions: Vec::with_capacity(plan.n_aero()),
        fine_pass: Vec::with_capacity(plan.n_aero()),
    };
    for (index, (target, action)) in plan.targets.iter().zip(&plan.actions).enumerate() {
        let cond = Conditions {
            history: history.clone(),
            target: Some(*target),
            action: *action,
        };
        let (sample, stats) = match batch_sample_checked(sampler, &cond, grid, cfg, variant, plan.stage_seed(index)) {
            Ok(v) => v,
            Err(GuidanceError::BatchExhausted { stats, .. }) => return Ok((out, Some((index, stats)))),
            Err(e) => return Err(e),
        };
        let p = sample.primitive;
        out.junctions.push(junction(&history[n_h - 1], &p.frames[0]));
        out.fine_pass.push(fine_audit(&p, grid));
        history = next_history(&p, n_h);
        out.stats.push(stats);
        out.primitives.push(p);
    }
    Ok((out, None))
}
