//! Metrics and evaluation sweeps over trained models.

use aerobatch::dataset::{ActionLabel, Primitive};
use aerobatch::diffusion::{sample_batch, CanonicalFrame, Conditions, Denoiser, DiffusionError};
use aerobatch::environment::{Scenario, SdfGrid};
use aerobatch::guidance::{chain_generate_partial, ChainPlan, ChainStart, GuidanceConfig, GuidanceError, Sampler, Variant};
use aerobatch::kinematics::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Total angle swept by the body z-axis, starting from the last history frame.
pub fn body_z_sweep(p: &Primitive) -> f64 {
    let axes: Vec<Vec3> = p
        .history
        .last()
        .into_iter()
        .chain(p.active())
        .filter_map(|f| f.r.z_axis().ok())
        .collect();
    axes.windows(2).map(|w| w[0].dot(&w[1]).clamp(-1.0, 1.0).acos()).sum()
}

pub fn terminal_error(p: &Primitive) -> f64 {
    (p.active()[p.active_len - 1].p - p.target).norm()
}

/// Target sampling regions, as offsets in the frame of the first history sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    InDistribution,
    NearOod,
    FarOod,
    /// In-distribution targets, sampled without the target condition.
    Unconditional,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::InDistribution, Region::NearOod, Region::FarOod, Region::Unconditional];

    pub fn bounds(self) -> [[f64; 2]; 3] {
        match self {
            Region::InDistribution | Region::Unconditional => [[0.0, 8.0], [-6.0, 6.0], [-1.0, 1.0]],
            Region::NearOod => [[9.0, 12.0], [-9.0, 9.0], [-1.0, 1.0]],
            Region::FarOod => [[12.0, 16.0], [-12.0, 12.0], [-1.0, 1.0]],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::InDistribution => "IDS",
            Region::NearOod => "N-OODS",
            Region::FarOod => "F-OODS",
            Region::Unconditional => "UncondS",
        }
    }

    pub fn sample_offset(self, rng: &mut ChaCha8Rng) -> Vec3 {
        let b = self.bounds();
        Vec3::new(
            rng.random_range(b[0][0]..=b[0][1]),
            rng.random_range(b[1][0]..=b[1][1]),
            rng.random_range(b[2][0]..=b[2][1]),
        )
    }
}

/// World target for an offset from the first history frame, axes of the
/// history's canonical frame.
pub fn target_for(history: &[aerobatch::StateFrame], offset: &Vec3) -> Vec3 {
    let origin = history.first().map(|f| f.p).unwrap_or_else(Vec3::zeros);
    origin + CanonicalFrame::from_history(history).vector_to_world(offset)
}

/// Terminal-to-target distances for `n` samples of one region. Conditions
/// are drawn from `pool` (histories and actions of stored primitives).
pub fn region_errors<M: Denoiser + ?Sized>(
    sampler: Sampler<'_, M>,
    pool: &[Primitive],
    region: Region,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>, DiffusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let src = &pool[rng.random_range(0..pool.len())];
        let target = target_for(&src.history, &region.sample_offset(&mut rng));
        let cond = Conditions {
            history: src.history.clone(),
            target: (region != Region::Unconditional).then_some(target),
            action: src.action,
        };
        let s = sample_batch(sampler.model, &cond, sampler.normalizer, sampler.schedule, seed ^ ((i as u64) << 20), 1, None)?;
        let p = &s[0].primitive;
        out.push((p.active()[p.active_len - 1].p - target).norm());
    }
    Ok(out)
}

/// Body-z sweeps of samples conditioned on `action`, with conditions from `pool`.
pub fn action_sweeps<M: Denoiser + ?Sized>(
    sampler: Sampler<'_, M>,
    pool: &[Primitive],
    action: ActionLabel,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>, DiffusionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let src = &pool[rng.random_range(0..pool.len())];
        let cond = Conditions {
            history: src.history.clone(),
            target: Some(src.target),
            action,
        };
        let s = sample_batch(sampler.model, &cond, sampler.normalizer, sampler.schedule, seed ^ ((i as u64) << 20), 1, None)?;
        out.push(body_z_sweep(&s[0].primitive));
    }
    Ok(out)
}

/// Plan through a scenario: targets roughly `spacing` apart along the start
/// heading with random lateral offsets, snapped to the scenario's free
/// waypoints; random maneuver labels.
pub fn scenario_plan(scenario: &Scenario, n_aero: usize, spacing: f64, seed: u64) -> ChainPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_C4A1);
    let dir = Vec3::new(scenario.heading.cos(), scenario.heading.sin(), 0.0);
    let side = Vec3::new(-dir.y, dir.x, 0.0);
    let mut targets = Vec::with_capacity(n_aero);
    let mut actions = Vec::with_capacity(n_aero);
    for i in 0..n_aero {
        let want = scenario.start + dir * spacing * (i + 1) as f64 + side * rng.random_range(-2.0..=2.0);
        let best = scenario
            .targets
            .iter()
            .min_by(|a, b| (*a - want).norm().total_cmp(&(*b - want).norm()))
            .copied()
            .unwrap_or(want);
        targets.push(best);
        actions.push(ActionLabel::MANEUVERS[rng.random_range(0..ActionLabel::MANEUVERS.len())]);
    }
    ChainPlan { targets, actions, seed }
}

pub fn scenario_start(scenario: &Scenario, speed: f64) -> ChainStart {
    ChainStart {
        position: scenario.start,
        heading: scenario.heading,
        speed,
    }
}

/// Success rates (percent) for chain prefixes of length 1..=n_aero, one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub variant: Variant,
    pub seed: u64,
    pub success: Vec<f64>,
    /// Set when the chain aborted; later prefixes count as zero.
    pub diagnostic: Option<String>,
}

/// One chain per (variant, seed); the last stage of every prefix is scored by
/// the fine-audit pass rate of the samples the variant could have picked.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run<M: Denoiser + ?Sized>(
    sampler: Sampler<'_, M>,
    scenario: &Scenario,
    grid: &SdfGrid,
    cfg: &GuidanceConfig,
    variant: Variant,
    n_aero: usize,
    spacing: f64,
    speed: f64,
    seed: u64,
) -> Result<CellRun, DiffusionError> {
    let plan = scenario_plan(scenario, n_aero, spacing, seed);
    let start = scenario_start(scenario, speed);
    let (result, exhausted) = match chain_generate_partial(sampler, &plan, &start, grid, cfg, variant) {
        Ok(v) => v,
        Err(GuidanceError::Diffusion(e)) => return Err(e),
        Err(other) => return Err(DiffusionError::Config(other.to_string())),
    };
    // prefixes past an exhausted batch score zero
    let success = (1..=n_aero).map(|n| 100.0 * result.success_rate(n)).collect();
    Ok(CellRun {
        variant,
        seed,
        success,
        diagnostic: exhausted.map(|(index, stats)| {
            format!(
                "batch exhausted at primitive {index} ({} of {} collision-free)",
                stats.collision_free, stats.batch
            )
        }),
    })
}

/// Linear-interpolation quantile of unsorted data, `q` in [0, 1].
pub fn quantile(data: &[f64], q: f64) -> f64 {
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let h = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(data: &[f64]) -> f64 {
    quantile(data, 0.5)
}

/// Median and half the min-max range.
pub fn median_half_range(data: &[f64]) -> (f64, f64) {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (median(data), 0.5 * (hi - lo))
}
