//! Subcommand implementations. Each writes its artifacts plus a
//! `manifest.json` under the output directory.

use crate::config::{ConfigError, RunConfig};
use crate::eval::{ablation_run, median_half_range, scenario_plan, scenario_start, CellRun};
use crate::plot;
use aerobatch::dataset::{build_dataset, Dataset};
use aerobatch::diffusion::{load_checkpoint, loss_curve_csv, save_checkpoint, train, TrainedModel};
use aerobatch::environment::{build_sdf, make_scenario, ObstacleScene, Scenario, ScenarioKind, SdfGrid};
use aerobatch::guidance::{chain_generate, BatchStats, ChainPlan, ChainStart, GuidanceConfig, GuidanceError, Junction, Sampler, Variant};
use aerobatch::kinematics::StateFrame;
use aerobatch::postprocess::optimize::{postprocess_frames, trajectory_csv, OptReport};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const MANIFEST: &str = "manifest.json";
/// Feasibility tolerance of the post-processing report.
pub const FEASIBILITY_TOL: f64 = 1e-3;
const TRAJECTORY_RATE_HZ: f64 = 100.0;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("no collision-free sample at chain index {index} ({} of {} drawn)", stats.collision_free, stats.batch)]
    BatchExhausted { index: usize, stats: BatchStats },
    #[error("unsupported artifact: {0}")]
    Unsupported(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::BatchExhausted { .. } => 4,
            CliError::Unsupported(_) => 5,
            CliError::Failed(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::BatchExhausted { .. } => "batch_exhausted",
            CliError::Unsupported(_) => "unsupported_artifact",
            CliError::Failed(_) => "failed",
        }
    }

    /// Machine-readable error document.
    pub fn to_json(&self) -> Value {
        let mut v = json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let CliError::BatchExhausted { index, stats } = self {
            v["index"] = json!(index);
            v["stats"] = serde_json::to_value(stats).expect("stats serialize");
        }
        v
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Dataset,
    Train,
    Scene,
    Generate,
    Postprocess,
    Ablate,
    Plot,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Dataset => "dataset",
            Command::Train => "train",
            Command::Scene => "scene",
            Command::Generate => "generate",
            Command::Postprocess => "postprocess",
            Command::Ablate => "ablate",
            Command::Plot => "plot",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Run record. Everything except `timings` is a function of the config and
/// input bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub summary: Value,
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Output directory plus the bookkeeping for its manifest.
struct Run {
    out: PathBuf,
    inputs: Vec<FileDigest>,
    outputs: Vec<String>,
    timings: BTreeMap<String, f64>,
}

impl Run {
    fn new(out: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out).map_err(|e| failed(format!("creating {}: {e}", out.display())))?;
        Ok(Self {
            out: out.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256,
        });
        Ok(())
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, bytes).map_err(|e| failed(format!("writing {}: {e}", p.display())))
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let v = f();
        self.timings.insert(stage.to_string(), t.elapsed().as_secs_f64());
        v
    }

    fn finish(self, cmd: Command, cfg: &RunConfig, summary: Value) -> Result<Manifest, CliError> {
        let outputs = self
            .outputs
            .iter()
            .map(|n| {
                Ok(FileDigest {
                    path: n.clone(),
                    sha256: sha256_file(&self.out.join(n))?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let m = Manifest {
            command: cmd.name().into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inputs: self.inputs,
            outputs,
            summary,
            timings: self.timings,
        };
        let text = serde_json::to_string_pretty(&m).map_err(failed)?;
        std::fs::write(self.out.join(MANIFEST), text).map_err(failed)?;
        Ok(m)
    }
}

/// Load a config file or a previous run's manifest. Input paths are
/// resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg = if value.get("config_hash").is_some() && value.get("config").is_some() {
        RunConfig::from_json(&value["config"].to_string(), path)?
    } else {
        RunConfig::from_json(&text, path)?
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &mut Option<PathBuf>| {
        if let Some(q) = p.as_mut() {
            if q.is_relative() {
                *q = base.join(&*q);
            }
            if let Ok(c) = q.canonicalize() {
                *q = c;
            }
        }
    };
    resolve(&mut cfg.inputs.dataset);
    resolve(&mut cfg.inputs.checkpoint);
    resolve(&mut cfg.inputs.scene);
    resolve(&mut cfg.inputs.chain);
    resolve(&mut cfg.inputs.artifact);
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    match p {
        Some(p) if p.exists() => Ok(p),
        Some(p) => Err(CliError::MissingInput(format!("{what} {} does not exist", p.display()))),
        None => Err(CliError::MissingInput(format!("config has no inputs.{what}"))),
    }
}

pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    match cmd {
        Command::Dataset => cmd_dataset(cfg, out),
        Command::Train => cmd_train(cfg, out),
        Command::Scene => cmd_scene(cfg, out),
        Command::Generate => cmd_generate(cfg, out),
        Command::Postprocess => cmd_postprocess(cfg, out),
        Command::Ablate => cmd_ablate(cfg, out),
        Command::Plot => cmd_plot(cfg, out),
    }
}

pub fn cmd_dataset(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    let mut run = Run::new(out)?;
    let ds = run.time("build", || build_dataset(&cfg.dataset)).map_err(failed)?;
    let path = run.path("dataset.bin");
    ds.save(&path).map_err(failed)?;
    if cfg.export_json {
        run.write("dataset.json", ds.to_json())?;
    }
    let mut counts = BTreeMap::new();
    for p in &ds.primitives {
        *counts.entry(format!("{:?}", p.action)).or_insert(0usize) += 1;
    }
    run.finish(
        Command::Dataset,
        cfg,
        json!({ "primitives": ds.primitives.len(), "per_action": counts }),
    )
}

fn load_or_build_dataset(cfg: &RunConfig, run: &mut Run) -> Result<Dataset, CliError> {
    match &cfg.inputs.dataset {
        Some(_) => {
            let p = require(&cfg.inputs.dataset, "dataset")?;
            run.input(p)?;
            Dataset::load(p).map_err(failed)
        }
        None => run.time("dataset", || build_dataset(&cfg.dataset)).map_err(failed),
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    let mut run = Run::new(out)?;
    let ds = load_or_build_dataset(cfg, &mut run)?;
    let tm = run.time("train", || train(&ds.primitives, &cfg.train)).map_err(failed)?;
    let ckpt = run.path("model.ckpt");
    save_checkpoint(&ckpt, &tm).map_err(failed)?;
    run.write("loss.csv", loss_curve_csv(&tm.losses))?;
    let first = tm.losses.first().map(|l| l.total);
    let last = tm.losses.last().map(|l| l.total);
    run.finish(
        Command::Train,
        cfg,
        json!({
            "parameters": tm.model.parameter_count(),
            "primitives": ds.primitives.len(),
            "initial_loss": first,
            "final_loss": last,
        }),
    )
}

/// Scenario from the config, or open space when no kind is set.
pub fn build_scenario(cfg: &RunConfig) -> Result<Scenario, CliError> {
    match cfg.scenario.kind {
        Some(kind) => make_scenario(kind, cfg.seed, &cfg.scenario.params).map_err(failed),
        None => Ok(Scenario {
            kind: ScenarioKind::Forest,
            seed: cfg.seed,
            scene: ObstacleScene::open(cfg.scenario.params.bounds),
            start: cfg.scenario.params.start,
            heading: cfg.scenario.params.heading,
            targets: Vec::new(),
        }),
    }
}

fn load_scenario(cfg: &RunConfig, run: &mut Run) -> Result<(Scenario, SdfGrid), CliError> {
    let scenario = match &cfg.inputs.scene {
        Some(_) => {
            let p = require(&cfg.inputs.scene, "scene")?;
            run.input(p)?;
            let text = std::fs::read_to_string(p).map_err(failed)?;
            serde_json::from_str(&text).map_err(|e| failed(format!("scene {}: {e}", p.display())))?
        }
        None => build_scenario(cfg)?,
    };
    let grid = run
        .time("sdf", || build_sdf(&scenario.scene, cfg.scenario.voxel))
        .map_err(failed)?;
    Ok((scenario, grid))
}

pub fn cmd_scene(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    let mut run = Run::new(out)?;
    let scenario = build_scenario(cfg)?;
    let grid = run
        .time("sdf", || build_sdf(&scenario.scene, cfg.scenario.voxel))
        .map_err(failed)?;
    run.write("scene.json", serde_json::to_string_pretty(&scenario).map_err(failed)?)?;
    let p = run.path("sdf.bin");
    grid.save(&p, &scenario.scene.content_hash()).map_err(failed)?;
    run.write(
        "scene.svg",
        plot::top_down_svg(&scenario.scene, &[], &scenario.targets),
    )?;
    run.finish(
        Command::Scene,
        cfg,
        json!({
            "obstacles": scenario.scene.obstacles.len(),
            "free_targets": scenario.targets.len(),
            "sdf_dims": grid.dims,
        }),
    )
}

fn load_model(cfg: &RunConfig, run: &mut Run) -> Result<TrainedModel, CliError> {
    let p = require(&cfg.inputs.checkpoint, "checkpoint")?;
    run.input(p)?;
    load_checkpoint(p).map_err(failed)
}

/// Chain result file: plan, seeds and statistics; frames go to `chain.bin`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainFile {
    pub plan: ChainPlan,
    pub stage_seeds: Vec<u64>,
    pub start: ChainStart,
    pub variant: Variant,
    pub guidance: GuidanceConfig,
    pub scenario: Scenario,
    pub stats: Vec<BatchStats>,
    pub junctions: Vec<Junction>,
    pub fine_pass: Vec<bool>,
    pub collision_free: bool,
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    let mut run = Run::new(out)?;
    let tm = load_model(cfg, &mut run)?;
    let (scenario, grid) = load_scenario(cfg, &mut run)?;
    let mut plan = scenario_plan(&scenario, cfg.chain.n_aero, cfg.chain.spacing, cfg.seed);
    if let Some(a) = &cfg.chain.actions {
        plan.actions = a.clone();
    }
    let start = scenario_start(&scenario, cfg.chain.speed);
    let sampler = Sampler {
        model: &tm.model,
        normalizer: &tm.normalizer,
        schedule: &tm.schedule,
    };
    let result = run
        .time("generate", || chain_generate(sampler, &plan, &start, &grid, &cfg.guidance, cfg.chain.variant))
        .map_err(|e| match e {
            GuidanceError::BatchExhausted { index, stats } => CliError::BatchExhausted { index, stats },
            other => failed(other),
        })?;
    let ds = Dataset {
        n_a: tm.model.config.n_a,
        n_h: tm.model.config.n_h,
        dt: aerobatch::FRAME_DT,
        primitives: result.primitives.clone(),
    };
    let p = run.path("chain.bin");
    ds.save(&p).map_err(failed)?;
    let file = ChainFile {
        stage_seeds: (0..plan.n_aero()).map(|i| plan.stage_seed(i)).collect(),
        plan,
        start,
        variant: cfg.chain.variant,
        guidance: cfg.guidance.clone(),
        scenario,
        stats: result.stats.clone(),
        junctions: result.junctions.clone(),
        fine_pass: result.fine_pass.clone(),
        collision_free: result.collision_free(),
    };
    run.write("chain.json", serde_json::to_string_pretty(&file).map_err(failed)?)?;
    let max_dp = result.junctions.iter().map(|j| j.dp).fold(0.0, f64::max);
    let max_dth = result.junctions.iter().map(|j| j.dtheta).fold(0.0, f64::max);
    run.finish(
        Command::Generate,
        cfg,
        json!({
            "primitives": result.primitives.len(),
            "collision_free": file.collision_free,
            "max_junction_dp": max_dp,
            "max_junction_dtheta": max_dth,
        }),
    )
}

/// History of the first primitive followed by every active frame.
pub fn chain_frames(ds: &Dataset) -> Vec<StateFrame> {
    let mut frames: Vec<StateFrame> = ds.primitives.first().map(|p| p.history.clone()).unwrap_or_default();
    for p in &ds.primitives {
        frames.extend(p.active().iter().map(|f| StateFrame { padding: false, ..*f }));
    }
    frames
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostprocessReport {
    pub feasible: bool,
    pub tolerance: f64,
    pub frames: usize,
    pub duration: f64,
    pub report: OptReport,
}

pub fn cmd_postprocess(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    let mut run = Run::new(out)?;
    let chain_path = require(&cfg.inputs.chain, "chain")?.to_path_buf();
    run.input(&chain_path)?;
    let ds = Dataset::load(&chain_path).map_err(failed)?;
    // the scene is taken from the sibling chain.json when present
    let side = chain_path.with_file_name("chain.json");
    let grid = if side.exists() {
        run.input(&side)?;
        let text = std::fs::read_to_string(&side).map_err(failed)?;
        let file: ChainFile = serde_json::from_str(&text).map_err(failed)?;
        if file.scenario.scene.obstacles.is_empty() {
            None
        } else {
            Some(build_sdf(&file.scenario.scene, cfg.scenario.voxel).map_err(failed)?)
        }
    } else {
        None
    };
    let frames = chain_frames(&ds);
    let params = cfg.dataset.params;
    let (_, outcome) = run
        .time("optimize", || postprocess_frames(&frames, grid.as_ref(), None, &params, &cfg.postprocess))
        .map_err(failed)?;
    let csv = trajectory_csv(&outcome.spline, outcome.report.yaw, &params, TRAJECTORY_RATE_HZ).map_err(failed)?;
    run.write("trajectory.csv", csv)?;
    let report = PostprocessReport {
        feasible: outcome.report.audit.dynamically_feasible(FEASIBILITY_TOL),
        tolerance: FEASIBILITY_TOL,
        frames: frames.len(),
        duration: outcome.spline.total_duration(),
        report: outcome.report,
    };
    run.write("report.json", serde_json::to_string_pretty(&report).map_err(failed)?)?;
    let au = &report.report.audit;
    run.finish(
        Command::Postprocess,
        cfg,
        json!({
            "feasible": report.feasible,
            "violation_velocity": au.violation_velocity,
            "violation_thrust": au.violation_thrust,
            "violation_omega_xy": au.violation_omega_xy,
            "violation_omega_z": au.violation_omega_z,
        }),
    )
}

/// Median and half-range per (variant, N_aero) over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub n_aero: usize,
    pub rates: Vec<f64>,
    pub median: f64,
    pub half_range: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub scenario: String,
    pub batch: usize,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
    pub runs: Vec<CellRun>,
}

impl AblationReport {
    pub fn cell(&self, variant: Variant, n_aero: usize) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.variant == variant && c.n_aero == n_aero)
    }

    /// One row per variant, one column per N_aero.
    pub fn table(&self) -> String {
        let n_max = self.cells.iter().map(|c| c.n_aero).max().unwrap_or(0);
        let mut out = format!("success rate (%) in {}, median ± half-range over {} seeds\n", self.scenario, self.seeds.len());
        out.push_str(&format!("{:<10}", "variant"));
        for n in 1..=n_max {
            out.push_str(&format!("{:>16}", format!("N_aero={n}")));
        }
        out.push('\n');
        let mut variants: Vec<Variant> = self.cells.iter().map(|c| c.variant).collect();
        variants.dedup();
        for v in variants {
            out.push_str(&format!("{:<10}", v.name()));
            for n in 1..=n_max {
                let cell = self.cell(v, n).map(|c| format!("{:.1}±{:.1}", c.median, c.half_range));
                out.push_str(&format!("{:>16}", cell.unwrap_or_else(|| "-".into())));
            }
            out.push('\n');
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("variant,n_aero,median,half_range,rates\n");
        for c in &self.cells {
            let rates: Vec<String> = c.rates.iter().map(|r| format!("{r:.4}")).collect();
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{}\n",
                c.variant.name(),
                c.n_aero,
                c.median,
                c.half_range,
                rates.join(";")
            ));
        }
        out
    }
}

/// Worker threads for sweeps: `AEROBATCH_THREADS`, else available cores.
pub fn thread_cap() -> usize {
    std::env::var("AEROBATCH_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Run every (variant, seed) chain and aggregate per prefix length. Cell
/// failures are recorded as 0% with a diagnostic.
pub fn run_ablation(
    tm: &TrainedModel,
    scenario: &Scenario,
    grid: &SdfGrid,
    cfg: &RunConfig,
) -> AblationReport {
    let sampler = Sampler {
        model: &tm.model,
        normalizer: &tm.normalizer,
        schedule: &tm.schedule,
    };
    let a = &cfg.ablation;
    let jobs: Vec<(Variant, u64)> = a
        .variants
        .iter()
        .flat_map(|&v| a.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let one = |&(v, s): &(Variant, u64)| -> CellRun {
        ablation_run(sampler, scenario, grid, &cfg.guidance, v, a.n_aero, cfg.chain.spacing, cfg.chain.speed, s)
            .unwrap_or_else(|e| CellRun {
                variant: v,
                seed: s,
                success: vec![0.0; a.n_aero],
                diagnostic: Some(e.to_string()),
            })
    };
    let threads = thread_cap().min(jobs.len()).max(1);
    let runs: Vec<CellRun> = if threads == 1 {
        jobs.iter().map(one).collect()
    } else {
        let chunk = jobs.len().div_ceil(threads);
        std::thread::scope(|sc| {
            let handles: Vec<_> = jobs.chunks(chunk).map(|c| sc.spawn(move || c.iter().map(one).collect::<Vec<_>>())).collect();
            handles.into_iter().flat_map(|h| h.join().expect("ablation worker panicked")).collect()
        })
    };
    let mut cells = Vec::new();
    for &v in &a.variants {
        for n in 1..=a.n_aero {
            let rates: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(|r| r.success[n - 1]).collect();
            let (median, half_range) = median_half_range(&rates);
            cells.push(AblationCell {
                variant: v,
                n_aero: n,
                rates,
                median,
                half_range,
            });
        }
    }
    AblationReport {
        scenario: cfg
            .scenario
            .kind
            .map(|k| format!("{k:?}").to_lowercase())
            .unwrap_or_else(|| "open".into()),
        batch: cfg.guidance.batch,
        seeds: a.seeds.clone(),
        cells,
        runs,
    }
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    let mut run = Run::new(out)?;
    let tm = load_model(cfg, &mut run)?;
    let (scenario, grid) = load_scenario(cfg, &mut run)?;
    let report = run.time("ablate", || run_ablation(&tm, &scenario, &grid, cfg));
    run.write("ablation.json", serde_json::to_string_pretty(&report).map_err(failed)?)?;
    run.write("ablation.csv", report.csv())?;
    run.write("ablation.txt", report.table())?;
    let failures = report.runs.iter().filter(|r| r.diagnostic.is_some()).count();
    run.finish(Command::Ablate, cfg, json!({ "cells": report.cells.len(), "runs_with_diagnostics": failures }))
}

pub fn cmd_plot(cfg: &RunConfig, out: &Path) -> Result<Manifest, CliError> {
    let mut run = Run::new(out)?;
    let p = require(&cfg.inputs.artifact, "artifact")?.to_path_buf();
    run.input(&p)?;
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    let text = std::fs::read_to_string(&p).map_err(failed)?;
    let head = text.lines().next().unwrap_or_default();
    let kind = if name.ends_with(".csv") && head.starts_with("t,") {
        run.write("profile.svg", plot::profile_svg(&text).map_err(CliError::Unsupported)?)?;
        "trajectory"
    } else if name.ends_with(".csv") && head.starts_with("step,") {
        run.write("loss.svg", plot::loss_svg(&text).map_err(CliError::Unsupported)?)?;
        "loss"
    } else if name.ends_with(".json") {
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Unsupported(format!("{name}: {e}")))?;
        if v.get("plan").is_some() {
            let file: ChainFile = serde_json::from_value(v).map_err(|e| CliError::Unsupported(format!("{name}: {e}")))?;
            let bin = p.with_file_name("chain.bin");
            let paths = if bin.exists() {
                run.input(&bin)?;
                let ds = Dataset::load(&bin).map_err(failed)?;
                vec![chain_frames(&ds).iter().map(|f| f.p).collect()]
            } else {
                Vec::new()
            };
            run.write("chain.svg", plot::top_down_svg(&file.scenario.scene, &paths, &file.plan.targets))?;
            "chain"
        } else if let Some(groups) = v.get("boxplot").and_then(|b| b.as_object()) {
            let groups: Vec<(String, Vec<f64>)> = groups
                .iter()
                .map(|(k, vals)| {
                    let xs = vals
                        .as_array()
                        .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
                        .unwrap_or_default();
                    (k.clone(), xs)
                })
                .collect();
            let title = v.get("title").and_then(|t| t.as_str()).unwrap_or("distribution");
            run.write("boxplot.svg", plot::boxplot_svg(title, &groups))?;
            "boxplot"
        } else {
            return Err(CliError::Unsupported(format!("{name}: unrecognized JSON artifact")));
        }
    } else {
        return Err(CliError::Unsupported(name));
    };
    run.finish(Command::Plot, cfg, json!({ "kind": kind }))
}
