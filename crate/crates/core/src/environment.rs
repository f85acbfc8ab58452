//! Obstacle scenes, voxelized signed distance fields and scenario generators.

use crate::binio::{self, invalid};
use crate::kinematics::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Distance reported beyond this range is clamped.
pub const DEFAULT_FAR_CLAMP: f64 = 5.0;
const MAX_NODES: f64 = 5.0e7;
const SDF_MAGIC: &[u8; 8] = b"AERSDF1\0";
const SDF_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("voxel size {0} outside [0.05, 0.5] m")]
    VoxelRange(f64),
    #[error("grid of {nodes:.3e} nodes exceeds the 5e7 budget; try voxel >= {suggested:.3} m")]
    MemoryBudget { nodes: f64, suggested: f64 },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("no collision-free targets after {0} attempts")]
    NoTargets(usize),
    #[error("sdf cache {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|i| x[i] >= self.min[i] && x[i] <= self.max[i])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn intersects(&self, o: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= o.max[i] && o.min[i] <= self.max[i])
    }

    fn corners(&self) -> [Vec3; 8] {
        let mut out = [Vec3::zeros(); 8];
        for (k, c) in out.iter_mut().enumerate() {
            for i in 0..3 {
                c[i] = if (k >> i) & 1 == 0 { self.min[i] } else { self.max[i] };
            }
        }
        out
    }
}

/// Obstacle primitives with closed-form signed distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Obstacle {
    /// Axis-aligned box.
    Box { center: Vec3, half: Vec3 },
    /// Vertical capped cylinder.
    Cylinder {
        center: Vec3,
        radius: f64,
        half_height: f64,
    },
    /// Half-space; `normal` points into free space.
    Wall { point: Vec3, normal: Vec3 },
}

impl Obstacle {
    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        match self {
            Obstacle::Box { center, half } => {
                let q = (x - center).abs() - half;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            Obstacle::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let radial = ((x.x - center.x).powi(2) + (x.y - center.y).powi(2)).sqrt() - radius;
                let axial = (x.z - center.z).abs() - half_height;
                let outside = (radial.max(0.0).powi(2) + axial.max(0.0).powi(2)).sqrt();
                outside + radial.max(axial).min(0.0)
            }
            Obstacle::Wall { point, normal } => normal.normalize().dot(&(x - point)),
        }
    }

    /// Brute-force membership test (independent of the distance formulas).
    pub fn contains(&self, x: &Vec3) -> bool {
        match self {
            Obstacle::Box { center, half } => (0..3).all(|i| (x[i] - center[i]).abs() <= half[i]),
            Obstacle::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let dx = x.x - center.x;
                let dy = x.y - center.y;
                dx * dx + dy * dy <= radius * radius && (x.z - center.z).abs() <= *half_height
            }
            Obstacle::Wall { point, normal } => normal.dot(&(x - point)) < 0.0,
        }
    }

    fn touches(&self, bounds: &Aabb) -> bool {
        match self {
            Obstacle::Box { center, half } => bounds.intersects(&Aabb::new(center - half, center + half)),
            Obstacle::Cylinder {
                center,
                radius,
                half_height,
            } => {
                let h = Vec3::new(*radius, *radius, *half_height);
                bounds.intersects(&Aabb::new(center - h, center + h))
            }
            Obstacle::Wall { .. } => bounds.corners().iter().any(|c| self.signed_distance(c) < 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleScene {
    pub bounds: Aabb,
    pub obstacles: Vec<Obstacle>,
}

impl ObstacleScene {
    pub fn open(bounds: Aabb) -> Self {
        Self {
            bounds,
            obstacles: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if (0..3).any(|i| !(self.bounds.max[i] > self.bounds.min[i])) {
            return Err(EnvError::InvalidScene("bounds are empty".into()));
        }
        for (k, o) in self.obstacles.iter().enumerate() {
            if !o.touches(&self.bounds) {
                return Err(EnvError::InvalidScene(format!(
                    "obstacle {k} does not intersect the scene bounds"
                )));
            }
        }
        Ok(())
    }

    /// Exact signed distance to the union (`+∞` for an empty scene).
    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.signed_distance(x))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn collides(&self, x: &Vec3) -> bool {
        self.obstacles.iter().any(|o| o.contains(x))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("scene serializes");
        Sha256::digest(&json).into()
    }
}

/// Voxelized signed distance field; samples live on grid nodes
/// `origin + i·voxel`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfGrid {
    pub origin: Vec3,
    pub voxel: f64,
    pub dims: [usize; 3],
    pub far: f64,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfSample {
    pub value: f64,
    pub grad: Vec3,
    /// The query point was outside the grid and clamped to its boundary.
    pub clamped: bool,
}

pub fn build_sdf(scene: &ObstacleScene, voxel: f64) -> Result<SdfGrid, EnvError> {
    build_sdf_with_far(scene, voxel, DEFAULT_FAR_CLAMP)
}

pub fn build_sdf_with_far(scene: &ObstacleScene, voxel: f64, far: f64) -> Result<SdfGrid, EnvError> {
    if !(0.05..=0.5).contains(&voxel) {
        return Err(EnvError::VoxelRange(voxel));
    }
    scene.validate()?;
    let ext = scene.bounds.extent();
    let volume = ext.x * ext.y * ext.z;
    let nodes = volume / voxel.powi(3);
    if nodes > MAX_NODES {
        return Err(EnvError::MemoryBudget {
            nodes,
            suggested: (volume / MAX_NODES).cbrt(),
        });
    }
    let dims = [0, 1, 2].map(|i| ((ext[i] / voxel - 1e-9).ceil() as usize + 1).max(2));
    let origin = scene.bounds.min;
    let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let x = origin + Vec3::new(i as f64, j as f64, k as f64) * voxel;
                let d = scene.signed_distance(&x).clamp(-far, far);
                values.push(d as f32);
            }
        }
    }
    Ok(SdfGrid {
        origin,
        voxel,
        dims,
        far,
        values,
    })
}

impl SdfGrid {
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.idx(i, j, k)] as f64
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.voxel
    }

    pub fn upper(&self) -> Vec3 {
        self.origin + Vec3::new(
            (self.dims[0] - 1) as f64,
            (self.dims[1] - 1) as f64,
            (self.dims[2] - 1) as f64,
        ) * self.voxel
    }

    /// Trilinear value and the analytic gradient of the interpolant.
    pub fn query(&self, x: &Vec3) -> SdfSample {
        let mut clamped = false;
        let mut cell = [0usize; 3];
        let mut f = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let mut u = (x[a] - self.origin[a]) / self.voxel;
            let hi = (n - 1) as f64;
            if !(u >= 0.0) {
                u = 0.0;
                clamped = true;
            } else if u > hi {
                u = hi;
                clamped = true;
            }
            let c = (u.floor() as usize).min(n - 2);
            cell[a] = c;
            f[a] = u - c as f64;
        }
        let [i, j, k] = cell;
        let c = |di: usize, dj: usize, dk: usize| self.node(i + di, j + dj, k + dk);
        let (fx, fy, fz) = (f[0], f[1], f[2]);
        // interpolate along x, then y, then z
        let c00 = c(0, 0, 0) * (1.0 - fx) + c(1, 0, 0) * fx;
        let c10 = c(0, 1, 0) * (1.0 - fx) + c(1, 1, 0) * fx;
        let c01 = c(0, 0, 1) * (1.0 - fx) + c(1, 0, 1) * fx;
        let c11 = c(0, 1, 1) * (1.0 - fx) + c(1, 1, 1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        let value = c0 * (1.0 - fz) + c1 * fz;

        let dx00 = c(1, 0, 0) - c(0, 0, 0);
        let dx10 = c(1, 1, 0) - c(0, 1, 0);
        let dx01 = c(1, 0, 1) - c(0, 0, 1);
        let dx11 = c(1, 1, 1) - c(0, 1, 1);
        let gx = ((dx00 * (1.0 - fy) + dx10 * fy) * (1.0 - fz) + (dx01 * (1.0 - fy) + dx11 * fy) * fz)
            / self.voxel;
        let gy = ((c10 - c00) * (1.0 - fz) + (c11 - c01) * fz) / self.voxel;
        let gz = (c1 - c0) / self.voxel;
        SdfSample {
            value,
            grad: Vec3::new(gx, gy, gz),
            clamped,
        }
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        self.query(x).value
    }

    pub fn save(&self, path: &Path, scene_hash: &[u8; 32]) -> Result<(), EnvError> {
        let io = |source| EnvError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        (|| -> std::io::Result<()> {
            w.write_all(SDF_MAGIC)?;
            binio::write_u32(&mut w, SDF_VERSION)?;
            w.write_all(scene_hash)?;
            binio::write_f64(&mut w, self.voxel)?;
            binio::write_f64(&mut w, self.far)?;
            for a in 0..3 {
                binio::write_f64(&mut w, self.origin[a])?;
            }
            for a in 0..3 {
                binio::write_u32(&mut w, self.dims[a] as u32)?;
            }
            binio::write_f32s(&mut w, self.values.iter().copied())?;
            w.flush()
        })()
        .map_err(io)
    }

    /// Load a cached grid; returns the stored scene hash alongside.
    pub fn load(path: &Path) -> Result<(SdfGrid, [u8; 32]), EnvError> {
        let io = |source| EnvError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        (|| -> std::io::Result<(SdfGrid, [u8; 32])> {
            let magic: [u8; 8] = binio::read_array(&mut r)?;
            if &magic != SDF_MAGIC {
                return Err(invalid("bad sdf magic"));
            }
            let version = binio::read_u32(&mut r)?;
            if version != SDF_VERSION {
                return Err(invalid(format!("unsupported sdf version {version}")));
            }
            let hash: [u8; 32] = binio::read_array(&mut r)?;
            let voxel = binio::read_f64(&mut r)?;
            let far = binio::read_f64(&mut r)?;
            let mut origin = Vec3::zeros();
            for a in 0..3 {
                origin[a] = binio::read_f64(&mut r)?;
            }
            let mut dims = [0usize; 3];
            for d in dims.iter_mut() {
                *d = binio::read_u32(&mut r)? as usize;
            }
            let values = binio::read_f32s(&mut r, dims.iter().product())?;
            let mut rest = Vec::new();
            r.read_to_end(&mut rest)?;
            if !rest.is_empty() {
                return Err(invalid("trailing bytes in sdf cache"));
            }
            Ok((
                SdfGrid {
                    origin,
                    voxel,
                    dims,
                    far,
                    values,
                },
                hash,
            ))
        })()
        .map_err(io)
    }
}

/// Cache path keyed by scene hash and voxel size.
pub fn sdf_cache_path(dir: &Path, scene: &ObstacleScene, voxel: f64) -> PathBuf {
    let hash = scene.content_hash();
    let hex: String = hash[..8].iter().map(|b| format!("{b:02x}")).collect();
    dir.join(format!("sdf_{hex}_{:.0}mm.bin", voxel * 1000.0))
}

/// Load the grid from `dir` if a matching cache exists, else build and store it.
pub fn load_or_build_sdf(dir: &Path, scene: &ObstacleScene, voxel: f64) -> Result<SdfGrid, EnvError> {
    let path = sdf_cache_path(dir, scene, voxel);
    let hash = scene.content_hash();
    if path.exists() {
        if let Ok((grid, stored)) = SdfGrid::load(&path) {
            if stored == hash && grid.voxel == voxel {
                return Ok(grid);
            }
        }
    }
    let grid = build_sdf(scene, voxel)?;
    std::fs::create_dir_all(dir).map_err(|source| EnvError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    grid.save(&path, &hash)?;
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Forest,
    Workshop,
    Factory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    pub bounds: Aabb,
    /// Start position; kept free of obstacles within `clearing`.
    pub start: Vec3,
    /// Initial heading (rad).
    pub heading: f64,
    pub clearing: f64,
    /// Minimum spacing between obstacle centers (forest/factory).
    pub spacing: f64,
    /// Cylinder radius range (forest).
    pub radius: [f64; 2],
    /// Partition wall pitch along x (workshop).
    pub partition_pitch: f64,
    /// Door width range (workshop).
    pub door_width: [f64; 2],
    /// Minimum clearance of an emitted target waypoint.
    pub target_margin: f64,
    /// Grid pitch of candidate targets.
    pub target_pitch: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            bounds: Aabb::new(Vec3::new(-4.0, -14.0, -4.0), Vec3::new(40.0, 14.0, 5.0)),
            start: Vec3::zeros(),
            heading: 0.0,
            clearing: 3.0,
            spacing: 3.2,
            radius: [0.25, 0.45],
            partition_pitch: 7.0,
            door_width: [2.0, 3.5],
            target_margin: 0.8,
            target_pitch: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub scene: ObstacleScene,
    pub start: Vec3,
    pub heading: f64,
    /// Collision-free target waypoints (clearance ≥ `target_margin`).
    pub targets: Vec<Vec3>,
}

const SCENARIO_ATTEMPTS: usize = 8;

pub fn make_scenario(kind: ScenarioKind, seed: u64, params: &ScenarioParams) -> Result<Scenario, EnvError> {
    for attempt in 0..SCENARIO_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(attempt as u64));
        let obstacles = match kind {
            ScenarioKind::Forest => forest(params, &mut rng),
            ScenarioKind::Workshop => workshop(params, &mut rng),
            ScenarioKind::Factory => factory(params, &mut rng),
        };
        let scene = ObstacleScene {
            bounds: params.bounds,
            obstacles,
        };
        scene.validate()?;
        let targets = free_targets(&scene, params);
        if !targets.is_empty() {
            return Ok(Scenario {
                kind,
                seed,
                scene,
                start: params.start,
                heading: params.heading,
                targets,
            });
        }
    }
    Err(EnvError::NoTargets(SCENARIO_ATTEMPTS))
}

fn free_targets(scene: &ObstacleScene, params: &ScenarioParams) -> Vec<Vec3> {
    let b = &params.bounds;
    let pitch = params.target_pitch;
    let mut out = Vec::new();
    let n = |a: usize| ((b.max[a] - b.min[a] - 2.0) / pitch).floor() as i64;
    for iz in -1..=1 {
        let z = params.start.z + iz as f64;
        if z < b.min.z + 1.0 || z > b.max.z - 1.0 {
            continue;
        }
        for ix in 0..=n(0) {
            for iy in 0..=n(1) {
                let p = Vec3::new(b.min.x + 1.0 + ix as f64 * pitch, b.min.y + 1.0 + iy as f64 * pitch, z);
                if scene.signed_distance(&p) >= params.target_margin {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Dart-throwing Poisson-disk sampling in the xy-plane.
fn poisson_xy(params: &ScenarioParams, rng: &mut ChaCha8Rng, spacing: f64) -> Vec<[f64; 2]> {
    let b = &params.bounds;
    let mut pts: Vec<[f64; 2]> = Vec::new();
    let area = (b.max.x - b.min.x) * (b.max.y - b.min.y);
    let tries = (area / (spacing * spacing) * 30.0) as usize;
    for _ in 0..tries {
        let p = [rng.random_range(b.min.x..b.max.x), rng.random_range(b.min.y..b.max.y)];
        let ds = (p[0] - params.start.x).hypot(p[1] - params.start.y);
        if ds < params.clearing {
            continue;
        }
        if pts
            .iter()
            .all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= spacing)
        {
            pts.push(p);
        }
    }
    pts
}

fn forest(params: &ScenarioParams, rng: &mut ChaCha8Rng) -> Vec<Obstacle> {
    let b = &params.bounds;
    let zc = 0.5 * (b.min.z + b.max.z);
    let hh = 0.5 * (b.max.z - b.min.z) + 1.0;
    poisson_xy(params, rng, params.spacing)
        .into_iter()
        .map(|[x, y]| Obstacle::Cylinder {
            center: Vec3::new(x, y, zc),
            radius: rng.random_range(params.radius[0]..=params.radius[1]),
            half_height: hh,
        })
        .collect()
}

fn workshop(params: &ScenarioParams, rng: &mut ChaCha8Rng) -> Vec<Obstacle> {
    let b = &params.bounds;
    let mut out = vec![
        Obstacle::Wall {
            point: Vec3::new(0.0, b.min.y + 0.5, 0.0),
            normal: Vec3::y(),
        },
        Obstacle::Wall {
            point: Vec3::new(0.0, b.max.y - 0.5, 0.0),
            normal: -Vec3::y(),
        },
    ];
    let zc = 0.5 * (b.min.z + b.max.z);
    let hz = 0.5 * (b.max.z - b.min.z) + 1.0;
    let (y0, y1) = (b.min.y + 0.5, b.max.y - 0.5);
    let mut x = params.start.x + params.clearing + params.partition_pitch * 0.5;
    while x < b.max.x - 1.0 {
        let n_doors = rng.random_range(1..=2usize);
        let mut gaps: Vec<(f64, f64)> = Vec::new();
        let span = (y1 - y0) / n_doors as f64;
        for d in 0..n_doors {
            let w = rng.random_range(params.door_width[0]..=params.door_width[1]).min(span - 0.2);
            let lo = y0 + d as f64 * span + 0.1;
            let start = rng.random_range(lo..=(lo + span - 0.2 - w).max(lo));
            gaps.push((start, start + w));
        }
        let mut cursor = y0 - 1.0;
        for (g0, g1) in gaps.iter().copied().chain(std::iter::once((y1 + 1.0, y1 + 1.0))) {
            if g0 > cursor + 1e-6 {
                out.push(Obstacle::Box {
                    center: Vec3::new(x, 0.5 * (cursor + g0), zc),
                    half: Vec3::new(0.15, 0.5 * (g0 - cursor), hz),
                });
            }
            cursor = g1;
        }
        x += params.partition_pitch;
    }
    out
}

fn factory(params: &ScenarioParams, rng: &mut ChaCha8Rng) -> Vec<Obstacle> {
    let b = &params.bounds;
    let zc = 0.5 * (b.min.z + b.max.z);
    poisson_xy(params, rng, params.spacing * 1.4)
        .into_iter()
        .map(|[x, y]| {
            if rng.random_bool(0.5) {
                let half = Vec3::new(
                    rng.random_range(0.3..0.9),
                    rng.random_range(0.3..0.9),
                    rng.random_range(0.5..2.5),
                );
                Obstacle::Box {
                    center: Vec3::new(x, y, b.min.z + half.z),
                    half,
                }
            } else {
                Obstacle::Cylinder {
                    center: Vec3::new(x, y, zc),
                    radius: rng.random_range(0.2..0.6),
                    half_height: 0.5 * (b.max.z - b.min.z) + 1.0,
                }
            }
        })
        .collect()
}
