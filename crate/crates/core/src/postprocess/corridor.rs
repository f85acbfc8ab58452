//! Axis-aligned safe-flight corridors grown from the frames of each segment.

use super::keyframes::Keyframes;
use super::PostprocessError;
use crate::environment::{Aabb, SdfGrid};
use crate::kinematics::{StateFrame, Vec3};
use serde::{Deserialize, Serialize};

/// Convex polyhedron `{x : a_k·x ≤ b_k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyhedron {
    pub a: Vec<Vec3>,
    pub b: Vec<f64>,
}

impl Polyhedron {
    pub fn from_box(bx: &Aabb) -> Self {
        let mut a = Vec::with_capacity(6);
        let mut b = Vec::with_capacity(6);
        for i in 0..3 {
            let mut e = Vec3::zeros();
            e[i] = 1.0;
            a.push(e);
            b.push(bx.max[i]);
            a.push(-e);
            b.push(-bx.min[i]);
        }
        Self { a, b }
    }

    /// Largest `a_k·x − b_k`; non-positive inside.
    pub fn violation(&self, x: &Vec3) -> f64 {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| a.dot(x) - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, x: &Vec3, tol: f64) -> bool {
        self.violation(x) <= tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub polyhedra: Vec<Polyhedron>,
    pub boxes: Vec<Aabb>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorridorParams {
    /// Seed-box inflation (vehicle radius), m.
    pub r_quad: f64,
    /// Minimum sdf on grown faces, m.
    pub margin: f64,
    /// Maximum growth of each face beyond the seed box, m.
    pub max_expand: f64,
}

impl Default for CorridorParams {
    fn default() -> Self {
        Self {
            r_quad: 0.1,
            margin: 0.0,
            max_expand: 2.0,
        }
    }
}

/// Sample points on a regular lattice spanning the box (spacing ≤ `h`).
fn lattice(bx: &Aabb, h: f64) -> impl Iterator<Item = Vec3> + '_ {
    let n = [0, 1, 2].map(|i| ((bx.max[i] - bx.min[i]) / h).ceil().max(0.0) as usize + 1);
    let step = [0, 1, 2].map(|i| if n[i] > 1 { (bx.max[i] - bx.min[i]) / (n[i] - 1) as f64 } else { 0.0 });
    (0..n[0]).flat_map(move |i| {
        (0..n[1]).flat_map(move |j| {
            (0..n[2]).map(move |k| {
                bx.min + Vec3::new(i as f64 * step[0], j as f64 * step[1], k as f64 * step[2])
            })
        })
    })
}

/// Whether every lattice sample of the box clears `margin`.
pub fn box_is_free(bx: &Aabb, grid: &SdfGrid, margin: f64) -> bool {
    lattice(bx, grid.voxel).all(|x| grid.value(&x) >= margin)
}

/// Seed box of the frames `lo..=hi`, inflated by `r_quad`.
pub fn seed_box(frames: &[StateFrame], lo: usize, hi: usize, r_quad: f64) -> Aabb {
    let mut min = frames[lo].p;
    let mut max = frames[lo].p;
    for f in &frames[lo..=hi] {
        min = min.inf(&f.p);
        max = max.sup(&f.p);
    }
    Aabb::new(min.add_scalar(-r_quad), max.add_scalar(r_quad))
}

/// Grow each face outward in voxel steps while the swept face stays clear.
pub fn grow_box(seed: &Aabb, grid: &SdfGrid, params: &CorridorParams) -> Aabb {
    let h = grid.voxel;
    let lo_lim = grid.origin;
    let hi_lim = grid.upper();
    let max_steps = (params.max_expand / h).floor() as usize;
    let mut steps = [[0usize; 2]; 3];
    let mut open = [[true; 2]; 3];
    let current = |steps: &[[usize; 2]; 3]| {
        let mut b = *seed;
        for i in 0..3 {
            b.min[i] = (seed.min[i] - steps[i][0] as f64 * h).max(lo_lim[i].min(seed.min[i]));
            b.max[i] = (seed.max[i] + steps[i][1] as f64 * h).min(hi_lim[i].max(seed.max[i]));
        }
        b
    };
    while open.iter().flatten().any(|o| *o) {
        for axis in 0..3 {
            for side in 0..2 {
                if !open[axis][side] {
                    continue;
                }
                if steps[axis][side] >= max_steps {
                    open[axis][side] = false;
                    continue;
                }
                let before = current(&steps);
                let mut trial = steps;
                trial[axis][side] += 1;
                let after = current(&trial);
                if (after.min[axis] - before.min[axis]).abs() + (after.max[axis] - before.max[axis]).abs() < 1e-12 {
                    open[axis][side] = false;
                    continue;
                }
                let mut face = after;
                if side == 0 {
                    face.max[axis] = face.min[axis];
                } else {
                    face.min[axis] = face.max[axis];
                }
                if box_is_free(&face, grid, params.margin) {
                    steps = trial;
                } else {
                    open[axis][side] = false;
                }
            }
        }
    }
    current(&steps)
}

/// One polyhedron per keyframe segment.
pub fn build_corridor(
    frames: &[StateFrame],
    keyframes: &Keyframes,
    grid: &SdfGrid,
    params: &CorridorParams,
) -> Result<Corridor, PostprocessError> {
    let mut polyhedra = Vec::new();
    let mut boxes = Vec::new();
    for (seg, w) in keyframes.indices.windows(2).enumerate() {
        let seed = seed_box(frames, w[0], w[1], params.r_quad);
        if !box_is_free(&seed, grid, params.margin) {
            return Err(PostprocessError::Corridor {
                segment: seg,
                reason: "seed box intersects an obstacle".into(),
            });
        }
        let bx = grow_box(&seed, grid, params);
        let poly = Polyhedron::from_box(&bx);
        if let Some(k) = (w[0]..=w[1]).find(|&k| !poly.contains(&frames[k].p, 1e-9)) {
            return Err(PostprocessError::Corridor {
                segment: seg,
                reason: format!("frame {k} outside its polyhedron"),
            });
        }
        polyhedra.push(poly);
        boxes.push(bx);
    }
    Ok(Corridor { polyhedra, boxes })
}
