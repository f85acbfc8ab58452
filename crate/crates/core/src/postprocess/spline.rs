//! Piecewise polynomial trajectories parameterized by intermediate waypoints
//! and segment durations. Coefficients come from a banded linear system so
//! they are a smooth function of (waypoints, durations).

use super::PostprocessError;
use crate::kinematics::{FlatState, Vec3};
use serde::{Deserialize, Serialize};

/// Square banded matrix with in-place LU factorization (no pivoting).
#[derive(Debug, Clone)]
pub struct Banded {
    n: usize,
    kl: usize,
    ku: usize,
    data: Vec<f64>,
}

impl Banded {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Self {
            n,
            kl,
            ku,
            data: vec![0.0; n * (kl + ku + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.ku, "({i},{j}) outside band");
        i * (self.kl + self.ku + 1) + (j + self.kl - i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.ku {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    pub fn factorize(&mut self) -> Result<(), PostprocessError> {
        let n = self.n;
        for k in 0..n {
            let p = self.get(k, k);
            if !(p.abs() > 1e-300) || !p.is_finite() {
                return Err(PostprocessError::SingularSystem { row: k });
            }
            for i in k + 1..=(k + self.kl).min(n - 1) {
                let l = self.get(i, k) / p;
                self.set(i, k, l);
                if l == 0.0 {
                    continue;
                }
                for j in k + 1..=(k + self.ku).min(n - 1) {
                    let v = self.get(i, j) - l * self.get(k, j);
                    self.set(i, j, v);
                }
            }
        }
        Ok(())
    }

    /// Solve `A x = b` in place after `factorize`.
    pub fn solve(&self, b: &mut [Vec3]) {
        let n = self.n;
        for i in 0..n {
            let mut acc = b[i];
            for j in i.saturating_sub(self.kl)..i {
                acc -= self.get(i, j) * b[j];
            }
            b[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = b[i];
            for j in i + 1..=(i + self.ku).min(n - 1) {
                acc -= self.get(i, j) * b[j];
            }
            b[i] = acc / self.get(i, i);
        }
    }

    /// Solve `Aᵀ x = b` in place after `factorize`.
    pub fn solve_transpose(&self, b: &mut [Vec3]) {
        let n = self.n;
        for i in 0..n {
            let mut acc = b[i];
            for j in i.saturating_sub(self.ku)..i {
                acc -= self.get(j, i) * b[j];
            }
            b[i] = acc / self.get(i, i);
        }
        for i in (0..n).rev() {
            let mut acc = b[i];
            for j in i + 1..=(i + self.kl).min(n - 1) {
                acc -= self.get(j, i) * b[j];
            }
            b[i] = acc;
        }
    }
}

/// `d`-th derivative of `t^k`, i.e. `k!/(k-d)! t^(k-d)`.
pub fn basis(k: usize, d: usize, t: f64) -> f64 {
    if k < d {
        return 0.0;
    }
    let mut c = 1.0;
    for m in (k - d + 1)..=k {
        c *= m as f64;
    }
    c * t.powi((k - d) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolySpline {
    /// Boundary-condition order; segments have degree `2s-1`.
    pub s: usize,
    pub durations: Vec<f64>,
    /// `coeffs[i * 2s + k]` multiplies `t^k` on segment `i`.
    pub coeffs: Vec<Vec3>,
}

impl PolySpline {
    pub fn n_segments(&self) -> usize {
        self.durations.len()
    }

    pub fn n_coeffs(&self) -> usize {
        2 * self.s
    }

    pub fn total_duration(&self) -> f64 {
        self.durations.iter().sum()
    }

    pub fn segment(&self, i: usize) -> &[Vec3] {
        let n = self.n_coeffs();
        &self.coeffs[i * n..(i + 1) * n]
    }

    /// `d`-th derivative on segment `i` at local time `t`.
    pub fn eval_segment(&self, i: usize, t: f64, d: usize) -> Vec3 {
        self.segment(i)
            .iter()
            .enumerate()
            .fold(Vec3::zeros(), |acc, (k, c)| acc + basis(k, d, t) * c)
    }

    /// Segment index and local time for a global time (clamped to the span).
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let mut rem = t.max(0.0);
        for (i, &dt) in self.durations.iter().enumerate() {
            if rem <= dt || i + 1 == self.durations.len() {
                return (i, rem.min(dt));
            }
            rem -= dt;
        }
        unreachable!("spline has at least one segment")
    }

    pub fn eval(&self, t: f64, d: usize) -> Vec3 {
        let (i, tl) = self.locate(t);
        self.eval_segment(i, tl, d)
    }

    /// Flat state (p, v, a, j) at global time `t` with a fixed heading.
    pub fn flat_state(&self, t: f64, yaw: f64) -> FlatState {
        let (i, tl) = self.locate(t);
        FlatState {
            p: self.eval_segment(i, tl, 0),
            v: self.eval_segment(i, tl, 1),
            a: self.eval_segment(i, tl, 2),
            j: self.eval_segment(i, tl, 3),
            yaw,
            yaw_rate: 0.0,
        }
    }

    /// Global start time of every segment plus the final time.
    pub fn knot_times(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.durations.len() + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for d in &self.durations {
            acc += d;
            out.push(acc);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Term {
    seg: usize,
    at_end: bool,
    d: usize,
    sign: f64,
}

/// Row layout of the constraint system. Per junction: high-order continuity
/// rows, the waypoint row, then low-order continuity rows, which keeps every
/// pivot structurally nonzero without row exchanges.
fn row_terms(s: usize, m: usize) -> Vec<Vec<Term>> {
    let mut rows = Vec::with_capacity(2 * s * m);
    for d in 0..s {
        rows.push(vec![Term {
            seg: 0,
            at_end: false,
            d,
            sign: 1.0,
        }]);
    }
    for i in 0..m.saturating_sub(1) {
        let cont = |d: usize| {
            vec![
                Term {
                    seg: i,
                    at_end: true,
                    d,
                    sign: 1.0,
                },
                Term {
                    seg: i + 1,
                    at_end: false,
                    d,
                    sign: -1.0,
                },
            ]
        };
        for d in s..2 * s - 1 {
            rows.push(cont(d));
        }
        rows.push(vec![Term {
            seg: i,
            at_end: true,
            d: 0,
            sign: 1.0,
        }]);
        for d in 0..s {
            rows.push(cont(d));
        }
    }
    for d in 0..s {
        rows.push(vec![Term {
            seg: m - 1,
            at_end: true,
            d,
            sign: 1.0,
        }]);
    }
    rows
}

fn boundary_derivs(state: &FlatState, s: usize) -> Result<Vec<Vec3>, PostprocessError> {
    let all = [state.p, state.v, state.a, state.j];
    if s > all.len() {
        return Err(PostprocessError::InvalidInput(format!("boundary order {s} unsupported")));
    }
    Ok(all[..s].to_vec())
}

/// A solved spline together with its factorized system, for adjoint gradients.
#[derive(Debug, Clone)]
pub struct Minco {
    pub spline: PolySpline,
    lu: Banded,
    rows: Vec<Vec<Term>>,
}

/// Row index of the waypoint constraint at junction `i`.
fn waypoint_row(s: usize, i: usize) -> usize {
    s + 2 * s * i + (s - 1)
}

impl Minco {
    pub fn solve(
        waypoints: &[Vec3],
        durations: &[f64],
        head: &FlatState,
        tail: &FlatState,
        s: usize,
    ) -> Result<Minco, PostprocessError> {
        let m = durations.len();
        if !(3..=4).contains(&s) && s != 2 {
            return Err(PostprocessError::InvalidInput(format!("boundary order {s} unsupported")));
        }
        if m == 0 {
            return Err(PostprocessError::InvalidInput("no segments".into()));
        }
        if waypoints.len() + 1 != m {
            return Err(PostprocessError::InvalidInput(format!(
                "{} waypoints for {m} segments",
                waypoints.len()
            )));
        }
        if let Some(k) = durations.iter().position(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(PostprocessError::InvalidInput(format!(
                "duration {k} is {} (must be positive)",
                durations[k]
            )));
        }
        let nc = 2 * s;
        let n = nc * m;
        let band = 3 * s - 1;
        let rows = row_terms(s, m);
        debug_assert_eq!(rows.len(), n);
        let mut a = Banded::zeros(n, band, band);
        for (r, terms) in rows.iter().enumerate() {
            for t in terms {
                let tt = if t.at_end { durations[t.seg] } else { 0.0 };
                for k in t.d..nc {
                    let col = t.seg * nc + k;
                    let v = a.get(r, col) + t.sign * basis(k, t.d, tt);
                    a.set(r, col, v);
                }
            }
        }
        let mut b = vec![Vec3::zeros(); n];
        let hd = boundary_derivs(head, s)?;
        let td = boundary_derivs(tail, s)?;
        for d in 0..s {
            b[d] = hd[d];
            b[n - s + d] = td[d];
        }
        for (i, q) in waypoints.iter().enumerate() {
            b[waypoint_row(s, i)] = *q;
        }
        a.factorize()?;
        a.solve(&mut b);
        if b.iter().any(|c| !c.iter().all(|x| x.is_finite())) {
            return Err(PostprocessError::SingularSystem { row: 0 });
        }
        Ok(Minco {
            spline: PolySpline {
                s,
                durations: durations.to_vec(),
                coeffs: b,
            },
            lu: a,
            rows,
        })
    }

    /// Chain rule through the linear solve. `dj_dc` is the partial gradient
    /// w.r.t. coefficients and `dj_dt` the explicit partial w.r.t. durations
    /// (updated in place to the total derivative). Returns the gradient w.r.t.
    /// the intermediate waypoints.
    pub fn backprop(&self, dj_dc: &[Vec3], dj_dt: &mut [f64]) -> Vec<Vec3> {
        let s = self.spline.s;
        let m = self.spline.n_segments();
        let mut g = dj_dc.to_vec();
        self.lu.solve_transpose(&mut g);
        for (r, terms) in self.rows.iter().enumerate() {
            for t in terms.iter().filter(|t| t.at_end) {
                let deriv = self.spline.eval_segment(t.seg, self.spline.durations[t.seg], t.d + 1);
                dj_dt[t.seg] -= t.sign * g[r].dot(&deriv);
            }
        }
        (0..m - 1).map(|i| g[waypoint_row(s, i)]).collect()
    }
}

/// Spline through `waypoints` with full boundary states; minimizes
/// `∫‖p^(s)‖²` under those constraints.
pub fn spline_from_waypoints(
    waypoints: &[Vec3],
    durations: &[f64],
    head: &FlatState,
    tail: &FlatState,
    s: usize,
) -> Result<PolySpline, PostprocessError> {
    Ok(Minco::solve(waypoints, durations, head, tail, s)?.spline)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn state(p: Vec3, v: Vec3, a: Vec3) -> FlatState {
        FlatState {
            p,
            v,
            a,
            j: Vec3::zeros(),
            yaw: 0.0,
            yaw_rate: 0.0,
        }
    }

    #[test]
    fn min_jerk_rest_to_rest() {
        let sp = spline_from_waypoints(
            &[],
            &[2.0],
            &FlatState::at_rest(Vec3::zeros()),
            &FlatState::at_rest(Vec3::new(1.0, -2.0, 0.5)),
            3,
        )
        .unwrap();
        for k in 0..=20 {
            let t = 2.0 * k as f64 / 20.0;
            let u = t / 2.0;
            let shape = 10.0 * u.powi(3) - 15.0 * u.powi(4) + 6.0 * u.powi(5);
            let want = Vec3::new(1.0, -2.0, 0.5) * shape;
            assert!((sp.eval(t, 0) - want).norm() < 1e-12);
        }
    }

    #[test]
    fn collinear_waypoints_give_a_straight_line() {
        let v = Vec3::new(1.0, 0.0, 0.0);
        let sp = spline_from_waypoints(
            &[Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)],
            &[1.0, 1.0, 1.0],
            &state(Vec3::zeros(), v, Vec3::zeros()),
            &state(Vec3::new(3.0, 0.0, 0.0), v, Vec3::zeros()),
            3,
        )
        .unwrap();
        for k in 0..=30 {
            let t = k as f64 * 0.1;
            assert!((sp.eval(t, 0) - v * t).norm() < 1e-10);
            assert!(sp.eval(t, 3).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_duration_is_rejected() {
        let r = spline_from_waypoints(
            &[Vec3::x()],
            &[1.0, 0.0],
            &FlatState::at_rest(Vec3::zeros()),
            &FlatState::at_rest(Vec3::zeros()),
            3,
        );
        assert!(r.is_err());
    }

    fn random_problem(m: usize, seed: u64, s: usize) -> (Vec<Vec3>, Vec<f64>, FlatState, FlatState) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut r3 = || Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let wps: Vec<Vec3> = (0..m - 1).map(|_| r3()).collect();
        let head = FlatState {
            p: r3(),
            v: r3(),
            a: r3(),
            j: if s > 3 { r3() } else { Vec3::zeros() },
            yaw: 0.0,
            yaw_rate: 0.0,
        };
        let tail = FlatState {
            p: r3(),
            v: r3(),
            a: r3(),
            j: if s > 3 { r3() } else { Vec3::zeros() },
            yaw: 0.0,
            yaw_rate: 0.0,
        };
        let durs = (0..m).map(|k| 0.3 + 0.2 * ((seed as usize + k) % 5) as f64).collect();
        (wps, durs, head, tail)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn banded_solve_matches_dense(m in 1usize..7, seed in 0u64..1000, s in 3usize..=4) {
            let (wps, durs, head, tail) = random_problem(m, seed, s);
            let mc = Minco::solve(&wps, &durs, &head, &tail, s).unwrap();
            // dense copy of the constraint matrix
            let nc = 2 * s;
            let n = nc * m;
            let rows = row_terms(s, m);
            let mut a = DMatrix::zeros(n, n);
            for (r, terms) in rows.iter().enumerate() {
                for t in terms {
                    let tt = if t.at_end { durs[t.seg] } else { 0.0 };
                    for k in t.d..nc {
                        a[(r, t.seg * nc + k)] += t.sign * basis(k, t.d, tt);
                    }
                }
            }
            let hd = boundary_derivs(&head, s).unwrap();
            let td = boundary_derivs(&tail, s).unwrap();
            for ax in 0..3 {
                let mut b = DVector::zeros(n);
                for d in 0..s {
                    b[d] = hd[d][ax];
                    b[n - s + d] = td[d][ax];
                }
                for (i, q) in wps.iter().enumerate() {
                    b[waypoint_row(s, i)] = q[ax];
                }
                let x = a.clone().lu().solve(&b).unwrap();
                for r in 0..n {
                    prop_assert!((x[r] - mc.spline.coeffs[r][ax]).abs() <= 1e-8 * (1.0 + x[r].abs()));
                }
            }
            // transpose solve against dense
            let mut rhs: Vec<Vec3> = (0..n).map(|k| Vec3::new(k as f64, 1.0, -(k as f64).sin())).collect();
            let orig = rhs.clone();
            mc.lu.solve_transpose(&mut rhs);
            for ax in 0..3 {
                let b = DVector::from_iterator(n, orig.iter().map(|v| v[ax]));
                let x = a.transpose().lu().solve(&b).unwrap();
                for r in 0..n {
                    prop_assert!((x[r] - rhs[r][ax]).abs() <= 1e-7 * (1.0 + x[r].abs()));
                }
            }
        }

        #[test]
        fn interpolation_and_continuity(m in 1usize..7, seed in 0u64..1000, s in 3usize..=4) {
            let (wps, durs, head, tail) = random_problem(m, seed, s);
            let sp = spline_from_waypoints(&wps, &durs, &head, &tail, s).unwrap();
            let hd = boundary_derivs(&head, s).unwrap();
            let td = boundary_derivs(&tail, s).unwrap();
            for d in 0..s {
                prop_assert!((sp.eval_segment(0, 0.0, d) - hd[d]).norm() <= 1e-9);
                prop_assert!((sp.eval_segment(m - 1, durs[m - 1], d) - td[d]).norm() <= 1e-8);
            }
            for i in 0..m - 1 {
                prop_assert!((sp.eval_segment(i, durs[i], 0) - wps[i]).norm() <= 1e-9);
                for d in 0..2 * s - 1 {
                    let l = sp.eval_segment(i, durs[i], d);
                    let r = sp.eval_segment(i + 1, 0.0, d);
                    prop_assert!((l - r).norm() <= 1e-8 * (1.0 + l.norm()));
                }
            }
        }
    }
}
