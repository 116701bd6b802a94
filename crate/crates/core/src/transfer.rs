//! Ulam discretization, invariant densities, spectral gap and the saltus decomposition.

use crate::error::{Error, Result};
use crate::jumpspace::{Anchors, Closure, Grid, GridFunction, JumpFunction, Regular, TransferPlan, DEFAULT_ETA};
use crate::map_core::{OrbitClass, Sign, UnimodalMap};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::sync::Arc;

/// Sparse row-stochastic Ulam matrix, `P[i][j] = Leb(cell_i ∩ f^{-1} cell_j) / Leb(cell_i)`.
#[derive(Clone, Debug)]
pub struct UlamOperator {
    pub grid: Grid,
    rows: Vec<Vec<(u32, f64)>>,
    cols: Vec<Vec<(u32, f64)>>,
}

impl UlamOperator {
    pub fn n(&self) -> usize {
        self.grid.n
    }

    pub fn row(&self, i: usize) -> &[(u32, f64)] {
        &self.rows[i]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().map(|e| e.1).sum()).collect()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Dense copy, for small oracles.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut m = vec![vec![0.0; n]; n];
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, p) in r {
                m[i][j as usize] += p;
            }
        }
        m
    }

    /// Row vector times matrix: `(πP)_j = Σ_i π_i P_ij`.
    pub fn left_apply(&self, pi: &[f64]) -> Vec<f64> {
        self.cols.par_iter().map(|c| c.iter().map(|&(i, p)| pi[i as usize] * p).sum()).collect()
    }
}

/// Assembles the Ulam matrix from exact preimages of the grid nodes.
pub fn ulam_matrix(map: &UnimodalMap, n: usize) -> Result<UlamOperator> {
    if n < 2 {
        return Err(Error::Config(format!("Ulam grid needs at least 2 cells, got {n}")));
    }
    let grid = Grid::for_map(map, n);
    let top = map.critical_value();
    let c = map.c;
    let pre = |sign: Sign| -> Vec<f64> {
        (0..=n)
            .into_par_iter()
            .map(|j| {
                let y = grid.node(j);
                if y >= top {
                    c
                } else {
                    map.inv(y, sign)
                }
            })
            .collect()
    };
    let plus = pre(Sign::Plus);
    let minus = pre(Sign::Minus);
    let rows: Vec<Vec<(u32, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (lo, hi) = (grid.node(i), grid.node(i + 1));
            let width = hi - lo;
            let mut row: Vec<(u32, f64)> = Vec::new();
            let mut push = |j: usize, len: f64| {
                if len > 0.0 {
                    match row.iter_mut().find(|e| e.0 as usize == j) {
                        Some(e) => e.1 += len / width,
                        None => row.push((j as u32, len / width)),
                    }
                }
            };
            if lo < c {
                let (l, r) = (lo, hi.min(c));
                let (j0, j1) = (grid.cell_of(map.f(l)), grid.cell_of(map.f(r)));
                for j in j0..=j1 {
                    let len = r.min(plus[j + 1]) - l.max(plus[j]);
                    push(j, len);
                }
            }
            if hi > c {
                let (l, r) = (lo.max(c), hi);
                let (j0, j1) = (grid.cell_of(map.f(r)), grid.cell_of(map.f(l)));
                for j in j0..=j1 {
                    let len = r.min(minus[j]) - l.max(minus[j + 1]);
                    push(j, len);
                }
            }
            row.sort_by_key(|e| e.0);
            row
        })
        .collect();
    let mut cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for (i, r) in rows.iter().enumerate() {
        for &(j, p) in r {
            cols[j as usize].push((i as u32, p));
        }
    }
    Ok(UlamOperator { grid, rows, cols })
}

/// Fixed vector of the Ulam matrix (cell masses summing to one).
#[derive(Clone, Debug)]
pub struct FixedVector {
    pub masses: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Power iteration from the uniform vector until `‖πP − π‖₁ <= tol`.
pub fn fixed_vector(op: &UlamOperator, tol: f64, max_iter: usize) -> Result<FixedVector> {
    let n = op.n();
    let mut pi = vec![1.0 / n as f64; n];
    for it in 1..=max_iter {
        let mut next = op.left_apply(&pi);
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= s);
        let res: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if res <= tol {
            return Ok(FixedVector { masses: pi, iterations: it, residual: res });
        }
    }
    Err(Error::NoConvergence(max_iter))
}

/// Converts cell masses to a density: cell averages at midpoints, node values by averaging
/// neighbouring cells.
pub fn masses_to_density(grid: Grid, masses: &[f64]) -> GridFunction {
    let h = grid.h();
    let n = grid.n;
    let cell: Vec<f64> = masses.iter().map(|m| m / h).collect();
    let mut values = Vec::with_capacity(n + 1);
    values.push(cell[0]);
    for i in 1..n {
        values.push(0.5 * (cell[i - 1] + cell[i]));
    }
    values.push(cell[n - 1]);
    GridFunction { grid, values }
}

/// Invariant density of the Ulam matrix as a grid function, normalized to unit integral.
pub fn invariant_density(op: &UlamOperator, tol: f64, max_iter: usize) -> Result<GridFunction> {
    let fv = fixed_vector(op, tol, max_iter)?;
    Ok(masses_to_density(op.grid, &fv.masses))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub tau: f64,
    pub iterations: usize,
    /// True when `tau` is within 1e-3 of one: the example is probably not mixing.
    pub flagged: bool,
}

/// Modulus of the second eigenvalue, by power iteration on `P - 1 π^T`.
pub fn spectral_gap_estimate(op: &UlamOperator, pi: &[f64], max_iter: usize) -> Result<GapEstimate> {
    let n = op.n();
    let mut v: Vec<f64> = (0..n).map(|j| ((j as f64) * 0.618_033_988_7 + 0.1).fract() - 0.5).collect();
    let mut logs = Vec::with_capacity(max_iter);
    const WINDOW: usize = 40;
    let mut prev = f64::NAN;
    for it in 1..=max_iter {
        let mut w = op.left_apply(&v);
        let sv: f64 = v.iter().sum();
        w.iter_mut().zip(pi).for_each(|(x, p)| *x -= sv * p);
        let norm: f64 = w.iter().map(|x| x.abs()).sum();
        if norm == 0.0 || !norm.is_finite() {
            return Ok(GapEstimate { tau: 0.0, iterations: it, flagged: false });
        }
        logs.push(norm.ln());
        w.iter_mut().for_each(|x| *x /= norm);
        v = w;
        if it >= 2 * WINDOW && it % WINDOW == 0 {
            let tau = (logs[it - WINDOW..it].iter().sum::<f64>() / WINDOW as f64).exp();
            // Complex subdominant eigenvalues make the window mean wobble, so the test is relative.
            if (tau - prev).abs() < 1e-3 * tau.max(1e-3) {
                return Ok(GapEstimate { tau, iterations: it, flagged: tau > 0.999 });
            }
            prev = tau;
        }
    }
    if prev.is_finite() {
        // Unsettled estimate: usable as a rate, but flagged.
        return Ok(GapEstimate { tau: prev, iterations: max_iter, flagged: true });
    }
    Err(Error::NoConvergence(max_iter))
}

/// `ρ₀ = ρ_reg + Σ s_k H_{c_k}` with derivative-jump bookkeeping.
#[derive(Clone, Debug)]
pub struct DensityDecomposition {
    /// Full density at the grid nodes.
    pub rho0: GridFunction,
    pub s: Vec<f64>,
    pub rho_reg: GridFunction,
    pub s_prime: Vec<f64>,
    pub e: Vec<f64>,
    pub e_prime: Vec<f64>,
    /// Jumps of the one-sided derivatives of `ρ_reg`, measured on the grid.
    pub s_prime_measured: Vec<Option<f64>>,
    pub orbit_class: OrbitClass,
    pub anchors: Arc<Anchors>,
    pub s1_fit: f64,
    pub s1_closure: f64,
    /// Jump-space fixed-point iterations performed (0 for the raw estimate).
    pub refine_iterations: usize,
    pub eta: f64,
}

impl DensityDecomposition {
    /// The density as an element of the jump space.
    pub fn density(&self) -> JumpFunction {
        JumpFunction::new(Regular::Grid(self.rho_reg.clone()), self.s.clone(), self.anchors.clone(), self.eta)
            .expect("decomposition lengths agree")
    }

    pub fn grid(&self) -> Grid {
        self.rho_reg.grid
    }

    /// CSV with columns `x,rho0,rho_reg`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,rho0,rho_reg\n");
        for (i, (r, g)) in self.rho0.values.iter().zip(&self.rho_reg.values).enumerate() {
            let _ = writeln!(out, "{:.16e},{:.16e},{:.16e}", self.rho0.grid.node(i), r, g);
        }
        out
    }

    pub fn jump_table(&self) -> Vec<JumpRow> {
        (0..self.s.len())
            .map(|i| JumpRow { k: i + 1, c_k: self.anchors.points[i], s_k: self.s[i], s_prime_k: self.s_prime[i] })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpRow {
    pub k: usize,
    pub c_k: f64,
    pub s_k: f64,
    pub s_prime_k: f64,
}

/// Jump heights for `s_1 = 1` obeying the transport recursion and the orbit closure.
pub fn unit_saltus(anchors: &Anchors) -> Vec<f64> {
    let k = anchors.len();
    let mut s = vec![0.0; k];
    if k == 0 {
        return s;
    }
    s[0] = 1.0;
    for i in 1..k {
        s[i] = s[i - 1] / anchors.slopes[i - 1];
    }
    if let Closure::Preperiodic { n0 } = anchors.closure {
        if n0 >= 2 {
            // s_{n0}(1 - 1/(f^{n1})'(c_{n0})) = s_{n0-1}/f'(c_{n0-1}); later entries scale with it.
            let cycle: f64 = anchors.slopes[n0 - 1..k].iter().product();
            s[n0 - 1] = s[n0 - 2] / anchors.slopes[n0 - 2] / (1.0 - 1.0 / cycle);
            for i in n0..k {
                s[i] = s[i - 1] / anchors.slopes[i - 1];
            }
        }
    }
    s
}

/// Largest violation of the jump fixed-point equations, ignoring the first entry.
pub fn saltus_recursion_residual(anchors: &Anchors, s: &[f64]) -> f64 {
    let k = anchors.len();
    let mut worst: f64 = 0.0;
    for i in 1..k {
        let mut rhs = s[i - 1] / anchors.slopes[i - 1];
        if let Closure::Preperiodic { n0 } = anchors.closure {
            if i == n0 - 1 {
                rhs += s[k - 1] / anchors.slopes[k - 1];
            }
        }
        worst = worst.max((s[i] - rhs).abs());
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

/// Least-squares line through the cell averages on one side of `x0`. The fit stops at
/// `blocking` anchors and steps over cells touching `minor` ones, whose jumps are negligible.
fn one_sided_cell_fit(
    rho: &GridFunction,
    cells: &[f64],
    x0: f64,
    side: Side,
    blocking: &[f64],
    minor: &[f64],
    width: usize,
) -> Option<f64> {
    let g = rho.grid;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let i0 = g.cell_of(x0);
    // Node averaging smears a jump over two cells, so stay one cell clear of anchors.
    let h = g.h();
    let near = |pts: &[f64], l: f64, r: f64| pts.iter().any(|&p| p >= l - h && p <= r + h && p != x0);
    let mut step = |i: usize, xs: &mut Vec<f64>| -> bool {
        let (l, r) = (g.node(i), g.node(i + 1));
        if near(blocking, l, r) {
            return false;
        }
        if !near(minor, l, r) {
            xs.push(0.5 * (l + r) - x0);
            ys.push(cells[i]);
        }
        true
    };
    match side {
        Side::Left => {
            let mut i = i0 as isize - 2;
            while i >= 0 && xs.len() < width {
                if !step(i as usize, &mut xs) {
                    break;
                }
                i -= 1;
            }
        }
        Side::Right => {
            let mut i = i0 + 2;
            if x0 >= g.b {
                return None;
            }
            while i < g.n && xs.len() < width {
                if !step(i, &mut xs) {
                    break;
                }
                i += 1;
            }
        }
    }
    linear_fit_at_zero(&xs, &ys)
}

fn linear_fit_at_zero(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n == 0 {
        return None;
    }
    if n == 1 {
        return Some(ys[0]);
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    Some(my - slope * mx)
}

/// One-sided derivative of a grid function at `x0` from a quadratic fit of nodes on one side,
/// stopping before the next anchor.
pub fn one_sided_derivative(g: &GridFunction, x0: f64, right: bool, anchors: &[f64], width: usize) -> Option<f64> {
    let grid = g.grid;
    let h = grid.h();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let sgn = if right { 1.0 } else { -1.0 };
    let start = if right { (((x0 - grid.a) / h).ceil()) as isize } else { (((x0 - grid.a) / h).floor()) as isize };
    let mut i = start;
    while i >= 0 && (i as usize) <= grid.n && xs.len() < width {
        let x = grid.node(i as usize);
        let d = x - x0;
        if anchors.iter().any(|&p| p != x0 && (p - x0) * sgn > 0.0 && (x - p) * sgn >= 0.0) {
            break;
        }
        xs.push(d);
        ys.push(g.values[i as usize]);
        i += if right { 1 } else { -1 };
    }
    if xs.len() < 3 {
        return None;
    }
    // Normal equations for y = p0 + p1 d + p2 d^2.
    let mut m = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    for (&d, &y) in xs.iter().zip(&ys) {
        let pw = [1.0, d / h, (d / h) * (d / h)];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] += pw[r] * pw[c];
            }
            rhs[r] += pw[r] * y;
        }
    }
    let sol = solve3(m, rhs)?;
    Some(sol[1] / h)
}

fn solve3(mut m: [[f64; 3]; 3], mut r: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..3 {
            let f = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= f * m[col][k];
            }
            r[row] -= f * r[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = r[row];
        for k in row + 1..3 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

/// Cell average of `H_p` over `[l, r]`.
#[inline]
fn cell_avg_h(p: f64, l: f64, r: f64) -> f64 {
    -((p - l) / (r - l)).clamp(0.0, 1.0)
}

/// Splits an estimated density into regular and saltus parts.
pub fn decompose_density(
    map: &UnimodalMap,
    rho_hat: &GridFunction,
    class: &OrbitClass,
) -> Result<DensityDecomposition> {
    let (anchors, _, orbit) = Anchors::from_map(map, None)?;
    let anchors = Arc::new(Anchors::from_orbit(map, &orbit, class, anchors.len()));
    decompose_with_anchors(map, rho_hat, *class, anchors, DEFAULT_ETA)
}

/// Same as [`decompose_density`] with explicit anchors.
pub fn decompose_with_anchors(
    map: &UnimodalMap,
    rho_hat: &GridFunction,
    class: OrbitClass,
    anchors: Arc<Anchors>,
    eta: f64,
) -> Result<DensityDecomposition> {
    let grid = rho_hat.grid;
    let n = grid.n;
    // Cell averages of the interpolant are enough for the one-sided fits.
    let cells: Vec<f64> = (0..n).map(|i| 0.5 * (rho_hat.values[i] + rho_hat.values[i + 1])).collect();
    let pts = &anchors.points;
    let c1 = pts[0];
    let width = 8;
    // Jumps below this fraction of s_1 do not stop the one-sided fits.
    const MINOR_JUMP: f64 = 0.02;
    let unit = unit_saltus(&anchors);
    let (mut blocking, mut minor) = (Vec::new(), Vec::new());
    for (&p, u) in pts.iter().zip(&unit) {
        if u.abs() >= MINOR_JUMP {
            blocking.push(p)
        } else {
            minor.push(p)
        }
    }
    let fit = |x0: f64, side: Side| one_sided_cell_fit(rho_hat, &cells, x0, side, &blocking, &minor, width);
    let left_c1 = fit(c1, Side::Left).ok_or(Error::MissingDecomposition)?;
    let right_c1 = fit(c1, Side::Right).unwrap_or(0.0);
    let s1_fit = right_c1 - left_c1;
    let (sl, sr) = anchors.turning_slopes;
    let rl = fit(map.c, Side::Left).ok_or(Error::MissingDecomposition)?;
    let rr = fit(map.c, Side::Right).ok_or(Error::MissingDecomposition)?;
    let s1_closure = -(rl / sl + rr / sr);
    if (s1_fit - s1_closure).abs() > 0.1 * s1_closure.abs().max(s1_fit.abs()) {
        return Err(Error::S1Disagreement { fit: s1_fit, closure: s1_closure });
    }
    if s1_closure >= 0.0 {
        return Err(Error::PositiveFirstJump(s1_closure));
    }
    let s: Vec<f64> = unit_saltus(&anchors).into_iter().map(|u| u * s1_closure).collect();
    // Regular part: subtract exact cell averages of the saltus, then average to nodes.
    let reg_cells: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (l, r) = (grid.node(i), grid.node(i + 1));
            cells[i] - s.iter().zip(pts).map(|(sk, &p)| sk * cell_avg_h(p, l, r)).sum::<f64>()
        })
        .collect();
    let mut values = Vec::with_capacity(n + 1);
    values.push(reg_cells[0]);
    for i in 1..n {
        values.push(0.5 * (reg_cells[i - 1] + reg_cells[i]));
    }
    values.push(reg_cells[n - 1]);
    let rho_reg = GridFunction { grid, values };
    let phi = JumpFunction::new(Regular::Grid(rho_reg), s, anchors.clone(), eta)?;
    let mut dec = assemble(map, &phi, class, 0)?;
    dec.rho0 = rho_hat.clone();
    dec.s1_fit = s1_fit;
    dec.s1_closure = s1_closure;
    Ok(dec)
}

/// Builds the decomposition record, including derivative jumps, from a jump-space density.
pub fn assemble(
    map: &UnimodalMap,
    phi: &JumpFunction,
    class: OrbitClass,
    refine_iterations: usize,
) -> Result<DensityDecomposition> {
    let anchors = phi.anchors().clone();
    let rho_reg = phi.regular().sample(phi.grid().unwrap_or(Grid::for_map(map, 4096)));
    let grid = rho_reg.grid;
    let rho0 = GridFunction::from_fn(grid, |x| phi.materialize(x));
    let s = phi.jumps().to_vec();
    let k = s.len();
    let pts = &anchors.points;
    let c = map.c;
    let (d1l, d1r) = map.turning_slopes();
    let (d2l, d2r) = map.turning_derivs(2);
    let (al, ar) = (d2l / d1l.powi(3), d2r / d1r.powi(3));
    let (rl, rr) = (phi.left_limit(c), phi.right_limit(c));
    let dl = one_sided_derivative(&rho_reg, c, false, pts, 8).unwrap_or(0.0);
    let dr = one_sided_derivative(&rho_reg, c, true, pts, 8).unwrap_or(0.0);

    let mut e = vec![0.0; k];
    let mut e_prime = vec![0.0; k];
    let mut s_prime = vec![0.0; k];
    if k > 0 {
        e[0] = -rl * al + rr * ar;
        e_prime[0] = -dl / (d1l * d1l) + dr / (d1r * d1r);
        for i in 1..k {
            let p = pts[i - 1];
            if p != c {
                e[i] = s[i - 1] * map.df(p, 2) / anchors.slopes[i - 1].powi(3);
            }
        }
        if let Closure::Preperiodic { n0 } = anchors.closure {
            e[n0 - 1] += s[k - 1] * map.df(pts[k - 1], 2) / anchors.slopes[k - 1].powi(3);
        }
        // s'_k = s'_{k-1}/f'(c_{k-1})^2 - E_k, written as s'_k = p_k s'_{n0} + q_k on the cycle.
        s_prime[0] = e_prime[0] - e[0];
        let n0 = match anchors.closure {
            Closure::Preperiodic { n0 } => n0,
            _ => k + 1,
        };
        for i in 1..k.min(n0 - 1) {
            s_prime[i] = s_prime[i - 1] / anchors.slopes[i - 1].powi(2) - e[i];
        }
        if n0 <= k {
            let head = if n0 >= 2 { s_prime[n0 - 2] / anchors.slopes[n0 - 2].powi(2) } else { 0.0 };
            let (mut p, mut q) = (1.0, 0.0);
            for i in n0..k {
                let d2 = anchors.slopes[i - 1].powi(2);
                p /= d2;
                q = q / d2 - e[i];
            }
            // s'_{n0} = head - E_{n0} + (p s'_{n0} + q)/f'(c_K)^2.
            let dk = anchors.slopes[k - 1].powi(2);
            let sn0 = (head - e[n0 - 1] + q / dk) / (1.0 - p / dk);
            s_prime[n0 - 1] = sn0;
            for i in n0..k {
                s_prime[i] = s_prime[i - 1] / anchors.slopes[i - 1].powi(2) - e[i];
            }
        }
        for i in 0..k {
            e_prime[i] = if i == 0 { e_prime[0] } else { s_prime[i] + e[i] };
        }
    }
    let s_prime_measured = pts
        .iter()
        .map(|&p| {
            let r = one_sided_derivative(&rho_reg, p, true, pts, 8)?;
            let l = one_sided_derivative(&rho_reg, p, false, pts, 8)?;
            Some(r - l)
        })
        .collect();
    let s1 = s.first().copied().unwrap_or(0.0);
    Ok(DensityDecomposition {
        rho0,
        s,
        rho_reg,
        s_prime,
        e,
        e_prime,
        s_prime_measured,
        orbit_class: class,
        anchors,
        s1_fit: s1,
        s1_closure: s1,
        refine_iterations,
        eta: phi.eta(),
    })
}

/// Options for the density pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityOptions {
    #[serde(rename = "N")]
    pub n: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Jump-space fixed-point iterations after the Ulam estimate.
    pub refine: bool,
    pub refine_tol: f64,
    pub k_max: Option<usize>,
    pub eta: f64,
}

impl Default for DensityOptions {
    fn default() -> Self {
        DensityOptions {
            n: 4096,
            tol: 1e-13,
            max_iter: 20_000,
            refine: true,
            refine_tol: 1e-13,
            k_max: None,
            eta: DEFAULT_ETA,
        }
    }
}

const STAGNATION_FLOOR: f64 = 1e-9;
const STAGNATION_WINDOW: usize = 20;

/// Iterates `φ ↦ L₁φ / ∫L₁φ` in the jump space until successive iterates agree.
pub fn refine_density(
    map: &UnimodalMap,
    start: &JumpFunction,
    tol: f64,
    max_iter: usize,
) -> Result<(JumpFunction, usize)> {
    let grid = start.grid().ok_or(Error::Config("refinement needs a grid regular part".into()))?;
    let plan = TransferPlan::new(map, grid, start.anchors().clone());
    let mut phi = start.clone();
    let (mut best, mut best_it) = (f64::INFINITY, 0);
    for it in 1..=max_iter {
        let next = plan.apply_l1(&phi)?;
        let next = next.scale(1.0 / next.integral());
        let diff = next.lin_comb(1.0, &phi, -1.0)?.b0_norm();
        phi = next;
        if diff <= tol {
            return Ok((phi, it));
        }
        if diff < best {
            (best, best_it) = (diff, it);
        }
        // Round-off floor reached below the requested tolerance.
        if best < STAGNATION_FLOOR && it - best_it >= STAGNATION_WINDOW {
            return Ok((phi, it));
        }
    }
    Err(Error::NoConvergence(max_iter))
}

/// Full pipeline: Ulam density, decomposition and (optionally) jump-space refinement.
pub fn invariant_decomposition(map: &UnimodalMap, opts: &DensityOptions) -> Result<DensityDecomposition> {
    let (anchors, class, _) = Anchors::from_map(map, opts.k_max)?;
    let anchors = Arc::new(anchors);
    let op = ulam_matrix(map, opts.n)?;
    let rho_hat = invariant_density(&op, opts.tol, opts.max_iter)?;
    let raw = decompose_with_anchors(map, &rho_hat, class, anchors, opts.eta)?;
    if !opts.refine {
        return Ok(raw);
    }
    let (phi, iters) = refine_density(map, &raw.density(), opts.refine_tol, opts.max_iter)?;
    let mut dec = assemble(map, &phi, class, iters)?;
    dec.s1_fit = raw.s1_fit;
    dec.s1_closure = raw.s1_closure;
    Ok(dec)
}

/// Options for [`neumann_solve`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeumannOptions {
    pub tol: f64,
    pub mean_tol: f64,
    pub max_terms: usize,
}

impl Default for NeumannOptions {
    fn default() -> Self {
        NeumannOptions { tol: 1e-10, mean_tol: 1e-8, max_terms: 20_000 }
    }
}

#[derive(Clone, Debug)]
pub struct NeumannSolution {
    pub sum: JumpFunction,
    pub terms: usize,
    pub tail_bound: f64,
    /// `‖L₁^j η‖_{B₀}` for each term.
    pub term_norms: Vec<f64>,
}

/// `Σ_j L₁^j η` for mean-zero `η`. When `rho0` is given, each term is projected onto the
/// mean-zero complement, which removes the drift caused by round-off in the mean.
pub fn neumann_solve(
    plan: &TransferPlan,
    eta: &JumpFunction,
    tau_hat: f64,
    rho0: Option<&JumpFunction>,
    opts: &NeumannOptions,
) -> Result<NeumannSolution> {
    if tau_hat >= 0.999 {
        return Err(Error::NoGap(tau_hat));
    }
    let mean = eta.integral();
    if mean.abs() > opts.mean_tol {
        return Err(Error::NotMeanZero(mean));
    }
    let project = |f: JumpFunction| -> Result<JumpFunction> {
        match rho0 {
            Some(r) => {
                let m = f.integral();
                f.lin_comb(1.0, r, -m)
            }
            None => Ok(f),
        }
    };
    let grid = plan.grid;
    let mut term = project(eta.on_grid(grid))?;
    let mut sum = term.clone();
    let mut norms = vec![term.b0_norm()];
    let stop = opts.tol * (1.0 - tau_hat);
    for j in 1..=opts.max_terms {
        if norms[j - 1] <= stop {
            let tail = norms[j - 1] / (1.0 - tau_hat);
            return Ok(NeumannSolution { sum, terms: j, tail_bound: tail, term_norms: norms });
        }
        term = project(plan.apply_l1(&term)?)?;
        sum = sum.lin_comb(1.0, &term, 1.0)?;
        norms.push(term.b0_norm());
    }
    Err(Error::NoConvergence(opts.max_terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_core::{classify_orbit, critical_orbit};

    #[test]
    fn ulam_tent2_small() {
        let map = UnimodalMap::tent(2.0).unwrap();
        let op = ulam_matrix(&map, 2).unwrap();
        let d = op.to_dense();
        for row in &d {
            for &p in row {
                assert!((p - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ulam_rows_are_stochastic() {
        let map = UnimodalMap::tent(UnimodalMap::golden_mean()).unwrap();
        let op = ulam_matrix(&map, 512).unwrap();
        for s in op.row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        let smooth = UnimodalMap::smooth_tent(1.9, 0.1).unwrap();
        let op = ulam_matrix(&smooth, 256).unwrap();
        for s in op.row_sums() {
            assert!((s - 1.0).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn tent2_density_is_flat() {
        let map = UnimodalMap::tent(2.0).unwrap();
        let op = ulam_matrix(&map, 1024).unwrap();
        let rho = invariant_density(&op, 1e-13, 1000).unwrap();
        assert!(rho.values.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let fv = fixed_vector(&op, 1e-13, 1000).unwrap();
        let gap = spectral_gap_estimate(&op, &fv.masses, 5000).unwrap();
        assert!(gap.tau <= 0.55, "{gap:?}");
    }

    #[test]
    fn tent2_decomposition() {
        let map = UnimodalMap::tent(2.0).unwrap();
        let op = ulam_matrix(&map, 1024).unwrap();
        let rho = invariant_density(&op, 1e-13, 1000).unwrap();
        let orbit = critical_orbit(&map, 40).unwrap();
        let class = classify_orbit(&orbit, 1e-9);
        let dec = decompose_density(&map, &rho, &class).unwrap();
        assert!((dec.s[0] + 1.0).abs() < 1e-9);
        assert!((dec.s[1] - 1.0).abs() < 1e-9);
        assert!(dec.rho_reg.sup_norm() < 1e-9);
        assert!(dec.s_prime.iter().all(|v| v.abs() < 1e-9));
        assert!(dec.e.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_saltus_recursion() {
        let map = UnimodalMap::tent(2.0).unwrap();
        let (a, _, _) = Anchors::from_map(&map, None).unwrap();
        assert_eq!(unit_saltus(&a), vec![1.0, -1.0]);
        for m in [
            UnimodalMap::tent(1.9).unwrap(),
            UnimodalMap::tent(UnimodalMap::golden_mean()).unwrap(),
            UnimodalMap::tent(2f64.sqrt()).unwrap(),
        ] {
            let (a, _, _) = Anchors::from_map(&m, None).unwrap();
            let s = unit_saltus(&a);
            assert!(saltus_recursion_residual(&a, &s) < 1e-12);
        }
    }

    #[test]
    fn refined_tent19_is_pure_saltus() {
        let map = UnimodalMap::tent(1.9).unwrap();
        let dec = invariant_decomposition(&map, &DensityOptions { n: 2048, ..Default::default() }).unwrap();
        assert!(dec.rho_reg.sup_norm() < 1e-10, "{}", dec.rho_reg.sup_norm());
        assert!(dec.s.iter().sum::<f64>().abs() < 1e-10);
        assert!((dec.density().integral() - 1.0).abs() < 1e-13);
        assert!(dec.s[0] < 0.0);
    }

    #[test]
    fn neumann_zero_and_residual() {
        let map = UnimodalMap::tent(2.0).unwrap();
        let dec = invariant_decomposition(&map, &DensityOptions { n: 512, ..Default::default() }).unwrap();
        let grid = dec.grid();
        let plan = TransferPlan::new(&map, grid, dec.anchors.clone());
        let zero = JumpFunction::zero(grid, dec.anchors.clone(), DEFAULT_ETA);
        let sol = neumann_solve(&plan, &zero, 0.5, None, &NeumannOptions::default()).unwrap();
        assert_eq!(sol.sum.b0_norm(), 0.0);
        // η = φ - ρ₀ ∫φ with φ(x) = x(1-x) + x.
        let rho = dec.density();
        let phi = JumpFunction::from_total(grid, dec.anchors.clone(), DEFAULT_ETA, vec![0.0; 2], |x| {
            if x <= 1.0 {
                x * (1.0 - x) + x
            } else {
                0.0
            }
        })
        .unwrap();
        let eta = phi.lin_comb(1.0, &rho, -phi.integral()).unwrap();
        let opts = NeumannOptions { tol: 1e-12, ..Default::default() };
        let sol = neumann_solve(&plan, &eta, 0.5, Some(&rho), &opts).unwrap();
        let back = sol.sum.lin_comb(1.0, &plan.apply_l1(&sol.sum).unwrap(), -1.0).unwrap();
        let res = back.lin_comb(1.0, &eta, -1.0).unwrap();
        assert!(res.b0_norm() <= 2e-12 + 1e-9, "{}", res.b0_norm());
        assert!(matches!(neumann_solve(&plan, &phi, 0.5, None, &opts), Err(Error::NotMeanZero(_))));
        assert!(matches!(neumann_solve(&plan, &eta, 0.9995, None, &opts), Err(Error::NoGap(_))));
    }
}
