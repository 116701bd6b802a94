//! Functions with a continuous regular part plus weighted jumps on the postcritical orbit.
//!
//! An element is a pair `(φ_reg, (u_k))` representing
//! `Γ(φ) = φ_reg + Σ_k u_k H_{c_k}`, where `H_u = -1` left of `u`, `0` right of `u`
//! and `-1/2` at `u`. The transfer operators act on the pair so that jumps are tracked
//! exactly while the regular part lives on a uniform grid.

use crate::error::{Error, Result};
use crate::func::gauss5;
use crate::map_core::{
    classify_orbit, critical_orbit, expansion_constants, CriticalOrbit, OrbitClass, OrbitKind, Sign, UnimodalMap,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Default weight of the jump norm.
pub const DEFAULT_ETA: f64 = 0.05;

/// Uniform partition of `[a, b]` into `n` cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub a: f64,
    pub b: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

impl Grid {
    pub fn new(a: f64, b: f64, n: usize) -> Self {
        Grid { a, b, n }
    }

    pub fn for_map(map: &UnimodalMap, n: usize) -> Self {
        Grid { a: map.a, b: map.b, n }
    }

    #[inline]
    pub fn h(&self) -> f64 {
        (self.b - self.a) / self.n as f64
    }

    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        if i == self.n {
            self.b
        } else {
            self.a + i as f64 * self.h()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.node(i)).collect()
    }

    /// Index of the cell containing `x`, clamped to the grid.
    #[inline]
    pub fn cell_of(&self, x: f64) -> usize {
        let t = ((x - self.a) / self.h()).floor();
        if t < 0.0 {
            0
        } else {
            (t as usize).min(self.n - 1)
        }
    }
}

/// Piecewise-linear function given by its node values.
///
/// Left of `a` it takes the value at `a`; right of `b` it vanishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: Grid) -> Self {
        GridFunction { grid, values: vec![0.0; grid.n + 1] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64 + Sync) -> Self {
        let values = (0..=grid.n).into_par_iter().map(|i| f(grid.node(i))).collect();
        GridFunction { grid, values }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x <= g.a {
            return self.values[0];
        }
        if x > g.b {
            return 0.0;
        }
        let t = (x - g.a) / g.h();
        let i = (t.floor() as usize).min(g.n - 1);
        let w = t - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }

    /// Total variation on the real line, including the drop to zero right of `b`.
    pub fn variation(&self) -> f64 {
        self.values.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() + self.values[self.grid.n].abs()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Exact `L¹` norm of the interpolant on `[a, b]`.
    pub fn l1_norm(&self) -> f64 {
        let h = self.grid.h();
        self.values
            .windows(2)
            .map(|w| {
                let (p, q) = (w[0], w[1]);
                if p * q >= 0.0 {
                    0.5 * h * (p.abs() + q.abs())
                } else {
                    0.5 * h * (p * p + q * q) / (p.abs() + q.abs())
                }
            })
            .sum()
    }

    pub fn integral(&self) -> f64 {
        let h = self.grid.h();
        self.values.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum()
    }

    /// Forward-difference slopes, one per cell.
    pub fn cell_slopes(&self) -> Vec<f64> {
        let h = self.grid.h();
        self.values.windows(2).map(|w| (w[1] - w[0]) / h).collect()
    }
}

/// How an element's jumps close up under the dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Closure {
    /// Infinite orbit truncated at `K`: the last jump is dropped when transported.
    Open,
    /// `c_K = c`.
    Periodic,
    /// `f(c_K) = c_{n0}`.
    Preperiodic { n0: usize },
}

/// Postcritical anchor points `c_1..c_K` with the data needed to transport jumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `points[k-1] = c_k`.
    pub points: Vec<f64>,
    /// `slopes[k-1] = f'(c_k)`; `NaN` where `c_k = c`.
    pub slopes: Vec<f64>,
    pub closure: Closure,
    /// `(|f'(c-)|, |f'(c+)|)`.
    pub turning_slopes: (f64, f64),
}

impl Anchors {
    /// Anchors on the critical orbit of `map`, truncated at `k_max` for infinite orbits.
    pub fn from_map(map: &UnimodalMap, k_max: Option<usize>) -> Result<(Self, OrbitClass, CriticalOrbit)> {
        let k_open = match k_max {
            Some(k) => k,
            None => default_k_max(map)?,
        };
        let orbit = critical_orbit(map, k_open.max(64) + 8)?;
        let class = classify_orbit(&orbit, 1e-9);
        let anchors = Self::from_orbit(map, &orbit, &class, k_open);
        Ok((anchors, class, orbit))
    }

    pub fn from_orbit(map: &UnimodalMap, orbit: &CriticalOrbit, class: &OrbitClass, k_open: usize) -> Self {
        let (k, closure) = match class.kind {
            OrbitKind::Periodic { n1 } => (n1, Closure::Periodic),
            OrbitKind::Preperiodic { n0, n1 } => (n0 + n1 - 1, Closure::Preperiodic { n0 }),
            OrbitKind::NoPeriodDetected { .. } => (k_open.min(orbit.horizon), Closure::Open),
        };
        let mut points: Vec<f64> = orbit.points[1..=k].to_vec();
        if closure == Closure::Periodic {
            points[k - 1] = map.c;
        }
        let slopes = points.iter().map(|&p| if p == map.c { f64::NAN } else { map.df(p, 1) }).collect();
        let (l, r) = map.turning_slopes();
        Anchors { a: map.a, b: map.b, c: map.c, points, slopes, closure, turning_slopes: (l.abs(), r.abs()) }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn same_as(&self, other: &Anchors) -> bool {
        self.closure == other.closure
            && self.points.len() == other.points.len()
            && self.points.iter().zip(&other.points).all(|(p, q)| (p - q).abs() <= 1e-12 * (self.b - self.a))
    }

    /// Cumulative derivatives `(f^{k-1})'(c_1)` for `k = 1..=K` (while defined).
    pub fn cum_derivs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        let mut d = 1.0;
        for k in 0..self.len() {
            out.push(d);
            d *= self.slopes[k];
        }
        out
    }
}

/// Smallest `K` with `lambda_hat^K < 1e-12`.
pub fn default_k_max(map: &UnimodalMap) -> Result<usize> {
    let e = expansion_constants(map)?;
    Ok(((1e-12f64).ln() / e.lambda_hat.ln()).ceil() as usize + 1)
}

/// Regular part: grid values or an exact pointwise rule.
#[derive(Clone)]
pub enum Regular {
    Grid(GridFunction),
    Pointwise(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Regular {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regular::Grid(g) => write!(f, "Grid(N={})", g.grid.n),
            Regular::Pointwise(_) => write!(f, "Pointwise"),
        }
    }
}

impl Regular {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Regular::Grid(g) => g.eval(x),
            Regular::Pointwise(f) => f(x),
        }
    }

    pub fn grid(&self) -> Option<&Grid> {
        match self {
            Regular::Grid(g) => Some(&g.grid),
            Regular::Pointwise(_) => None,
        }
    }

    /// Node values on `grid`.
    pub fn sample(&self, grid: Grid) -> GridFunction {
        match self {
            Regular::Grid(g) if g.grid == grid => g.clone(),
            _ => GridFunction::from_fn(grid, |x| self.eval(x)),
        }
    }
}

/// Sorted anchors with suffix sums for fast evaluation of `Σ u_k H_{c_k}(x)`.
#[derive(Clone, Debug)]
struct SaltusTable {
    pos: Vec<f64>,
    /// `suffix[i] = Σ_{j >= i} u_(j)` in sorted order.
    suffix: Vec<f64>,
}

impl SaltusTable {
    fn new(points: &[f64], jumps: &[f64]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.sort_by(|&i, &j| points[i].total_cmp(&points[j]));
        let pos: Vec<f64> = idx.iter().map(|&i| points[i]).collect();
        let mut suffix = vec![0.0; pos.len() + 1];
        for r in (0..pos.len()).rev() {
            suffix[r] = suffix[r + 1] + jumps[idx[r]];
        }
        SaltusTable { pos, suffix }
    }

    /// `Σ u_k H_{c_k}(x)` with the midpoint convention at anchors.
    #[inline]
    fn eval(&self, x: f64) -> f64 {
        let gt = self.pos.partition_point(|&p| p <= x);
        let ge = self.pos.partition_point(|&p| p < x);
        -(self.suffix[gt] + 0.5 * (self.suffix[ge] - self.suffix[gt]))
    }

    /// Limit from the left of `x`.
    #[inline]
    fn left(&self, x: f64) -> f64 {
        -self.suffix[self.pos.partition_point(|&p| p < x)]
    }

    /// Limit from the right of `x`.
    #[inline]
    fn right(&self, x: f64) -> f64 {
        -self.suffix[self.pos.partition_point(|&p| p <= x)]
    }
}

/// Element of the jump-augmented space.
#[derive(Clone, Debug)]
pub struct JumpFunction {
    regular: Regular,
    jumps: Vec<f64>,
    anchors: Arc<Anchors>,
    eta: f64,
    table: SaltusTable,
}

impl JumpFunction {
    pub fn new(regular: Regular, jumps: Vec<f64>, anchors: Arc<Anchors>, eta: f64) -> Result<Self> {
        if jumps.len() != anchors.len() {
            return Err(Error::LengthMismatch(jumps.len(), anchors.len()));
        }
        let table = SaltusTable::new(&anchors.points, &jumps);
        Ok(JumpFunction { regular, jumps, anchors, eta, table })
    }

    pub fn zero(grid: Grid, anchors: Arc<Anchors>, eta: f64) -> Self {
        let k = anchors.len();
        Self::new(Regular::Grid(GridFunction::zeros(grid)), vec![0.0; k], anchors, eta).expect("lengths agree")
    }

    /// Builds an element from a total function and its jump heights; the regular part is
    /// `total - Σ u_k H_{c_k}` sampled on `grid`.
    pub fn from_total(
        grid: Grid,
        anchors: Arc<Anchors>,
        eta: f64,
        jumps: Vec<f64>,
        total: impl Fn(f64) -> f64 + Sync,
    ) -> Result<Self> {
        let table = SaltusTable::new(&anchors.points, &jumps);
        let reg = GridFunction::from_fn(grid, |x| total(x) - table.eval(x));
        Self::new(Regular::Grid(reg), jumps, anchors, eta)
    }

    /// Same as [`from_total`](Self::from_total) with an exact pointwise regular part.
    pub fn from_total_pointwise(
        anchors: Arc<Anchors>,
        eta: f64,
        jumps: Vec<f64>,
        total: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let table = SaltusTable::new(&anchors.points, &jumps);
        let reg = move |x: f64| total(x) - table.eval(x);
        Self::new(Regular::Pointwise(Arc::new(reg)), jumps, anchors, eta)
    }

    pub fn regular(&self) -> &Regular {
        &self.regular
    }

    pub fn regular_grid(&self) -> Option<&GridFunction> {
        match &self.regular {
            Regular::Grid(g) => Some(g),
            Regular::Pointwise(_) => None,
        }
    }

    pub fn jumps(&self) -> &[f64] {
        &self.jumps
    }

    pub fn anchors(&self) -> &Arc<Anchors> {
        &self.anchors
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn grid(&self) -> Option<Grid> {
        self.regular.grid().copied()
    }

    /// Pointwise value of `Γ(φ)`.
    #[inline]
    pub fn materialize(&self, x: f64) -> f64 {
        self.regular.eval(x) + self.table.eval(x)
    }

    /// `Σ u_k H_{c_k}(x)`.
    #[inline]
    pub fn saltus(&self, x: f64) -> f64 {
        self.table.eval(x)
    }

    #[inline]
    pub fn left_limit(&self, x: f64) -> f64 {
        self.regular.eval(x) + self.table.left(x)
    }

    #[inline]
    pub fn right_limit(&self, x: f64) -> f64 {
        self.regular.eval(x) + self.table.right(x)
    }

    /// `sup_k (1 + η)^k |u_k|`.
    pub fn jump_norm(&self) -> f64 {
        let mut w = 1.0;
        let mut m: f64 = 0.0;
        for u in &self.jumps {
            w *= 1.0 + self.eta;
            m = m.max(w * u.abs());
        }
        m
    }

    fn norm_grid(&self) -> Grid {
        self.grid().unwrap_or(Grid::new(self.anchors.a, self.anchors.b, 4096))
    }

    /// Variation of the regular part plus the weighted jump norm.
    pub fn b0_norm(&self) -> f64 {
        self.regular.sample(self.norm_grid()).variation() + self.jump_norm()
    }

    /// Weak norm with preimages of `c` up to depth `j`; `None` gives the sup-norm version.
    pub fn weak_norm(&self, j: Option<usize>, map: &UnimodalMap) -> f64 {
        let reg = self.regular.sample(self.norm_grid());
        match j {
            None => reg.sup_norm() + self.jump_norm(),
            Some(depth) => {
                let pre = preimages_of_turning_point(map, depth);
                let m = pre.iter().map(|&y| self.regular.eval(y).abs()).fold(0.0, f64::max);
                0.5 * reg.l1_norm() + 0.5 * m + self.jump_norm()
            }
        }
    }

    /// `∫_a^b Γ(φ) test dx`, splitting cells at anchors.
    pub fn pair(&self, test: &(dyn Fn(f64) -> f64 + Sync)) -> f64 {
        let grid = self.norm_grid();
        let reg = &self.regular;
        let pos = &self.table.pos;
        let regular: f64 = (0..grid.n)
            .into_par_iter()
            .map(|i| {
                let lo = grid.node(i);
                let hi = grid.node(i + 1);
                let mut acc = 0.0;
                let mut left = lo;
                let start = pos.partition_point(|&p| p <= lo);
                for &p in pos[start..].iter().take_while(|&&p| p < hi) {
                    if p > left {
                        acc += gauss5(|x| reg.eval(x) * test(x), left, p);
                        left = p;
                    }
                }
                acc + gauss5(|x| reg.eval(x) * test(x), left, hi)
            })
            .sum();
        let cum = CumulativeIntegral::new(grid, test);
        let sal: f64 = self.jumps.iter().zip(&self.anchors.points).map(|(u, &p)| -u * cum.up_to(p, test)).sum();
        regular + sal
    }

    /// `∫_a^b Γ(φ) dx`.
    pub fn integral(&self) -> f64 {
        match &self.regular {
            Regular::Grid(g) => {
                g.integral()
                    - self.jumps.iter().zip(&self.anchors.points).map(|(u, &p)| u * (p - self.anchors.a)).sum::<f64>()
            }
            Regular::Pointwise(_) => self.pair(&|_| 1.0),
        }
    }

    /// Pointwise product `g · Γ(φ)` as an element with jumps `g(c_k) u_k`.
    pub fn multiply(&self, g: &(dyn Fn(f64) -> f64 + Sync)) -> JumpFunction {
        let jumps: Vec<f64> = self.jumps.iter().zip(&self.anchors.points).map(|(u, &p)| g(p) * u).collect();
        let grid = self.norm_grid();
        Self::from_total(grid, self.anchors.clone(), self.eta, jumps, |x| g(x) * self.materialize(x))
            .expect("lengths agree")
    }

    fn check_compatible(&self, other: &JumpFunction) -> Result<()> {
        if !Arc::ptr_eq(&self.anchors, &other.anchors) && !self.anchors.same_as(&other.anchors) {
            return Err(Error::AnchorMismatch);
        }
        Ok(())
    }

    /// `α self + β other` on a common grid.
    pub fn lin_comb(&self, alpha: f64, other: &JumpFunction, beta: f64) -> Result<JumpFunction> {
        self.check_compatible(other)?;
        let grid = self.grid().or(other.grid()).unwrap_or(self.norm_grid());
        let p = self.regular.sample(grid);
        let q = other.regular.sample(grid);
        let values = p.values.iter().zip(&q.values).map(|(x, y)| alpha * x + beta * y).collect();
        let jumps = self.jumps.iter().zip(&other.jumps).map(|(x, y)| alpha * x + beta * y).collect();
        JumpFunction::new(Regular::Grid(GridFunction { grid, values }), jumps, self.anchors.clone(), self.eta)
    }

    pub fn scale(&self, s: f64) -> JumpFunction {
        let regular = match &self.regular {
            Regular::Grid(g) => {
                Regular::Grid(GridFunction { grid: g.grid, values: g.values.iter().map(|v| s * v).collect() })
            }
            Regular::Pointwise(f) => {
                let f = f.clone();
                Regular::Pointwise(Arc::new(move |x| s * f(x)))
            }
        };
        JumpFunction::new(regular, self.jumps.iter().map(|u| s * u).collect(), self.anchors.clone(), self.eta)
            .expect("lengths agree")
    }

    /// Regular part sampled on a grid.
    pub fn on_grid(&self, grid: Grid) -> JumpFunction {
        JumpFunction::new(Regular::Grid(self.regular.sample(grid)), self.jumps.clone(), self.anchors.clone(), self.eta)
            .expect("lengths agree")
    }

    /// Serializable form.
    pub fn to_record(&self) -> JumpFunctionRecord {
        let g = self.regular.sample(self.norm_grid());
        JumpFunctionRecord {
            grid: g.grid,
            values: g.values,
            jumps: self.jumps.iter().enumerate().map(|(i, &u)| JumpEntry { k: i + 1, height: u }).collect(),
            eta: self.eta,
        }
    }
}

/// JSON layout of an element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpFunctionRecord {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub jumps: Vec<JumpEntry>,
    pub eta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpEntry {
    pub k: usize,
    pub height: f64,
}

impl JumpFunctionRecord {
    pub fn into_function(self, anchors: Arc<Anchors>) -> Result<JumpFunction> {
        let mut jumps = vec![0.0; anchors.len()];
        for e in &self.jumps {
            if e.k == 0 || e.k > jumps.len() {
                return Err(Error::LengthMismatch(e.k, jumps.len()));
            }
            jumps[e.k - 1] = e.height;
        }
        JumpFunction::new(
            Regular::Grid(GridFunction { grid: self.grid, values: self.values }),
            jumps,
            anchors,
            self.eta,
        )
    }
}

/// `x ↦ ∫_a^x test` with node values cached.
struct CumulativeIntegral {
    grid: Grid,
    at_nodes: Vec<f64>,
}

impl CumulativeIntegral {
    fn new(grid: Grid, test: &(dyn Fn(f64) -> f64 + Sync)) -> Self {
        let h = grid.h();
        let cells: Vec<f64> =
            (0..grid.n).into_par_iter().map(|i| gauss5(test, grid.node(i), grid.node(i) + h)).collect();
        let mut at_nodes = Vec::with_capacity(grid.n + 1);
        let mut acc = 0.0;
        at_nodes.push(0.0);
        for c in cells {
            acc += c;
            at_nodes.push(acc);
        }
        CumulativeIntegral { grid, at_nodes }
    }

    fn up_to(&self, x: f64, test: &(dyn Fn(f64) -> f64 + Sync)) -> f64 {
        let g = &self.grid;
        if x <= g.a {
            return 0.0;
        }
        if x >= g.b {
            return self.at_nodes[g.n];
        }
        let i = g.cell_of(x);
        self.at_nodes[i] + gauss5(test, g.node(i), x)
    }
}

/// Finite signed combination of point masses plus an optional density.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasure {
    pub atoms: Vec<(f64, f64)>,
    pub density: Option<GridFunction>,
}

impl AtomicMeasure {
    pub fn pair(&self, test: &(dyn Fn(f64) -> f64 + Sync)) -> f64 {
        let atoms: f64 = self.atoms.iter().map(|&(x, w)| w * test(x)).sum();
        let dens = self.density.as_ref().map_or(0.0, |d| {
            let g = d.grid;
            (0..g.n).map(|i| gauss5(|x| d.eval(x) * test(x), g.node(i), g.node(i + 1))).sum()
        });
        atoms + dens
    }

    /// Derivative measure of the saltus part: `Σ u_k δ_{c_k}`.
    pub fn saltus_derivative(phi: &JumpFunction) -> Self {
        AtomicMeasure {
            atoms: phi.anchors.points.iter().copied().zip(phi.jumps.iter().copied()).collect(),
            density: None,
        }
    }
}

/// Exact value of `Γ(L₁ φ)` at `x`, without any grid.
pub fn l1_value_at(map: &UnimodalMap, phi: &JumpFunction, x: f64) -> f64 {
    let top = map.critical_value();
    let w = chi(x, top);
    if w == 0.0 || x < map.a {
        return 0.0;
    }
    let p = map.inv(x, Sign::Plus);
    let m = map.inv(x, Sign::Minus);
    let c = map.c;
    w * (gamma_plus(phi, p, c) / map.df(p, 1).abs() + gamma_minus(phi, m, c) / map.df(m, 1).abs())
}

/// Exact value of `Γ(L₀ φ)` at `x`.
pub fn l0_value_at(map: &UnimodalMap, phi: &JumpFunction, x: f64) -> f64 {
    let top = map.critical_value();
    let w = chi(x, top);
    if w == 0.0 || x < map.a {
        return 0.0;
    }
    let c = map.c;
    w * (gamma_plus(phi, map.inv(x, Sign::Plus), c) - gamma_minus(phi, map.inv(x, Sign::Minus), c))
}

/// `∪_{ℓ <= depth} f^{-ℓ}(c)`.
pub fn preimages_of_turning_point(map: &UnimodalMap, depth: usize) -> Vec<f64> {
    let mut level = vec![map.c];
    let mut all = level.clone();
    let top = map.critical_value();
    for _ in 0..depth {
        let mut next = Vec::with_capacity(2 * level.len());
        for &y in &level {
            if y <= top && y >= map.a {
                next.push(map.inv(y, Sign::Plus));
                next.push(map.inv(y, Sign::Minus));
            }
        }
        all.extend_from_slice(&next);
        level = next;
    }
    all
}

/// Cached inverse branches at the grid nodes for repeated operator application.
pub struct TransferPlan {
    pub map: UnimodalMap,
    pub grid: Grid,
    anchors: Arc<Anchors>,
    /// Per node: `(χ, ψ+, 1/|f'(ψ+)|, ψ-, 1/|f'(ψ-)|)`.
    nodes: Vec<(f64, f64, f64, f64, f64)>,
}

impl TransferPlan {
    pub fn new(map: &UnimodalMap, grid: Grid, anchors: Arc<Anchors>) -> Self {
        let top = map.critical_value();
        let tol = 64.0 * f64::EPSILON * (map.b - map.a);
        let nodes = (0..=grid.n)
            .into_par_iter()
            .map(|i| {
                let x = grid.node(i);
                let chi = chi(x, top);
                if chi == 0.0 {
                    return (0.0, f64::NAN, 0.0, f64::NAN, 0.0);
                }
                let p = snap(map.inv(x, Sign::Plus), &anchors.points, tol);
                let m = snap(map.inv(x, Sign::Minus), &anchors.points, tol);
                (chi, p, 1.0 / map.df(p, 1).abs(), m, 1.0 / map.df(m, 1).abs())
            })
            .collect();
        TransferPlan { map: map.clone(), grid, anchors, nodes }
    }

    pub fn anchors(&self) -> &Arc<Anchors> {
        &self.anchors
    }

    fn check(&self, phi: &JumpFunction) -> Result<()> {
        if !Arc::ptr_eq(&self.anchors, &phi.anchors) && !self.anchors.same_as(&phi.anchors) {
            return Err(Error::AnchorMismatch);
        }
        Ok(())
    }

    /// Weighted transfer operator `L₁`.
    pub fn apply_l1(&self, phi: &JumpFunction) -> Result<JumpFunction> {
        self.check(phi)?;
        let w = l1_jumps(&self.anchors, phi);
        let table = SaltusTable::new(&self.anchors.points, &w);
        let c = self.anchors.c;
        let values = self
            .nodes
            .par_iter()
            .enumerate()
            .map(|(i, &(chi, p, wp, m, wm))| {
                let x = self.grid.node(i);
                let img =
                    if chi == 0.0 { 0.0 } else { chi * (gamma_plus(phi, p, c) * wp + gamma_minus(phi, m, c) * wm) };
                img - table.eval(x)
            })
            .collect();
        JumpFunction::new(Regular::Grid(GridFunction { grid: self.grid, values }), w, self.anchors.clone(), phi.eta)
    }

    /// Unweighted signed operator `L₀`.
    pub fn apply_l0(&self, phi: &JumpFunction) -> Result<JumpFunction> {
        self.check(phi)?;
        let w = l0_jumps(&self.anchors, phi);
        let table = SaltusTable::new(&self.anchors.points, &w);
        let c = self.anchors.c;
        let values = self
            .nodes
            .par_iter()
            .enumerate()
            .map(|(i, &(chi, p, _, m, _))| {
                let x = self.grid.node(i);
                let img = if chi == 0.0 { 0.0 } else { chi * (gamma_plus(phi, p, c) - gamma_minus(phi, m, c)) };
                img - table.eval(x)
            })
            .collect();
        JumpFunction::new(Regular::Grid(GridFunction { grid: self.grid, values }), w, self.anchors.clone(), phi.eta)
    }
}

/// A preimage off an anchor by round-off would see the full jump instead of its midpoint.
fn snap(y: f64, points: &[f64], tol: f64) -> f64 {
    points.iter().copied().find(|p| (p - y).abs() <= tol).unwrap_or(y)
}

#[inline]
fn chi(x: f64, top: f64) -> f64 {
    if x < top {
        1.0
    } else if x == top {
        0.5
    } else {
        0.0
    }
}

/// `Γ(φ)` along the left inverse branch; at `c` this is the left limit.
#[inline]
fn gamma_plus(phi: &JumpFunction, y: f64, c: f64) -> f64 {
    if y >= c {
        phi.left_limit(c)
    } else {
        phi.materialize(y)
    }
}

/// `Γ(φ)` along the right inverse branch; at `c` this is the right limit.
#[inline]
fn gamma_minus(phi: &JumpFunction, y: f64, c: f64) -> f64 {
    if y <= c {
        phi.right_limit(c)
    } else {
        phi.materialize(y)
    }
}

/// Jump heights of `L₁ φ`.
///
/// A jump at `c_{k-1}` moves to `c_k` divided by `f'(c_{k-1})`; the value at `c` creates
/// the jump at `c_1`, using one-sided limits so that a jump sitting at `c` is handled.
pub fn l1_jumps(anchors: &Anchors, phi: &JumpFunction) -> Vec<f64> {
    let k = anchors.len();
    let mut w = vec![0.0; k];
    if k == 0 {
        return w;
    }
    let c = anchors.c;
    let (sl, sr) = anchors.turning_slopes;
    w[0] = -(phi.left_limit(c) / sl + phi.right_limit(c) / sr);
    for i in 1..k {
        if anchors.points[i - 1] != c {
            w[i] = phi.jumps[i - 1] / anchors.slopes[i - 1];
        }
    }
    if let Closure::Preperiodic { n0 } = anchors.closure {
        w[n0 - 1] += phi.jumps[k - 1] / anchors.slopes[k - 1];
    }
    w
}

/// Jump heights of `L₀ φ`: every jump moves one step along the orbit with weight one,
/// and a jump at `c` itself reappears at `c_1`.
pub fn l0_jumps(anchors: &Anchors, phi: &JumpFunction) -> Vec<f64> {
    let k = anchors.len();
    let mut w = vec![0.0; k];
    if k == 0 {
        return w;
    }
    let c = anchors.c;
    w[0] = phi.right_limit(c) - phi.left_limit(c);
    for i in 1..k {
        if anchors.points[i - 1] != c {
            w[i] = phi.jumps[i - 1];
        }
    }
    if let Closure::Preperiodic { n0 } = anchors.closure {
        w[n0 - 1] += phi.jumps[k - 1];
    }
    w
}

/// Same heights and regular part, anchored at `target`.
pub fn relocate_jumps(phi: &JumpFunction, target: Arc<Anchors>) -> Result<JumpFunction> {
    if phi.jumps.len() != target.len() {
        return Err(Error::LengthMismatch(phi.jumps.len(), target.len()));
    }
    JumpFunction::new(phi.regular.clone(), phi.jumps.clone(), target, phi.eta)
}

/// Spreads a finite jump vector over an infinite orbit: indices below `n0` are kept, and
/// the cycle entry `w_{n0+j}` is distributed geometrically as
/// `w_{n0+j} μ_j^{-ℓ} (1 - μ_j^{-1})`, `ℓ >= 0`. Output has length `len`.
pub fn expand_jumps(w: &[f64], n0: usize, n1: usize, multipliers: &[f64], len: usize) -> Result<Vec<f64>> {
    if n0 < 1 || n1 < 1 || multipliers.len() != n1 || w.len() != n0 + n1 - 1 {
        return Err(Error::LengthMismatch(w.len(), n0 + n1 - 1));
    }
    if let Some(m) = multipliers.iter().find(|m| m.abs() <= 1.0) {
        return Err(Error::NonExpandingMultiplier(*m));
    }
    let mut v = vec![0.0; len];
    for (l, slot) in v.iter_mut().enumerate().take((n0 - 1).min(len)) {
        *slot = w[l];
    }
    for j in 0..n1 {
        let mu = multipliers[j];
        let mut factor = 1.0 - 1.0 / mu;
        let mut idx = n0 - 1 + j;
        while idx < len {
            v[idx] = w[n0 - 1 + j] * factor;
            factor /= mu;
            idx += n1;
        }
    }
    Ok(v)
}

/// Inverse of [`expand_jumps`]: sums each residue class on the cycle.
pub fn compress_jumps(v: &[f64], n0: usize, n1: usize) -> Vec<f64> {
    let mut w = vec![0.0; n0 + n1 - 1];
    for (idx, &x) in v.iter().enumerate() {
        if idx < n0 - 1 {
            w[idx] = x;
        } else {
            w[n0 - 1 + (idx - (n0 - 1)) % n1] += x;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tent2_density(grid: Grid) -> (JumpFunction, Arc<Anchors>) {
        let map = UnimodalMap::tent(2.0).unwrap();
        let (anchors, _, _) = Anchors::from_map(&map, None).unwrap();
        let anchors = Arc::new(anchors);
        let phi =
            JumpFunction::new(Regular::Grid(GridFunction::zeros(grid)), vec![-1.0, 1.0], anchors.clone(), 0.1).unwrap();
        (phi, anchors)
    }

    #[test]
    fn tent2_density_values() {
        let grid = Grid::new(0.0, 1.0, 64);
        let (phi, anchors) = tent2_density(grid);
        assert_eq!(anchors.points, vec![1.0, 0.0]);
        assert_eq!(anchors.closure, Closure::Preperiodic { n0: 2 });
        assert_eq!(phi.materialize(0.5), 1.0);
        assert_eq!(phi.materialize(1.5), 0.0);
        assert_eq!(phi.materialize(1.0), 0.5);
        assert_eq!(phi.materialize(-0.5), 0.0);
        assert!((phi.b0_norm() - 1.21).abs() < 1e-15);
        let map = UnimodalMap::tent(2.0).unwrap();
        assert!((phi.weak_norm(Some(0), &map) - 1.21).abs() < 1e-15);
        assert!((phi.pair(&|_| 1.0) - 1.0).abs() < 1e-14);
        let z = JumpFunction::zero(grid, anchors, 0.1);
        assert_eq!(z.b0_norm(), 0.0);
    }

    #[test]
    fn tent2_density_is_fixed() {
        let grid = Grid::new(0.0, 1.0, 128);
        let (phi, anchors) = tent2_density(grid);
        let map = UnimodalMap::tent(2.0).unwrap();
        let plan = TransferPlan::new(&map, grid, anchors);
        let img = plan.apply_l1(&phi).unwrap();
        assert_eq!(img.jumps(), &[-1.0, 1.0]);
        assert!(img.regular_grid().unwrap().sup_norm() < 1e-14);
    }

    #[test]
    fn l1_of_constant() {
        // φ ≡ 1 on [0, 1] without jumps; the grid regular part already vanishes right of b.
        let map = UnimodalMap::tent(2.0).unwrap();
        let grid = Grid::new(0.0, 1.0, 64);
        let (anchors, _, _) = Anchors::from_map(&map, None).unwrap();
        let anchors = Arc::new(anchors);
        let phi = JumpFunction::new(
            Regular::Grid(GridFunction::from_fn(grid, |_| 1.0)),
            vec![0.0, 0.0],
            anchors.clone(),
            0.05,
        )
        .unwrap();
        let plan = TransferPlan::new(&map, grid, anchors);
        let img = plan.apply_l1(&phi).unwrap();
        assert!((img.jumps()[0] + 1.0).abs() < 1e-15);
        for i in 0..grid.n {
            let x = grid.node(i);
            assert!((img.materialize(x) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn l0_of_identity_on_tent2() {
        let map = UnimodalMap::tent(2.0).unwrap();
        let grid = Grid::new(0.0, 1.0, 64);
        let (anchors, _, _) = Anchors::from_map(&map, None).unwrap();
        let anchors = Arc::new(anchors);
        let phi =
            JumpFunction::from_total(grid, anchors.clone(), 0.05, vec![0.0, 0.0], |x| if x <= 1.0 { x } else { 0.0 })
                .unwrap();
        let plan = TransferPlan::new(&map, grid, anchors);
        let img = plan.apply_l0(&phi).unwrap();
        for i in 1..grid.n {
            let x = grid.node(i);
            assert!((img.materialize(x) - (x - 1.0)).abs() < 1e-14, "{x}");
        }
    }

    #[test]
    fn expand_compress() {
        let v = expand_jumps(&[1.0], 1, 1, &[2.0], 60).unwrap();
        assert_eq!(&v[..3], &[0.5, 0.25, 0.125]);
        assert!((compress_jumps(&v, 1, 1)[0] - 1.0).abs() < 1e-15);
        let v = expand_jumps(&[-1.0, 1.0], 2, 1, &[2.0], 60).unwrap();
        assert_eq!(&v[..3], &[-1.0, 0.5, 0.25]);
        let w = compress_jumps(&v, 2, 1);
        assert!((w[0] + 1.0).abs() < 1e-15 && (w[1] - 1.0).abs() < 1e-15);
        assert!(expand_jumps(&[0.0, 0.0], 2, 1, &[2.0], 10).unwrap().iter().all(|x| *x == 0.0));
        assert!(matches!(expand_jumps(&[1.0], 1, 1, &[0.5], 10), Err(Error::NonExpandingMultiplier(_))));
    }

    #[test]
    fn relocation_is_isometric() {
        let map = UnimodalMap::tent(1.9).unwrap();
        let other = UnimodalMap::tent(1.98).unwrap();
        let grid = Grid::new(0.0, 1.0, 256);
        let (a0, _, _) = Anchors::from_map(&map, Some(40)).unwrap();
        let (a1, _, _) = Anchors::from_map(&other, Some(40)).unwrap();
        let jumps: Vec<f64> = (0..40).map(|k| (-0.6f64).powi(k)).collect();
        let phi = JumpFunction::from_total(grid, Arc::new(a1), 0.05, jumps, |x| x * (1.0 - x)).unwrap();
        let moved = relocate_jumps(&phi, Arc::new(a0.clone())).unwrap();
        assert_eq!(moved.b0_norm(), phi.b0_norm());
        let same = relocate_jumps(&phi, phi.anchors().clone()).unwrap();
        assert_eq!(same.jumps(), phi.jumps());
        let short = Anchors { points: vec![0.5], slopes: vec![1.0], ..a0 };
        assert!(matches!(relocate_jumps(&phi, Arc::new(short)), Err(Error::LengthMismatch(..))));
    }

    #[test]
    fn anchor_mismatch() {
        let map = UnimodalMap::tent(1.9).unwrap();
        let grid = Grid::new(0.0, 1.0, 64);
        let (a0, _, _) = Anchors::from_map(&map, Some(20)).unwrap();
        let (a1, _, _) = Anchors::from_map(&UnimodalMap::tent(1.95).unwrap(), Some(20)).unwrap();
        let plan = TransferPlan::new(&map, grid, Arc::new(a0));
        let phi = JumpFunction::zero(grid, Arc::new(a1), 0.05);
        assert!(matches!(plan.apply_l1(&phi), Err(Error::AnchorMismatch)));
    }

    #[test]
    fn json_layout() {
        let grid = Grid::new(0.0, 1.0, 16);
        let (phi, anchors) = tent2_density(grid);
        let rec = phi.to_record();
        let s = serde_json::to_value(&rec).unwrap();
        assert_eq!(s["grid"]["N"], 16);
        assert_eq!(s["jumps"][0]["k"], 1);
        assert_eq!(s["jumps"][1]["height"], 1.0);
        let back = rec.into_function(anchors).unwrap();
        assert_eq!(back.jumps(), phi.jumps());
    }

    #[test]
    fn saltus_limits() {
        let grid = Grid::new(0.0, 1.0, 16);
        let (phi, _) = tent2_density(grid);
        assert_eq!(phi.left_limit(1.0), 1.0);
        assert_eq!(phi.right_limit(1.0), 0.0);
        assert_eq!(phi.left_limit(0.0), 0.0);
        assert_eq!(phi.right_limit(0.0), 1.0);
    }

    #[test]
    fn atomic_pairing() {
        let m = AtomicMeasure { atoms: vec![(0.5, -2.0)], density: None };
        assert!((m.pair(&|x| x) + 1.0).abs() < 1e-15);
        let grid = Grid::new(0.0, 1.0, 32);
        let m = AtomicMeasure { atoms: vec![], density: Some(GridFunction::from_fn(grid, |_| 2.0)) };
        assert!((m.pair(&|x| x) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn pointwise_operators_match_grid() {
        let map = UnimodalMap::tent(1.9).unwrap();
        let grid = Grid::new(0.0, 1.0, 512);
        let (anchors, _, _) = Anchors::from_map(&map, None).unwrap();
        let anchors = Arc::new(anchors);
        let k = anchors.len();
        let jumps: Vec<f64> = (0..k).map(|i| 0.3 * (-0.5f64).powi(i as i32)).collect();
        let reg = Regular::Pointwise(Arc::new(|x: f64| if x <= 1.0 { x * x } else { 0.0 }));
        let phi = JumpFunction::new(reg, jumps, anchors.clone(), 0.05).unwrap();
        let plan = TransferPlan::new(&map, grid, anchors);
        let g1 = plan.apply_l1(&phi).unwrap();
        let g0 = plan.apply_l0(&phi).unwrap();
        for i in 1..grid.n {
            let x = grid.node(i);
            assert!((g1.materialize(x) - l1_value_at(&map, &phi, x)).abs() < 1e-12);
            assert!((g0.materialize(x) - l0_value_at(&map, &phi, x)).abs() < 1e-12);
        }
        assert!((g1.integral() - phi.integral()).abs() < 1e-5);
    }

    #[test]
    fn preimage_set() {
        let map = UnimodalMap::tent(2.0).unwrap();
        let mut p = preimages_of_turning_point(&map, 2);
        p.sort_by(f64::total_cmp);
        assert_eq!(p, vec![0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875]);
    }
}
