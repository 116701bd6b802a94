//! One-parameter families `f_t`, response curves `R(t) = ∫ φ ρ_t dx` and the experiments
//! that compare them with `Ψ₁`.

use crate::error::{Error, Result};
use crate::func::{extrapolate_to_zero, gauss5, Expr, Fun, RealFn};
use crate::jumpspace::{relocate_jumps, Anchors, Closure, JumpFunction, TransferPlan};
use crate::map_core::{Branch, MapSpec, OrbitKind, Sign, UnimodalMap};
use crate::susceptibility::{derivative_product, psi1, Psi1Options, Psi1Report, Setup};
use crate::transfer::{invariant_decomposition, DensityDecomposition, DensityOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// `h_t(x) = x + t b(x)`.
#[derive(Clone)]
pub struct Conjugacy {
    b: Fun,
    pub t: f64,
    lo: f64,
    hi: f64,
}

impl Conjugacy {
    pub fn new(b: Fun, t: f64, lo: f64, hi: f64) -> Self {
        Conjugacy { b, t, lo, hi }
    }

    #[inline]
    pub fn h(&self, x: f64) -> f64 {
        x + self.t * self.b.value(x)
    }

    /// Derivative of order `order >= 1`.
    #[inline]
    pub fn dh(&self, x: f64, order: usize) -> f64 {
        let d = self.t * self.b.eval(x, order);
        if order == 1 {
            1.0 + d
        } else {
            d
        }
    }

    /// `h_t^{-1}(y)` by Newton, with a bisection fallback.
    pub fn inv(&self, y: f64) -> f64 {
        if self.t == 0.0 {
            return y;
        }
        let w = self.hi - self.lo;
        let mut x = y;
        for _ in 0..60 {
            let step = (self.h(x) - y) / self.dh(x, 1);
            x -= step;
            if step.abs() <= 1e-16 * w {
                return x;
            }
        }
        let (mut l, mut r) = (self.lo - w, self.hi + w);
        for _ in 0..200 {
            let m = 0.5 * (l + r);
            if self.h(m) < y {
                l = m;
            } else {
                r = m;
            }
        }
        0.5 * (l + r)
    }
}

/// Branch of `h_t ∘ f ∘ h_t^{-1}`.
struct ConjugatedBranch {
    base: UnimodalMap,
    sign: Sign,
    h: Conjugacy,
}

impl ConjugatedBranch {
    fn upto2(&self, x: f64, order: usize) -> f64 {
        let br = self.base.branch(self.sign);
        let u = self.h.inv(x);
        let f0 = br.eval(u, 0);
        if order == 0 {
            return self.h.h(f0);
        }
        let u1 = 1.0 / self.h.dh(u, 1);
        let f1 = br.eval(u, 1);
        let (h1, h2) = (self.h.dh(f0, 1), self.h.dh(f0, 2));
        if order == 1 {
            return h1 * f1 * u1;
        }
        let u2 = -self.h.dh(u, 2) * u1 * u1 * u1;
        let f2 = br.eval(u, 2);
        h2 * (f1 * u1).powi(2) + h1 * (f2 * u1 * u1 + f1 * u2)
    }
}

impl Branch for ConjugatedBranch {
    fn eval(&self, x: f64, order: usize) -> f64 {
        if order <= 2 {
            return self.upto2(x, order);
        }
        let e = 1e-5 * (self.base.b - self.base.a);
        (self.upto2(x + e, 2) - self.upto2(x - e, 2)) / (2.0 * e)
    }

    fn inverse(&self, y: f64) -> Option<f64> {
        Some(self.h.h(self.base.inv(self.h.inv(y), self.sign)))
    }
}

/// Branch `g + eps q`.
struct PerturbedBranch {
    inner: Arc<dyn Branch>,
    q: Fun,
    eps: f64,
}

impl Branch for PerturbedBranch {
    fn eval(&self, x: f64, order: usize) -> f64 {
        self.inner.eval(x, order) + self.eps * self.q.eval(x, order)
    }
}

/// `X(y) = b(y) − f'(ψ₊(y)) b(ψ₊(y))`, so that `X∘f = b∘f − f' b`.
struct ConjugacyX {
    map: UnimodalMap,
    b: Fun,
}

impl ConjugacyX {
    fn branch_value(&self, y: f64, sign: Sign) -> f64 {
        let p = self.map.inv(y, sign);
        self.b.value(y) - self.map.branch(sign).eval(p, 1) * self.b.value(p)
    }
}

impl RealFn for ConjugacyX {
    fn eval(&self, y: f64, order: usize) -> f64 {
        match order {
            0 => self.branch_value(y, Sign::Plus),
            1 => {
                let br = self.map.branch(Sign::Plus);
                let p = self.map.inv(y, Sign::Plus);
                let d = br.eval(p, 1);
                self.b.eval(y, 1) - br.eval(p, 2) * self.b.value(p) / d - self.b.eval(p, 1)
            }
            k => {
                let e = 1e-5 * (self.map.b - self.map.a);
                (self.eval(y + e, k - 1) - self.eval(y - e, k - 1)) / (2.0 * e)
            }
        }
    }
}

/// Family description as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyConfig {
    /// `f_t = h_t ∘ f ∘ h_t^{-1}` with `h_t = id + t b`.
    Conjugacy {
        base: MapSpec,
        bump: Expr,
        #[serde(default = "default_t_max")]
        t_max: f64,
    },
    /// Tent maps with slope `slope + t`.
    TentSlope {
        slope: f64,
        #[serde(default = "default_t_max")]
        t_max: f64,
    },
    /// `g_t = f_t + t^power q`.
    Perturbed { inner: Box<FamilyConfig>, bump: Expr, power: i32 },
}

fn default_t_max() -> f64 {
    0.05
}

impl FamilyConfig {
    /// Conjugacy family on `tent(slope)` with `b = amp sin(2πx)`.
    pub fn tent_sine(slope: f64, amp: f64) -> Self {
        FamilyConfig::Conjugacy {
            base: MapSpec::Named(crate::map_core::NamedMap::Tent { slope }),
            bump: Expr::Sin { amp, freq: 2.0 * std::f64::consts::PI, phase: 0.0 },
            t_max: default_t_max(),
        }
    }
}

#[derive(Clone)]
enum Kind {
    Conjugacy { b: Fun },
    TentSlope { s0: f64 },
    Perturbed { inner: Box<Family>, q: Fun, power: i32 },
}

/// Validated one-parameter family.
#[derive(Clone)]
pub struct Family {
    pub config: FamilyConfig,
    pub base: UnimodalMap,
    pub t_max: f64,
    kind: Kind,
}

impl std::fmt::Debug for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Family").field("config", &self.config).finish()
    }
}

const VANISH_TOL: f64 = 1e-12;

pub fn build_family(config: &FamilyConfig) -> Result<Family> {
    match config {
        FamilyConfig::Conjugacy { base, bump, t_max } => {
            let map = UnimodalMap::from_spec(base)?;
            let b: Fun = Arc::new(bump.clone());
            for p in [map.a, map.c, map.b] {
                if b.value(p).abs() > VANISH_TOL {
                    return Err(Error::Config(format!(
                        "conjugacy bump must vanish at a, c, b; b({p}) = {}",
                        b.value(p)
                    )));
                }
            }
            let n = 4096;
            let sup_db =
                (0..=n).map(|i| b.eval(map.a + (map.b - map.a) * i as f64 / n as f64, 1).abs()).fold(0.0, f64::max);
            if t_max * sup_db >= 1.0 {
                return Err(Error::NotHomeomorphism(t_max * sup_db));
            }
            let x = ConjugacyX { map: map.clone(), b: b.clone() };
            let top = map.critical_value();
            let m = 1000;
            let gap = (0..=m)
                .map(|i| {
                    let y = map.a + (top - map.a) * i as f64 / m as f64;
                    (x.branch_value(y, Sign::Plus) - x.branch_value(y, Sign::Minus)).abs()
                })
                .fold(0.0, f64::max);
            if gap > 1e-10 {
                return Err(Error::BranchInconsistency(gap));
            }
            let fam = Family { config: config.clone(), base: map, t_max: *t_max, kind: Kind::Conjugacy { b } };
            fam.map_at(*t_max)?;
            fam.map_at(-t_max)?;
            Ok(fam)
        }
        FamilyConfig::TentSlope { slope, t_max } => {
            let map = UnimodalMap::tent(*slope)?;
            UnimodalMap::tent(slope - t_max)?;
            UnimodalMap::tent((slope + t_max).min(2.0))?;
            Ok(Family { config: config.clone(), base: map, t_max: *t_max, kind: Kind::TentSlope { s0: *slope } })
        }
        FamilyConfig::Perturbed { inner, bump, power } => {
            let inner = build_family(inner)?;
            let q: Fun = Arc::new(bump.clone());
            let (a, b) = (inner.base.a, inner.base.b);
            if q.value(a).abs() > VANISH_TOL || q.value(b).abs() > VANISH_TOL {
                return Err(Error::Config("perturbation must vanish at both endpoints".into()));
            }
            if *power < 1 {
                return Err(Error::Config(format!("perturbation power must be at least 1, got {power}")));
            }
            let fam = Family {
                config: config.clone(),
                base: inner.base.clone(),
                t_max: inner.t_max,
                kind: Kind::Perturbed { inner: Box::new(inner), q, power: *power },
            };
            fam.map_at(fam.t_max)?;
            Ok(fam)
        }
    }
}

impl Family {
    pub fn map_at(&self, t: f64) -> Result<UnimodalMap> {
        if t == 0.0 {
            return Ok(self.base.clone());
        }
        let base = &self.base;
        match &self.kind {
            Kind::Conjugacy { b } => {
                let h = Conjugacy::new(b.clone(), t, base.a, base.b);
                let mk =
                    |sign| -> Arc<dyn Branch> { Arc::new(ConjugatedBranch { base: base.clone(), sign, h: h.clone() }) };
                Ok(UnimodalMap::new(base.a, base.b, base.c, mk(Sign::Plus), mk(Sign::Minus))?
                    .with_label(format!("{} conjugated at t = {t}", base.label())))
            }
            Kind::TentSlope { s0 } => UnimodalMap::tent(s0 + t),
            Kind::Perturbed { inner, q, power } => {
                let g = inner.map_at(t)?;
                let eps = t.powi(*power);
                let mk = |sign| -> Arc<dyn Branch> {
                    Arc::new(PerturbedBranch { inner: g.branch(sign).clone(), q: q.clone(), eps })
                };
                Ok(UnimodalMap::new(g.a, g.b, g.c, mk(Sign::Plus), mk(Sign::Minus))?
                    .with_label(format!("{} perturbed", g.label())))
            }
        }
    }

    /// Infinitesimal deformation `X` with `∂_t f_t|₀ = X∘f`, when it exists.
    pub fn x(&self) -> Option<Fun> {
        match &self.kind {
            Kind::Conjugacy { b } => Some(Arc::new(ConjugacyX { map: self.base.clone(), b: b.clone() })),
            Kind::TentSlope { s0 } => Some(Expr::poly(&[0.0, 1.0 / s0]).into_fun()),
            Kind::Perturbed { inner, power, .. } => {
                if *power >= 2 {
                    inner.x()
                } else {
                    None
                }
            }
        }
    }

    /// `α = ∂_t h_t` for conjugacy families.
    pub fn alpha(&self) -> Option<Fun> {
        match &self.kind {
            Kind::Conjugacy { b } => Some(b.clone()),
            _ => None,
        }
    }

    pub fn conjugacy(&self, t: f64) -> Option<Conjugacy> {
        match &self.kind {
            Kind::Conjugacy { b } => Some(Conjugacy::new(b.clone(), t, self.base.a, self.base.b)),
            _ => None,
        }
    }

    pub fn is_conjugacy(&self) -> bool {
        matches!(self.kind, Kind::Conjugacy { .. })
    }
}

/// `max |h_t(f(x)) − f_t(h_t(x))|` over 1001 points.
pub fn conjugacy_defect(family: &Family, t: f64) -> Result<f64> {
    let h = family.conjugacy(t).ok_or(Error::Config("not a conjugacy family".into()))?;
    let ft = family.map_at(t)?;
    let f = &family.base;
    Ok((0..=1000)
        .map(|i| {
            let x = f.a + (f.b - f.a) * i as f64 / 1000.0;
            (h.h(f.f(x)) - ft.f(h.h(x))).abs()
        })
        .fold(0.0, f64::max))
}

/// Density of `map` normalized to unit mass, with its decomposition.
pub fn density(map: &UnimodalMap, opts: &DensityOptions) -> Result<(JumpFunction, DensityDecomposition)> {
    let dec = invariant_decomposition(map, opts)?;
    let rho = dec.density();
    let rho = rho.scale(1.0 / rho.integral());
    Ok((rho, dec))
}

/// `∫ |f − g|` with the cells split at every grid node and every anchor of either side.
pub fn l1_distance(f: &JumpFunction, g: &JumpFunction) -> f64 {
    let mut breaks: Vec<f64> = Vec::new();
    for phi in [f, g] {
        if let Some(grid) = phi.grid() {
            breaks.extend(grid.nodes());
        }
        breaks.extend(phi.anchors().points.iter().copied());
    }
    let (a, b) = (f.anchors().a, f.anchors().b);
    l1_on_breaks(&|x| f.materialize(x), &|x| g.materialize(x), breaks, a, b)
}

fn l1_on_breaks(
    f: &(dyn Fn(f64) -> f64 + Sync),
    g: &(dyn Fn(f64) -> f64 + Sync),
    mut breaks: Vec<f64>,
    a: f64,
    b: f64,
) -> f64 {
    breaks.retain(|x| *x >= a && *x <= b);
    breaks.push(a);
    breaks.push(b);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    breaks.par_windows(2).map(|w| gauss5(|x| (f(x) - g(x)).abs(), w[0], w[1])).sum()
}

/// `‖ρ_t − (ρ₀/h_t') ∘ h_t^{-1}‖₁` for conjugacy families.
pub fn pushforward_gap(family: &Family, t: f64, opts: &DensityOptions) -> Result<f64> {
    let h = family.conjugacy(t).ok_or(Error::Config("not a conjugacy family".into()))?;
    let (rho0, _) = density(&family.base, opts)?;
    let (rho_t, _) = density(&family.map_at(t)?, opts)?;
    let mut breaks: Vec<f64> = rho_t.grid().map(|g| g.nodes()).unwrap_or_default();
    breaks.extend(rho_t.anchors().points.iter().copied());
    breaks.extend(rho0.anchors().points.iter().map(|&p| h.h(p)));
    if let Some(g) = rho0.grid() {
        breaks.extend(g.nodes().into_iter().map(|p| h.h(p)));
    }
    let push = |y: f64| {
        let x = h.inv(y);
        rho0.materialize(x) / h.dh(x, 1)
    };
    let (a, b) = (family.base.a, family.base.b);
    Ok(l1_on_breaks(&|y| rho_t.materialize(y), &push, breaks, a, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub t_values: Vec<f64>,
    #[serde(rename = "R_values")]
    pub r_values: Vec<f64>,
    pub rho_l1_dist: Vec<f64>,
    #[serde(rename = "N_used")]
    pub n_used: usize,
    pub tol_used: f64,
}

impl ResponseCurve {
    /// `t,R,l1dist` rows with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,R,l1dist\n");
        for i in 0..self.t_values.len() {
            out.push_str(&format!(
                "{:.16e},{:.16e},{:.16e}\n",
                self.t_values[i], self.r_values[i], self.rho_l1_dist[i]
            ));
        }
        out
    }

    pub fn value_at(&self, t: f64) -> Option<f64> {
        self.t_values.iter().position(|&s| s == t).map(|i| self.r_values[i])
    }
}

fn at_t<T>(t: f64, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NoConvergence(_) => Error::NoConvergenceAt { t, source: Box::new(e) },
        other => other,
    })
}

/// `R(t)` and `‖ρ_t − ρ₀‖₁` for every `t`; densities are computed concurrently.
pub fn response_curve(family: &Family, phi: &Fun, ts: &[f64], opts: &DensityOptions) -> Result<ResponseCurve> {
    let (rho0, _) = density(&family.base, opts)?;
    let phif = |x: f64| phi.value(x);
    let rows: Vec<(f64, f64)> = ts
        .par_iter()
        .map(|&t| {
            if t == 0.0 {
                return Ok((rho0.pair(&phif), 0.0));
            }
            let map = at_t(t, family.map_at(t))?;
            let (rho, _) = at_t(t, density(&map, opts))?;
            Ok((rho.pair(&phif), l1_distance(&rho, &rho0)))
        })
        .collect::<Result<_>>()?;
    let (r_values, rho_l1_dist) = rows.into_iter().unzip();
    Ok(ResponseCurve { t_values: ts.to_vec(), r_values, rho_l1_dist, n_used: opts.n, tol_used: opts.tol })
}

/// Symmetric difference quotients at `h, h/2, h/4, h/8` and their extrapolation in `h²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub steps: Vec<f64>,
    pub quotients: Vec<f64>,
    /// Extrapolated from the three largest steps.
    pub slope: f64,
    pub slope_err: f64,
    /// Extrapolated from the three smallest steps.
    pub slope_half: f64,
    /// `|slope − slope_half| < 3 slope_err`.
    pub richardson_consistent: bool,
}

pub fn slope_fit(curve: &ResponseCurve, h: f64) -> Result<SlopeFit> {
    let steps: Vec<f64> = (0..4).map(|k| h / f64::from(1u32 << k)).collect();
    let quotients = steps
        .iter()
        .map(|&s| match (curve.value_at(s), curve.value_at(-s)) {
            (Some(p), Some(m)) => Ok((p - m) / (2.0 * s)),
            _ => Err(Error::Config(format!("response curve lacks t = ±{s}"))),
        })
        .collect::<Result<Vec<f64>>>()?;
    let h2: Vec<f64> = steps.iter().map(|s| s * s).collect();
    let (slope, err_a) = extrapolate_to_zero(&h2[..3], &quotients[..3]);
    let (slope_half, err_b) = extrapolate_to_zero(&h2[1..], &quotients[1..]);
    // Once the quotients hit the density noise floor the smaller triple is the noisier one.
    let slope_err = err_a.max(err_b);
    Ok(SlopeFit {
        steps,
        quotients,
        slope,
        slope_err,
        slope_half,
        richardson_consistent: (slope - slope_half).abs() < 3.0 * slope_err.max(f64::EPSILON * slope.abs()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResponseOptions {
    /// Base step for the symmetric differences.
    pub h: f64,
    pub density: DensityOptions,
    /// Grid for the `Ψ₁` pipeline.
    pub psi1_grid: usize,
    pub psi1: Psi1Options,
}

impl Default for ResponseOptions {
    fn default() -> Self {
        ResponseOptions {
            h: 1e-2,
            density: DensityOptions { n: 4096, ..Default::default() },
            psi1_grid: 8192,
            psi1: Psi1Options::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearResponseReport {
    pub fit: SlopeFit,
    pub curve: ResponseCurve,
    #[serde(rename = "J")]
    pub j: Option<f64>,
    pub horizontal: bool,
    /// `None` when the family is not horizontal: `Ψ₁` is undefined there.
    pub psi1: Option<Psi1Report>,
    pub abs_diff: Option<f64>,
    /// `abs_diff / max(|Ψ₁|, 0.01)`.
    pub rel_diff: Option<f64>,
    /// `∫ φ' α ρ₀ dx`, exact derivative for conjugacy families.
    pub oracle_slope: Option<f64>,
}

/// Slope of `R` at 0 against `Ψ₁` computed on the base map.
pub fn linear_response_report(family: &Family, phi: &Fun, opts: &ResponseOptions) -> Result<LinearResponseReport> {
    let mut ts = vec![0.0];
    for k in 0..4 {
        let s = opts.h / f64::from(1u32 << k);
        ts.push(s);
        ts.push(-s);
    }
    let curve = response_curve(family, phi, &ts, &opts.density)?;
    let fit = slope_fit(&curve, opts.h)?;
    let mut rep = LinearResponseReport {
        fit,
        curve,
        j: None,
        horizontal: false,
        psi1: None,
        abs_diff: None,
        rel_diff: None,
        oracle_slope: None,
    };
    let Some(x) = family.x() else { return Ok(rep) };
    let setup = Setup::from_options(&family.base, &DensityOptions { n: opts.psi1_grid, ..opts.density })?;
    let j = setup.weighted_jump(x.as_ref());
    rep.j = Some(j);
    if let Some(alpha) = family.alpha() {
        rep.oracle_slope = Some(setup.rho0.pair(&|y| phi.eval(y, 1) * alpha.value(y)));
    }
    match psi1(&setup, &x, phi, None, &opts.psi1) {
        Ok(r) => {
            let d = (rep.fit.slope - r.psi1).abs();
            rep.horizontal = true;
            rep.abs_diff = Some(d);
            rep.rel_diff = Some(d / r.psi1.abs().max(0.01));
            rep.psi1 = Some(r);
        }
        Err(Error::NotHorizontal(_)) => {}
        Err(e) => return Err(e),
    }
    Ok(rep)
}

/// Dyadic parameters `2^{-k}` for `k` in `k_lo..=k_hi`.
pub fn dyadic(k_lo: i32, k_hi: i32) -> Vec<f64> {
    (k_lo..=k_hi).map(|k| 0.5f64.powi(k)).collect()
}

/// Least squares `y ≈ Σ c_j basis_j`. Returns coefficients, residual variance and standard errors.
fn least_squares(cols: &[Vec<f64>], y: &[f64]) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    let n = y.len();
    let p = cols.len();
    if n <= p || p == 0 {
        return None;
    }
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    // Unit-norm columns keep the Gram matrix well scaled.
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    if norms.contains(&0.0) {
        return None;
    }
    let q: Vec<Vec<f64>> = cols.iter().zip(&norms).map(|(c, s)| c.iter().map(|v| v / s).collect()).collect();
    // Gauss-Jordan on [G | I] with partial pivoting.
    let mut m: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let mut row: Vec<f64> = (0..p).map(|j| dot(&q[i], &q[j])).collect();
            row.extend((0..p).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-14 {
            return None;
        }
        m.swap(col, piv);
        let d = m[col][col];
        m[col].iter_mut().for_each(|v| *v /= d);
        for r in 0..p {
            if r != col {
                let f = m[r][col];
                let pivot_row = m[col].clone();
                m[r].iter_mut().zip(&pivot_row).for_each(|(v, w)| *v -= f * w);
            }
        }
    }
    let rhs: Vec<f64> = q.iter().map(|c| dot(c, y)).collect();
    let coef_q: Vec<f64> = (0..p).map(|i| (0..p).map(|j| m[i][p + j] * rhs[j]).sum()).collect();
    let ss: f64 = (0..n)
        .map(|i| {
            let fit: f64 = (0..p).map(|j| coef_q[j] * q[j][i]).sum();
            (y[i] - fit).powi(2)
        })
        .sum();
    let var = ss / (n - p) as f64;
    let coef = coef_q.iter().zip(&norms).map(|(c, s)| c / s).collect();
    let se = (0..p).map(|i| (m[i][p + i] * var).sqrt() / norms[i]).collect();
    Some((coef, var, se))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlipReport {
    pub t_values: Vec<f64>,
    /// `R(t) − R(0)`.
    pub dr: Vec<f64>,
    pub rho_l1_dist: Vec<f64>,
    /// `‖ρ_t − ρ₀‖₁ / (t ln(1/t))`.
    pub l1_ratio: Vec<f64>,
    /// Largest over smallest `l1_ratio`.
    pub l1_ratio_spread: Option<f64>,
    pub tlnt_coeff: Option<f64>,
    pub tlnt_se: Option<f64>,
    pub lin_coeff: Option<f64>,
    /// `t ln(1/t)` coefficient and standard error with a `t²` column added, which absorbs the
    /// curvature of a differentiable response.
    pub tlnt_coeff_curved: Option<f64>,
    pub tlnt_se_curved: Option<f64>,
    /// `max_t |Δ R_N(t) − Δ R_{N/2}(t)|`: numerical noise level of the differences.
    pub resolution_noise: f64,
    /// The fitted `t ln(1/t)` contribution, `max_t |K t ln(1/t)|` with the curved fit.
    pub tlnt_contribution: Option<f64>,
    /// `tlnt_contribution` is below three times `resolution_noise`, or `K` is within three
    /// standard errors of 0.
    pub tlnt_within_noise: bool,
    /// Residual variance of the pure-linear model over that of the two-term model.
    pub variance_ratio: Option<f64>,
    /// `t ln(1/t)` coefficients from consecutive pairs of parameters.
    pub local_coeffs: Vec<f64>,
    pub sign_consistent: bool,
    #[serde(rename = "J")]
    pub j: Option<f64>,
    /// `f'(c−) = −f'(c+)`.
    pub symmetric_turning: bool,
    pub critical_periodic: bool,
}

/// Fits `R(t) − R(0)` on `{t, t ln(1/t)}` for positive `t`. The signed difference is fitted;
/// when it keeps one sign this is the fit of `|R(t) − R(0)|` up to an overall sign.
pub fn nonlip_report(family: &Family, phi: &Fun, ts: &[f64], opts: &DensityOptions) -> Result<NonlipReport> {
    let mut all = vec![0.0];
    all.extend(ts.iter().copied().filter(|t| *t > 0.0));
    let curve = response_curve(family, phi, &all, opts)?;
    let r0 = curve.r_values[0];
    let t: Vec<f64> = curve.t_values[1..].to_vec();
    let dr: Vec<f64> = curve.r_values[1..].iter().map(|r| r - r0).collect();
    let tl: Vec<f64> = t.iter().map(|t| t * (1.0 / t).ln()).collect();
    let l1 = curve.rho_l1_dist[1..].to_vec();
    let l1_ratio: Vec<f64> = l1.iter().zip(&tl).map(|(d, w)| d / w).collect();
    let l1_ratio_spread = if l1_ratio.len() >= 2 {
        let (lo, hi) = l1_ratio.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        Some(hi / lo)
    } else {
        None
    };
    let two = least_squares(&[t.clone(), tl.clone()], &dr);
    let one = least_squares(std::slice::from_ref(&t), &dr);
    let curved = least_squares(&[t.clone(), tl.clone(), t.iter().map(|t| t * t).collect()], &dr);
    let coarse = response_curve(family, phi, &all, &DensityOptions { n: opts.n / 2, ..*opts })?;
    let resolution_noise =
        coarse.r_values[1..].iter().zip(&dr).map(|(r, d)| (r - coarse.r_values[0] - d).abs()).fold(0.0, f64::max);
    let tlnt_contribution = curved.as_ref().map(|f| tl.iter().map(|w| (f.0[1] * w).abs()).fold(0.0, f64::max));
    let tlnt_within_noise = match (&curved, tlnt_contribution) {
        (Some(f), Some(c)) => c <= 3.0 * resolution_noise || f.0[1].abs() <= 3.0 * f.2[1],
        _ => false,
    };
    let local_coeffs: Vec<f64> = (0..t.len().saturating_sub(1))
        .map(|i| {
            // Exact two-point solve of dr = a t + K t ln(1/t).
            let (t0, t1) = (t[i], t[i + 1]);
            let (l0, l1) = ((1.0 / t0).ln(), (1.0 / t1).ln());
            (dr[i] / t0 - dr[i + 1] / t1) / (l0 - l1)
        })
        .collect();
    let sign_consistent =
        !local_coeffs.is_empty() && (local_coeffs.iter().all(|k| *k > 0.0) || local_coeffs.iter().all(|k| *k < 0.0));
    let j = match family.x() {
        Some(x) => {
            let s = Setup::from_options(&family.base, opts)?;
            Some(s.weighted_jump(x.as_ref()))
        }
        None => None,
    };
    let (l, r) = family.base.turning_slopes();
    let orbit = crate::map_core::critical_orbit(&family.base, 200)?;
    let class = crate::map_core::classify_orbit(&orbit, 1e-9);
    Ok(NonlipReport {
        t_values: t,
        dr,
        rho_l1_dist: l1,
        l1_ratio,
        l1_ratio_spread,
        tlnt_coeff: two.as_ref().map(|f| f.0[1]),
        tlnt_se: two.as_ref().map(|f| f.2[1]),
        lin_coeff: two.as_ref().map(|f| f.0[0]),
        tlnt_coeff_curved: curved.as_ref().map(|f| f.0[1]),
        tlnt_se_curved: curved.as_ref().map(|f| f.2[1]),
        resolution_noise,
        tlnt_contribution,
        tlnt_within_noise,
        variance_ratio: match (&two, &one) {
            (Some(a), Some(b)) if a.1 > 0.0 => Some(b.1 / a.1),
            _ => None,
        },
        local_coeffs,
        sign_consistent,
        j,
        symmetric_turning: (l + r).abs() <= 1e-12 * l.abs(),
        critical_periodic: class.is_finite(),
    })
}

/// Smooth observable close to 1 at the first `count` postcritical points and close to 0
/// away from them, shifted to have mean zero against `ρ₀` when a density is given.
pub fn orbit_observable(map: &UnimodalMap, count: usize, width: f64, rho0: Option<&JumpFunction>) -> Result<Expr> {
    let orbit = crate::map_core::critical_orbit(map, count + 1)?;
    let mut centers: Vec<f64> = Vec::new();
    for k in 1..=count {
        let p = orbit.point(k);
        if centers.iter().all(|c| (c - p).abs() > 0.5 * width) {
            centers.push(p);
        }
    }
    let mut terms: Vec<Expr> = centers.iter().map(|&c| Expr::Gauss { center: c, width, height: 1.0 }).collect();
    if let Some(rho) = rho0 {
        let raw = Expr::Sum { terms: terms.clone() };
        let mean = rho.pair(&|x| raw.value(x));
        terms.push(Expr::Const { value: -mean });
    }
    Ok(Expr::Sum { terms })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentReport {
    pub t_values: Vec<f64>,
    /// `sup_x |f_t(x) − g_t(x)|`.
    pub sup_gap: Vec<f64>,
    /// Log-log slope of `sup_gap` against `t`.
    pub envelope_exponent: Option<f64>,
    /// `‖ρ_t − ρ̃_t‖₁`.
    pub distances: Vec<f64>,
    pub xi_hat: Option<f64>,
    pub identical: bool,
    pub passed: bool,
}

fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(_, y)| **y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Smallest envelope exponent accepted as tangency.
const TANGENT_EXPONENT: f64 = 1.8;

pub fn tangent_pair_experiment(f: &Family, g: &Family, ts: &[f64], opts: &DensityOptions) -> Result<TangentReport> {
    let ts: Vec<f64> = ts.iter().copied().filter(|t| *t > 0.0).collect();
    let sample: Vec<f64> = (0..=1000).map(|i| f.base.a + (f.base.b - f.base.a) * i as f64 / 1000.0).collect();
    let maps: Vec<(UnimodalMap, UnimodalMap)> =
        ts.iter().map(|&t| Ok((f.map_at(t)?, g.map_at(t)?))).collect::<Result<_>>()?;
    let sup_gap: Vec<f64> =
        maps.iter().map(|(ft, gt)| sample.iter().map(|&x| (ft.f(x) - gt.f(x)).abs()).fold(0.0, f64::max)).collect();
    let identical = sup_gap.iter().all(|g| *g == 0.0);
    let envelope_exponent = loglog_slope(&ts, &sup_gap);
    if !identical {
        match envelope_exponent {
            Some(e) if e >= TANGENT_EXPONENT => {}
            _ => {
                let worst = sup_gap.iter().zip(&ts).map(|(g, t)| g / (t * t)).fold(0.0, f64::max);
                return Err(Error::NotTangent(worst));
            }
        }
    }
    let distances: Vec<f64> = maps
        .par_iter()
        .zip(&ts)
        .map(|((ft, gt), &t)| {
            if identical {
                return Ok(0.0);
            }
            let (a, _) = at_t(t, density(ft, opts))?;
            let (b, _) = at_t(t, density(gt, opts))?;
            Ok(l1_distance(&a, &b))
        })
        .collect::<Result<_>>()?;
    let xi_hat = if identical { None } else { loglog_slope(&ts, &distances) };
    Ok(TangentReport {
        passed: identical || xi_hat.is_some_and(|x| x > 1.0),
        t_values: ts,
        sup_gap,
        envelope_exponent,
        distances,
        xi_hat,
        identical,
    })
}

/// Anchors of `f_t` matched in length and closure to `anchors`.
fn matching_anchors(map: &UnimodalMap, anchors: &Anchors) -> Result<Arc<Anchors>> {
    let k = match anchors.closure {
        Closure::Open => Some(anchors.len()),
        _ => None,
    };
    let (a, _, _) = Anchors::from_map(map, k)?;
    if a.len() != anchors.len() || a.closure != anchors.closure {
        return Err(Error::LengthMismatch(a.len(), anchors.len()));
    }
    Ok(Arc::new(a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PtDerivativeReport {
    pub t_values: Vec<f64>,
    /// `‖P_t(ρ₀) − ρ₀ − t D‖_{B₀}`.
    pub errors: Vec<f64>,
    pub exponent: Option<f64>,
    /// `‖P_0(ρ₀) − ρ₀‖_{B₀}`.
    pub e0: f64,
    pub d_norm: f64,
}

/// `P_t = G_t ∘ L_{1,t} ∘ G_t^{-1}` against its predicted derivative `D = −X'ρ₀ − Xρ'_reg`.
pub fn pt_derivative_experiment(family: &Family, dec: &DensityDecomposition, ts: &[f64]) -> Result<PtDerivativeReport> {
    let x = family.x().ok_or(Error::Config("family has no infinitesimal deformation".into()))?;
    let rho0 = dec.density();
    let grid = dec.grid();
    let d = derivative_product(dec, &x).scale(-1.0);
    let pt = |t: f64| -> Result<JumpFunction> {
        let map = family.map_at(t)?;
        let anchors_t = matching_anchors(&map, &dec.anchors)?;
        let moved = relocate_jumps(&rho0, anchors_t.clone())?;
        let img = TransferPlan::new(&map, grid, anchors_t).apply_l1(&moved)?;
        relocate_jumps(&img, dec.anchors.clone())
    };
    let e0 = pt(0.0)?.lin_comb(1.0, &rho0, -1.0)?.b0_norm();
    let errors: Vec<f64> = ts
        .par_iter()
        .map(|&t| {
            let p = at_t(t, pt(t))?;
            Ok(p.lin_comb(1.0, &rho0, -1.0)?.lin_comb(1.0, &d, -t)?.b0_norm())
        })
        .collect::<Result<_>>()?;
    Ok(PtDerivativeReport {
        exponent: loglog_slope(ts, &errors),
        t_values: ts.to_vec(),
        errors,
        e0,
        d_norm: d.b0_norm(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicLimitRow {
    pub label: String,
    /// `−Σ_k α(c_k) s_k ψ(c_k)`.
    pub target: f64,
    /// `(1/t) ∫ ψ (ρ_t − G_t ρ_t) dx`.
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    /// Errors decrease as `t` decreases.
    pub shrinking: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomicLimitReport {
    pub t_values: Vec<f64>,
    /// `max_t |‖G_t ρ_t‖_{B₀} − ‖ρ_t‖_{B₀}|`.
    pub isometry_defect: f64,
    pub rows: Vec<AtomicLimitRow>,
}

/// Relocating the jumps of `ρ_t` back to the orbit of `f` leaves a sum of atoms at first order.
pub fn atomic_limit_experiment(
    family: &Family,
    dec: &DensityDecomposition,
    tests: &[(String, Fun)],
    ts: &[f64],
    opts: &DensityOptions,
) -> Result<AtomicLimitReport> {
    let alpha = family.alpha().ok_or(Error::Config("atomic limit needs a conjugacy family".into()))?;
    let mass = dec.density().integral();
    let opts_k = DensityOptions { k_max: Some(dec.anchors.len()), ..*opts };
    let per_t: Vec<(JumpFunction, JumpFunction)> = ts
        .par_iter()
        .map(|&t| {
            let map = at_t(t, family.map_at(t))?;
            matching_anchors(&map, &dec.anchors)?;
            let (rho, _) = at_t(t, density(&map, &opts_k))?;
            let back = relocate_jumps(&rho, dec.anchors.clone())?;
            Ok((rho, back))
        })
        .collect::<Result<_>>()?;
    let isometry_defect = per_t.iter().map(|(r, g)| (r.b0_norm() - g.b0_norm()).abs()).fold(0.0, f64::max);
    let rows = tests
        .iter()
        .map(|(label, psi)| {
            let target: f64 = -dec
                .anchors
                .points
                .iter()
                .zip(&dec.s)
                .map(|(&p, s)| alpha.value(p) * s / mass * psi.value(p))
                .sum::<f64>();
            let f = |x: f64| psi.value(x);
            let values: Vec<f64> = per_t.iter().zip(ts).map(|((r, g), t)| (r.pair(&f) - g.pair(&f)) / t).collect();
            let errors: Vec<f64> = values.iter().map(|v| (v - target).abs()).collect();
            // Parameters are expected in decreasing order.
            let shrinking = errors.windows(2).all(|w| w[1] < w[0]);
            AtomicLimitRow { label: label.clone(), target, values, errors, shrinking }
        })
        .collect();
    Ok(AtomicLimitReport { t_values: ts.to_vec(), isometry_defect, rows })
}

/// True when the critical orbit of `map` is detected periodic within `horizon` steps.
pub fn critical_orbit_periodic(map: &UnimodalMap, horizon: usize) -> Result<bool> {
    let orbit = crate::map_core::critical_orbit(map, horizon)?;
    Ok(!matches!(crate::map_core::classify_orbit(&orbit, 1e-9).kind, OrbitKind::NoPeriodDetected { .. }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_family(slope: f64) -> Family {
        build_family(&FamilyConfig::tent_sine(slope, 0.05)).unwrap()
    }

    #[test]
    fn conjugated_map_commutes() {
        let fam = sine_family(1.9);
        for t in [0.03, -0.02, 0.001] {
            assert!(conjugacy_defect(&fam, t).unwrap() < 1e-12);
        }
        let ft = fam.map_at(0.03).unwrap();
        let y = 0.3;
        let e = 1e-6;
        let fd = (ft.f(y + e) - ft.f(y - e)) / (2.0 * e);
        assert!((ft.df(y, 1) - fd).abs() < 1e-6);
        let fd2 = (ft.df(y + e, 1) - ft.df(y - e, 1)) / (2.0 * e);
        assert!((ft.df(y, 2) - fd2).abs() < 1e-5);
    }

    #[test]
    fn family_errors() {
        let big = FamilyConfig::tent_sine(1.9, 5.0);
        assert!(matches!(build_family(&big), Err(Error::NotHomeomorphism(_))));
        let lopsided = FamilyConfig::Conjugacy {
            base: MapSpec::Named(crate::map_core::NamedMap::Tent { slope: 1.9 }),
            // x(1-x)(x-1/2)(x-1/5): vanishes at a, c, b but is not odd about c.
            bump: Expr::poly(&[0.0, 0.1, -0.8, 1.7, -1.0]),
            t_max: 0.05,
        };
        assert!(matches!(build_family(&lopsided), Err(Error::BranchInconsistency(_))));
    }

    #[test]
    fn deformation_fields() {
        let fam = sine_family(1.9);
        let x = fam.x().unwrap();
        assert!(x.value(0.0).abs() < 1e-15);
        let e = 1e-6;
        let fd = (x.value(0.4 + e) - x.value(0.4 - e)) / (2.0 * e);
        assert!((x.eval(0.4, 1) - fd).abs() < 1e-7);
        let slope = build_family(&FamilyConfig::TentSlope { slope: 1.9, t_max: 0.05 }).unwrap();
        assert!((slope.x().unwrap().value(0.95) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_observable_is_flat() {
        let fam = sine_family(1.9);
        let one = Expr::poly(&[1.0]).into_fun();
        let opts = DensityOptions { n: 1024, ..Default::default() };
        let c = response_curve(&fam, &one, &[0.0, 0.01, -0.01], &opts).unwrap();
        assert!(c.r_values.iter().all(|r| (r - 1.0).abs() < 1e-10), "{:?}", c.r_values);
    }

    #[test]
    fn pushforward_matches_computed_density() {
        let fam = sine_family(1.9);
        let opts = DensityOptions { n: 2048, ..Default::default() };
        assert!(pushforward_gap(&fam, 0.02, &opts).unwrap() < 1e-3);
    }

    #[test]
    fn linear_discrepancy_is_not_tangent() {
        let base = FamilyConfig::tent_sine(1.9, 0.05);
        let bump = Expr::poly(&[0.0, 0.5, -0.5]);
        let f = build_family(&base).unwrap();
        let g = build_family(&FamilyConfig::Perturbed { inner: Box::new(base), bump, power: 1 }).unwrap();
        let e = tangent_pair_experiment(&f, &g, &dyadic(6, 9), &DensityOptions { n: 512, ..Default::default() });
        assert!(matches!(e, Err(Error::NotTangent(_))));
        let same =
            tangent_pair_experiment(&f, &f, &dyadic(6, 7), &DensityOptions { n: 512, ..Default::default() }).unwrap();
        assert!(same.identical && same.passed);
    }

    #[test]
    fn least_squares_recovers_coefficients() {
        let t = dyadic(3, 9);
        let tl: Vec<f64> = t.iter().map(|t| t * (1.0 / t).ln()).collect();
        let y: Vec<f64> = t.iter().zip(&tl).map(|(a, b)| 0.3 * a - 1.7 * b).collect();
        let (c, var, _) = least_squares(&[t, tl], &y).unwrap();
        assert!((c[0] - 0.3).abs() < 1e-9 && (c[1] + 1.7).abs() < 1e-9 && var < 1e-20);
    }
}
