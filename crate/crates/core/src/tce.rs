//! Twisted cohomological equation `v = α∘f − f'·α`, horizontality and orbit derivatives.

use crate::error::{Error, Result};
use crate::func::{Expr, Fun, LinComb, RealFn};
use crate::map_core::{classify_orbit, critical_orbit, expansion_constants, OrbitClass, OrbitKind, UnimodalMap};
use crate::transfer::DensityDecomposition;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Target for the default truncation depth.
pub const DEFAULT_TAIL: f64 = 1e-10;

/// Samples used for sup-norm estimates of callables.
const SUP_SAMPLES: usize = 4096;

pub(crate) fn sup_on(map: &UnimodalMap, g: &dyn RealFn) -> f64 {
    (0..=SUP_SAMPLES)
        .map(|i| g.value(map.a + (map.b - map.a) * i as f64 / SUP_SAMPLES as f64).abs())
        .fold(0.0, f64::max)
}

/// Smallest `n` with `sup_v * lambda^{n+1} / (1 - lambda) < DEFAULT_TAIL`.
pub fn default_depth(sup_v: f64, lambda_hat: f64) -> usize {
    if sup_v == 0.0 {
        return 1;
    }
    let mut n = 1;
    while sup_v * lambda_hat.powi(n as i32 + 1) / (1.0 - lambda_hat) >= DEFAULT_TAIL && n < 10_000 {
        n += 1;
    }
    n
}

/// Truncated solution `α_(ω)` of the twisted cohomological equation.
#[derive(Clone)]
pub struct TceSolution {
    map: UnimodalMap,
    v: Fun,
    pub omega: f64,
    pub depth: usize,
    pub tail_bound: f64,
    pub sup_v: f64,
    pub lambda_hat: f64,
    pub big_lambda_hat: f64,
}

impl TceSolution {
    /// `α(x) = −Σ_{j≤n} v(f^j x)/(f^{j+1})'(x)`, or the finite formula when the orbit hits `c`.
    pub fn eval(&self, x: f64) -> f64 {
        let m = &self.map;
        let tol = m.exact_hit_tol();
        if (x - m.c).abs() < tol {
            return self.omega;
        }
        let mut y = x;
        let mut d = 1.0;
        let mut sum = 0.0;
        for j in 0..=self.depth {
            if j > 0 && (y - m.c).abs() < tol {
                // f^j(x) = c: α(x) = ω/(f^j)'(x) − Σ_{i<j} v(f^i x)/(f^{i+1})'(x).
                return self.omega / d - sum;
            }
            d *= m.df(y, 1);
            sum += self.v.value(y) / d;
            y = m.f(y);
        }
        -sum
    }

    /// `v(x) − α(f(x)) + f'(x) α(x)`.
    pub fn residual(&self, x: f64) -> f64 {
        self.v.value(x) - self.eval(self.map.f(x)) + self.map.df(x, 1) * self.eval(x)
    }

    /// Bound on the truncation residual at off-critical points.
    pub fn residual_bound(&self) -> f64 {
        2.0 * self.tail_bound * (1.0 + self.big_lambda_hat)
    }

    pub fn v(&self) -> &Fun {
        &self.v
    }

    pub fn map(&self) -> &UnimodalMap {
        &self.map
    }

    /// The solution as a shared callable.
    pub fn as_fun(&self) -> Fun {
        Arc::new(self.clone())
    }
}

impl RealFn for TceSolution {
    fn eval(&self, x: f64, order: usize) -> f64 {
        if order == 0 {
            TceSolution::eval(self, x)
        } else {
            let h = 1e-6 * (self.map.b - self.map.a);
            (TceSolution::eval(self, x + h) - TceSolution::eval(self, x - h)) / (2.0 * h)
        }
    }
}

/// Solves the equation for `v`; `depth = None` picks the default depth.
pub fn solve_tce(map: &UnimodalMap, v: Fun, omega: f64, depth: Option<usize>) -> Result<TceSolution> {
    let ec = expansion_constants(map)?;
    let sup_v = sup_on(map, v.as_ref());
    let depth = depth.unwrap_or_else(|| default_depth(sup_v, ec.lambda_hat)).max(1);
    let tail_bound = sup_v * ec.lambda_hat.powi(depth as i32 + 1) / (1.0 - ec.lambda_hat);
    Ok(TceSolution {
        map: map.clone(),
        v,
        omega,
        depth,
        tail_bound,
        sup_v,
        lambda_hat: ec.lambda_hat,
        big_lambda_hat: ec.big_lambda_hat,
    })
}

/// `v = X∘f`.
pub fn compose_with_map(map: &UnimodalMap, x: Fun) -> Fun {
    let m = map.clone();
    Arc::new(move |y: f64| x.value(m.f(y)))
}

/// Postcritical points `c_0..=c_len` and `(f^k)'(c_1)` for `k < len`, with Markov orbits
/// continued by index reduction so that round-off does not accumulate.
#[derive(Clone, Debug)]
pub struct OrbitTable {
    pub points: Vec<f64>,
    /// `derivs[k] = (f^k)'(c_1)`; stops before the orbit reaches `c`.
    pub derivs: Vec<f64>,
    pub class: OrbitClass,
}

impl OrbitTable {
    pub fn new(map: &UnimodalMap, class: Option<OrbitClass>, len: usize) -> Result<Self> {
        let len = len.max(2);
        let orbit = critical_orbit(map, len.max(64))?;
        let class = class.unwrap_or_else(|| classify_orbit(&orbit, 1e-9 * (map.b - map.a)));
        let mut points = Vec::with_capacity(len + 1);
        for k in 0..=len {
            let p = match class.kind {
                OrbitKind::Periodic { n1 } if k >= 1 => orbit.points[(k - 1) % n1 + 1],
                OrbitKind::Preperiodic { n0, n1 } if k > n0 => orbit.points[n0 + (k - n0) % n1],
                _ => {
                    if k < orbit.points.len() {
                        orbit.points[k]
                    } else {
                        map.f(*points.last().expect("nonempty"))
                    }
                }
            };
            points.push(p);
        }
        let tol = map.exact_hit_tol();
        let mut derivs = vec![1.0];
        for k in 1..len {
            if (points[k] - map.c).abs() < tol {
                break;
            }
            let d = derivs[k - 1] * map.df(points[k], 1);
            derivs.push(d);
        }
        Ok(OrbitTable { points, derivs, class })
    }

    /// Index `k` of the first return to `c`, if it happens within the table.
    pub fn hit(&self) -> Option<usize> {
        if self.derivs.len() + 1 < self.points.len() {
            Some(self.derivs.len())
        } else {
            None
        }
    }
}

/// Horizontality functional, weighted total jump and condition (a2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizontalityReport {
    pub defect: f64,
    pub defect_tail: f64,
    #[serde(rename = "J")]
    pub j: Option<f64>,
    pub j_tail: f64,
    #[serde(rename = "J_closed")]
    pub j_closed: Option<f64>,
    pub j_closed_tail: f64,
    pub abelian2: f64,
    pub abelian2_tail: f64,
    /// `X(c_1) − α_(0)(c_1)`, present when `X` is given.
    pub x_minus_alpha: Option<f64>,
    pub m_f: Option<usize>,
    pub terms: usize,
    /// Tail bounds use the one-step expansion constant.
    pub lambda_hat: f64,
}

/// `Σ_{j<M_f} v(c_j)/(f^j)'(c_1)` with its tail bound, `v` evaluated at `c_{j+1}` as `X`.
fn orbit_sum(table: &OrbitTable, x: &dyn RealFn, weight: impl Fn(usize) -> f64) -> (f64, usize) {
    let n = table.derivs.len();
    let mut s = 0.0;
    for j in 0..n {
        s += weight(j) * x.value(table.points[j + 1]) / table.derivs[j];
    }
    (s, n)
}

/// Deformation given either as `v` or as `X` with `v = X∘f`.
#[derive(Clone)]
pub enum Deformation {
    V(Fun),
    X(Fun),
}

/// Computes the horizontality report. `J` needs `dec`; requesting it without one fails.
pub fn horizontality(
    map: &UnimodalMap,
    class: Option<OrbitClass>,
    deformation: &Deformation,
    dec: Option<&DensityDecomposition>,
    want_j: bool,
    depth: Option<usize>,
) -> Result<HorizontalityReport> {
    if want_j && dec.is_none() {
        return Err(Error::MissingDecomposition);
    }
    let ec = expansion_constants(map)?;
    let lam = ec.lambda_hat;
    let class = class.or(dec.map(|d| d.orbit_class));
    let (xfun, vfun): (Option<Fun>, Fun) = match deformation {
        Deformation::V(v) => (None, v.clone()),
        Deformation::X(x) => (Some(x.clone()), compose_with_map(map, x.clone())),
    };
    let sup_v = sup_on(map, vfun.as_ref());
    let depth = depth.unwrap_or_else(|| default_depth(sup_v, lam));
    let table = OrbitTable::new(map, class, depth + 2)?;
    let m_f = table.class.m_f;
    let finite = table.hit().is_some();
    let truncated = table.derivs.len().min(depth + 1);
    let geom = |k: usize| lam.powi(k as i32) / (1.0 - lam);

    // The defect in terms of v: Σ v(c_j)/(f^j)'(c_1), j from 0.
    let mut defect = 0.0;
    for j in 0..truncated {
        defect += vfun.value(table.points[j]) / table.derivs[j];
    }
    let defect_tail = if finite { 0.0 } else { sup_v * geom(truncated) };

    let (abelian2, abelian2_tail) = match &xfun {
        Some(x) => {
            let sup_x = sup_on(map, x.as_ref());
            let (s, _) = orbit_sum(&table, x.as_ref(), |j| j as f64);
            let n = truncated as f64;
            let tail = if finite {
                0.0
            } else {
                sup_x * lam.powi(truncated as i32) * (n / (1.0 - lam) + lam / (1.0 - lam).powi(2))
            };
            (s, tail)
        }
        None => (f64::NAN, f64::INFINITY),
    };

    let mut j = None;
    let mut j_tail = 0.0;
    let mut j_closed = None;
    let mut j_closed_tail = 0.0;
    let mut x_minus_alpha = None;
    if let Some(x) = &xfun {
        let sol = solve_tce(map, vfun.clone(), 0.0, Some(depth))?;
        let c1 = table.points[1];
        let xa = x.value(c1) - sol.eval(c1);
        x_minus_alpha = Some(xa);
        if let Some(d) = dec {
            let s1 = d.s[0];
            j_closed = Some(s1 * xa);
            j_closed_tail = s1.abs() * sol.tail_bound;
            let pts = &d.anchors.points;
            j = Some(d.s.iter().zip(pts).map(|(s, &c)| s * x.value(c)).sum());
            if d.anchors.closure == crate::jumpspace::Closure::Open {
                let last = d.s.last().copied().unwrap_or(0.0).abs();
                j_tail = last * sup_on(map, x.as_ref()) * lam / (1.0 - lam);
            }
        }
    }
    Ok(HorizontalityReport {
        defect,
        defect_tail,
        j,
        j_tail,
        j_closed,
        j_closed_tail,
        abelian2,
        abelian2_tail,
        x_minus_alpha,
        m_f,
        terms: truncated,
        lambda_hat: lam,
    })
}

/// Result of projecting `X` onto the kernel of the horizontality functional.
#[derive(Clone)]
pub struct Projection {
    pub x_h: Fun,
    pub coefficient: f64,
    pub defect_x: f64,
    pub defect_bump: f64,
    pub bump: Fun,
}

impl std::fmt::Debug for Projection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Projection")
            .field("coefficient", &self.coefficient)
            .field("defect_x", &self.defect_x)
            .field("defect_bump", &self.defect_bump)
            .finish()
    }
}

/// Default bump: cubic spline centered at `c_1`, vanishing at `a`.
pub fn default_bump(map: &UnimodalMap) -> Expr {
    let c1 = map.critical_value();
    let hw = (0.25 * (map.b - map.a)).min(0.999 * (c1 - map.a));
    Expr::Bump { center: c1, half_width: hw, height: 1.0 }
}

fn defect_of_x(map: &UnimodalMap, class: Option<OrbitClass>, x: &Fun, depth: Option<usize>) -> Result<f64> {
    Ok(horizontality(map, class, &Deformation::X(x.clone()), None, false, depth)?.defect)
}

/// `X_h = X − (defect(X∘f)/defect(bump∘f))·bump`.
pub fn horizontal_projection(
    map: &UnimodalMap,
    class: Option<OrbitClass>,
    x: Fun,
    bump: Option<Fun>,
    depth: Option<usize>,
) -> Result<Projection> {
    let bump = bump.unwrap_or_else(|| default_bump(map).into_fun());
    let defect_bump = defect_of_x(map, class, &bump, depth)?;
    if defect_bump.abs() < 1e-10 {
        return Err(Error::DegenerateBump(defect_bump));
    }
    let defect_x = defect_of_x(map, class, &x, depth)?;
    let coefficient = defect_x / defect_bump;
    let x_h: Fun = Arc::new(LinComb { f: x, g: bump.clone(), coef: -coefficient });
    Ok(Projection { x_h, coefficient, defect_x, defect_bump, bump })
}

/// One finite-difference sample of the critical-orbit derivative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdSample {
    pub t: f64,
    pub quotient: f64,
    pub error: f64,
    /// `|t| 6 Y^2 |(f^k)'(c_1)|`.
    pub bound: f64,
    /// Horizon `M(t)`.
    pub horizon: i64,
    pub within_bound: bool,
}

/// `β_k` with the recursion check, finite differences and horizons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitDerivativeReport {
    pub k: usize,
    /// `beta[i] = β_{i+1}` from the closed sum.
    pub beta: Vec<f64>,
    /// Max over `i` of `|β_{i+1} − f'(c_i)β_i − X(c_{i+1})| / max(1, |β_{i+1}|)`.
    pub twisted_residual: f64,
    pub y_const: f64,
    pub gamma: f64,
    pub samples: Vec<FdSample>,
    /// Ratios of consecutive errors divided by ratios of `t`; near 1 for linear convergence.
    pub linear_rates: Vec<f64>,
}

/// Parameter derivatives `β_i` of `c_{i,t}` for `i ≤ k`, checked against the family.
///
/// `family(t)` must return `f_t` with the same turning point; `v` defaults to `X∘f`.
pub fn orbit_derivative(
    map: &UnimodalMap,
    family: &(dyn Fn(f64) -> Result<UnimodalMap> + Sync),
    x: &Fun,
    v: Option<Fun>,
    k: usize,
    ts: &[f64],
) -> Result<OrbitDerivativeReport> {
    let k = k.max(1);
    let table = OrbitTable::new(map, None, k + 1)?;
    if let Some(h) = table.hit() {
        if h <= k {
            return Err(Error::OrbitHitsCritical(h));
        }
    }
    let c = &table.points;
    // (f^j)'(c_{i}) = Π_{m=i}^{i+j-1} f'(c_m).
    let mut beta = Vec::with_capacity(k);
    for i in 1..=k {
        let mut s = 0.0;
        for j in 0..i {
            let start = i - j;
            let d: f64 = (start..i).map(|m| map.df(c[m], 1)).product();
            s += x.value(c[start]) * d;
        }
        beta.push(s);
    }
    let mut twisted_residual: f64 = 0.0;
    for i in 1..k {
        let r = beta[i] - map.df(c[i], 1) * beta[i - 1] - x.value(c[i + 1]);
        twisted_residual = twisted_residual.max(r.abs() / beta[i].abs().max(1.0));
    }

    let ec = expansion_constants(map)?;
    let v = v.unwrap_or_else(|| compose_with_map(map, x.clone()));
    let maps: Vec<(f64, UnimodalMap)> = ts.iter().map(|&t| family(t).map(|g| (t, g))).collect::<Result<_>>()?;
    let n = 1024;
    let mut g_sup: f64 = 0.0;
    for (t, g) in &maps {
        for i in 0..=n {
            let y = map.a + (map.b - map.a) * i as f64 / n as f64;
            g_sup = g_sup.max(((g.f(y) - map.f(y)) / t - v.value(y)).abs());
        }
    }
    let y_const =
        g_sup.max(map.second_derivative_sup(2048)).max(sup_on(map, x.as_ref()) / (1.0 - ec.lambda_hat)).max(1.0);
    let gamma = c[1..].iter().map(|p| (p - map.c).abs()).fold(f64::INFINITY, f64::min);
    let threshold = if gamma > 1e-6 { gamma / 2.0 } else { 1.0 };
    let long = OrbitTable::new(map, None, 400)?;

    let dk = table.derivs[k].abs();
    let mut samples = Vec::new();
    for (t, g) in &maps {
        let mut y = g.c;
        for _ in 0..k {
            y = g.f(y);
        }
        let quotient = (y - c[k]) / t;
        let error = (quotient - beta[k - 1]).abs();
        let bound = t.abs() * 6.0 * y_const * y_const * dk;
        let mut horizon: i64 = 0;
        for (m, d) in long.derivs.iter().enumerate() {
            if 6.0 * y_const.powi(3) * t.abs() * d.abs() < threshold {
                horizon = m as i64;
            } else {
                break;
            }
        }
        samples.push(FdSample { t: *t, quotient, error, bound, horizon, within_bound: error <= bound });
    }
    let linear_rates = samples.windows(2).map(|w| (w[0].error / w[1].error) / (w[0].t / w[1].t).abs()).collect();
    Ok(OrbitDerivativeReport { k, beta, twisted_residual, y_const, gamma, samples, linear_rates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transfer::{invariant_decomposition, DensityOptions};

    fn x_half() -> Fun {
        Expr::poly(&[0.0, 0.5]).into_fun()
    }

    #[test]
    fn tent2_alpha_at_c1_vanishes() {
        let m = UnimodalMap::tent(2.0).unwrap();
        let v = compose_with_map(&m, x_half());
        let sol = solve_tce(&m, v, 0.0, Some(60)).unwrap();
        assert!(sol.eval(1.0).abs() < 1e-15);
        assert!(sol.eval(0.0).abs() < 1e-15);
    }

    #[test]
    fn residual_within_bound() {
        let m = UnimodalMap::tent(1.9).unwrap();
        let x = Expr::poly(&[0.0, 0.3, -0.7, 0.2]).into_fun();
        let sol = solve_tce(&m, compose_with_map(&m, x), 0.0, Some(40)).unwrap();
        let bound = sol.residual_bound();
        for i in 0..1000 {
            let y = (i as f64 + 0.37) / 1000.0;
            assert!(sol.residual(y).abs() <= bound, "{y}: {} > {bound}", sol.residual(y));
        }
    }

    #[test]
    fn depths_agree_within_tail() {
        let m = UnimodalMap::tent(1.9).unwrap();
        let v: Fun = Expr::Sin { amp: 1.0, freq: 3.0, phase: 0.1 }.into_fun();
        let a = solve_tce(&m, v.clone(), 0.0, Some(30)).unwrap();
        let b = solve_tce(&m, v, 0.0, Some(40)).unwrap();
        for &y in &[0.1, 0.33, 0.71, 0.9] {
            assert!((a.eval(y) - b.eval(y)).abs() <= a.tail_bound);
        }
    }

    #[test]
    fn omega_branch_on_hitting_orbit() {
        // For tent(2), x = 1/4 maps to c after one step.
        let m = UnimodalMap::tent(2.0).unwrap();
        let v: Fun = Expr::poly(&[0.2, 1.0]).into_fun();
        let sol = solve_tce(&m, v.clone(), 0.7, Some(50)).unwrap();
        let x = 0.25;
        let expect = 0.7 / 2.0 - v.value(x) / 2.0;
        assert!((sol.eval(x) - expect).abs() < 1e-15);
        assert!((sol.eval(0.5) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn tent2_horizontality_report() {
        let m = UnimodalMap::tent(2.0).unwrap();
        let dec = invariant_decomposition(&m, &DensityOptions { n: 1024, ..Default::default() }).unwrap();
        let r = horizontality(&m, None, &Deformation::X(x_half()), Some(&dec), true, Some(60)).unwrap();
        assert!((r.defect - 0.5).abs() < 1e-12, "{}", r.defect);
        assert!((r.j.unwrap() + 0.5).abs() < 1e-3);
        assert!((r.j_closed.unwrap() + 0.5).abs() < 1e-3);
        assert!((r.x_minus_alpha.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_decomposition() {
        let m = UnimodalMap::tent(2.0).unwrap();
        let e = horizontality(&m, None, &Deformation::X(x_half()), None, true, None).unwrap_err();
        assert_eq!(e, Error::MissingDecomposition);
    }

    #[test]
    fn zero_deformation_is_horizontal() {
        let m = UnimodalMap::tent(1.9).unwrap();
        let r = horizontality(&m, None, &Deformation::V(Expr::zero().into_fun()), None, false, None).unwrap();
        assert_eq!(r.defect, 0.0);
    }

    #[test]
    fn projection_kills_defect() {
        let m = UnimodalMap::tent(2.0).unwrap();
        let p = horizontal_projection(&m, None, x_half(), None, Some(60)).unwrap();
        let d = defect_of_x(&m, None, &p.x_h, Some(60)).unwrap();
        assert!(d.abs() < 1e-10, "{d}");
        assert!(p.x_h.value(0.0).abs() < 1e-15);
        let q = horizontal_projection(&m, None, p.x_h.clone(), None, Some(60)).unwrap();
        assert!(q.coefficient.abs() < 1e-10);
    }

    #[test]
    fn degenerate_bump() {
        let m = UnimodalMap::tent(2.0).unwrap();
        let e = horizontal_projection(&m, None, x_half(), Some(Expr::zero().into_fun()), None).unwrap_err();
        assert!(matches!(e, Error::DegenerateBump(_)));
    }

    #[test]
    fn periodic_defect_is_finite_sum() {
        let m = UnimodalMap::tent(UnimodalMap::golden_mean()).unwrap();
        let r =
            horizontality(&m, None, &Deformation::X(Expr::poly(&[0.0, 1.0]).into_fun()), None, false, None).unwrap();
        assert_eq!(r.m_f, Some(3));
        assert_eq!(r.terms, 3);
        assert_eq!(r.defect_tail, 0.0);
    }

    #[test]
    fn beta_recursion_and_fd() {
        let s0 = 1.9;
        let m = UnimodalMap::tent(s0).unwrap();
        let x = Expr::poly(&[0.0, 1.0 / s0]).into_fun();
        let fam = |t: f64| UnimodalMap::tent(s0 + t);
        let r = orbit_derivative(&m, &fam, &x, None, 5, &[1e-3, 1e-4, 1e-5]).unwrap();
        assert!((r.beta[0] - x.value(m.critical_value())).abs() < 1e-15);
        assert!(r.twisted_residual < 1e-12);
        assert!(r.samples.iter().all(|s| s.within_bound));
        assert!(r.samples[2].error < r.samples[0].error);
        let long = orbit_derivative(&m, &fam, &x, None, 30, &[1e-9]).unwrap();
        assert!(long.twisted_residual < 1e-12);
    }
}
