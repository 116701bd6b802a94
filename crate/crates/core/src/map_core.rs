//! Piecewise expanding unimodal maps, inverse branches and the critical orbit.

use crate::error::{Error, Result};
use crate::func::poly_eval;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

/// One monotone branch of a unimodal map.
pub trait Branch: Send + Sync {
    /// Value or derivative (orders 0 to 3).
    fn eval(&self, x: f64, order: usize) -> f64;

    /// Closed-form inverse when the branch has one.
    fn inverse(&self, _y: f64) -> Option<f64> {
        None
    }

    /// True when the branch is affine.
    fn is_affine(&self) -> bool {
        false
    }
}

/// Polynomial branch, coefficients in ascending powers.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyBranch(pub Vec<f64>);

impl Branch for PolyBranch {
    fn eval(&self, x: f64, order: usize) -> f64 {
        poly_eval(&self.0, x, order)
    }

    fn inverse(&self, y: f64) -> Option<f64> {
        if self.is_affine() {
            let c0 = self.0.first().copied().unwrap_or(0.0);
            let c1 = self.0.get(1).copied().unwrap_or(0.0);
            Some((y - c0) / c1)
        } else {
            None
        }
    }

    fn is_affine(&self) -> bool {
        self.0.iter().skip(2).all(|c| *c == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Auto,
}

/// Inverse branch selector: `Plus` lands in `[a, c]`, `Minus` in `[c, b]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Plus,
    Minus,
}

/// Map description as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MapSpec {
    Named(NamedMap),
    Poly { a: f64, b: f64, c: f64, left: PolySpec, right: PolySpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolySpec {
    pub poly: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NamedMap {
    /// `s * min(x, 1 - x)` on [0, 1].
    Tent { slope: f64 },
    /// Slopes `left_slope` and `-right_slope`, turning point where the branches meet.
    SkewTent { left_slope: f64, right_slope: f64 },
    /// Symmetric map with left branch `slope * x + curvature * x^2`.
    SmoothTent { slope: f64, curvature: f64 },
}

/// A piecewise expanding unimodal map on `[a, b]` with turning point `c`.
///
/// The left branch increases on `[a, c]`, the right branch decreases on `[c, b]`,
/// `f(a) = f(b) = a` and `|f'| > 1`. Maps are immutable and cheap to clone.
#[derive(Clone)]
pub struct UnimodalMap {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    left: Arc<dyn Branch>,
    right: Arc<dyn Branch>,
    spec: Option<MapSpec>,
    label: String,
}

impl fmt::Debug for UnimodalMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UnimodalMap")
            .field("label", &self.label)
            .field("a", &self.a)
            .field("b", &self.b)
            .field("c", &self.c)
            .finish()
    }
}

/// Relative tolerance for the endpoint and continuity checks.
const VALIDATION_TOL: f64 = 1e-9;

impl UnimodalMap {
    /// Builds and validates a map from two branches.
    pub fn new(a: f64, b: f64, c: f64, left: Arc<dyn Branch>, right: Arc<dyn Branch>) -> Result<Self> {
        let map = UnimodalMap { a, b, c, left, right, spec: None, label: "custom".into() };
        map.validate()?;
        Ok(map)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn spec(&self) -> Option<&MapSpec> {
        self.spec.as_ref()
    }

    pub fn from_spec(spec: &MapSpec) -> Result<Self> {
        let mut map = match spec {
            MapSpec::Named(NamedMap::Tent { slope }) => {
                if !(*slope > 1.0 && *slope <= 2.0) {
                    return Err(Error::InvalidMap(format!("tent slope {slope} outside (1, 2]")));
                }
                Self::new(
                    0.0,
                    1.0,
                    0.5,
                    Arc::new(PolyBranch(vec![0.0, *slope])),
                    Arc::new(PolyBranch(vec![*slope, -*slope])),
                )?
                .with_label(format!("tent({slope})"))
            }
            MapSpec::Named(NamedMap::SkewTent { left_slope, right_slope }) => {
                let c = right_slope / (left_slope + right_slope);
                Self::new(
                    0.0,
                    1.0,
                    c,
                    Arc::new(PolyBranch(vec![0.0, *left_slope])),
                    Arc::new(PolyBranch(vec![*right_slope, -*right_slope])),
                )?
                .with_label(format!("skew_tent({left_slope},{right_slope})"))
            }
            MapSpec::Named(NamedMap::SmoothTent { slope, curvature }) => {
                let (s, q) = (*slope, *curvature);
                // Right branch is the mirror image x -> 1 - x of the left one.
                Self::new(
                    0.0,
                    1.0,
                    0.5,
                    Arc::new(PolyBranch(vec![0.0, s, q])),
                    Arc::new(PolyBranch(vec![s + q, -s - 2.0 * q, q])),
                )?
                .with_label(format!("smooth_tent({s},{q})"))
            }
            MapSpec::Poly { a, b, c, left, right } => Self::new(
                *a,
                *b,
                *c,
                Arc::new(PolyBranch(left.poly.clone())),
                Arc::new(PolyBranch(right.poly.clone())),
            )?,
        };
        map.spec = Some(spec.clone());
        Ok(map)
    }

    pub fn tent(slope: f64) -> Result<Self> {
        Self::from_spec(&MapSpec::Named(NamedMap::Tent { slope }))
    }

    pub fn skew_tent(left_slope: f64, right_slope: f64) -> Result<Self> {
        Self::from_spec(&MapSpec::Named(NamedMap::SkewTent { left_slope, right_slope }))
    }

    pub fn smooth_tent(slope: f64, curvature: f64) -> Result<Self> {
        Self::from_spec(&MapSpec::Named(NamedMap::SmoothTent { slope, curvature }))
    }

    pub fn golden_mean() -> f64 {
        0.5 * (1.0 + 5f64.sqrt())
    }

    /// Tolerance below which an orbit point counts as hitting `c`.
    pub fn exact_hit_tol(&self) -> f64 {
        1e-12 * (self.b - self.a)
    }

    pub fn is_piecewise_linear(&self) -> bool {
        self.left.is_affine() && self.right.is_affine()
    }

    pub fn branch(&self, sign: Sign) -> &Arc<dyn Branch> {
        match sign {
            Sign::Plus => &self.left,
            Sign::Minus => &self.right,
        }
    }

    fn validate(&self) -> Result<()> {
        let (a, b, c) = (self.a, self.b, self.c);
        if !(a < c && c < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidMap(format!("need a < c < b, got {a}, {c}, {b}")));
        }
        let tol = VALIDATION_TOL * (b - a);
        let fa = self.left.eval(a, 0);
        let fb = self.right.eval(b, 0);
        if (fa - a).abs() > tol || (fb - a).abs() > tol {
            return Err(Error::InvalidMap(format!("f(a) = {fa}, f(b) = {fb}, expected {a}")));
        }
        let (lc, rc) = (self.left.eval(c, 0), self.right.eval(c, 0));
        if (lc - rc).abs() > tol {
            return Err(Error::InvalidMap(format!("branches disagree at c: {lc} vs {rc}")));
        }
        if lc > b + tol {
            return Err(Error::InvalidMap(format!("f(c) = {lc} leaves [a, b]")));
        }
        let n = 2048;
        let mut inf = f64::INFINITY;
        for i in 0..=n {
            let x = a + (c - a) * i as f64 / n as f64;
            let d = self.left.eval(x, 1);
            if d <= 0.0 {
                return Err(Error::InvalidMap(format!("left branch not increasing at {x}")));
            }
            inf = inf.min(d);
            let x = c + (b - c) * i as f64 / n as f64;
            let d = self.right.eval(x, 1);
            if d >= 0.0 {
                return Err(Error::InvalidMap(format!("right branch not decreasing at {x}")));
            }
            inf = inf.min(-d);
        }
        if inf <= 1.0 {
            return Err(Error::NotExpanding(inf));
        }
        Ok(())
    }

    /// Value or one-sided derivative of `f`.
    pub fn eval(&self, x: f64, order: usize, side: Side) -> Result<f64> {
        let tol = VALIDATION_TOL * (self.b - self.a);
        if x < self.a - tol || x > self.b + tol || !x.is_finite() {
            return Err(Error::OutOfDomain { x, a: self.a, b: self.b });
        }
        let br = match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
            Side::Auto => {
                if x == self.c && order >= 1 {
                    return Err(Error::AmbiguousSide);
                }
                if x <= self.c {
                    &self.left
                } else {
                    &self.right
                }
            }
        };
        Ok(br.eval(x, order))
    }

    /// `f(x)`, using the branch extensions outside `[a, b]`.
    #[inline]
    pub fn f(&self, x: f64) -> f64 {
        if x <= self.c {
            self.left.eval(x, 0)
        } else {
            self.right.eval(x, 0)
        }
    }

    /// Derivative of `f` of the given order; at `c` the left branch is used.
    #[inline]
    pub fn df(&self, x: f64, order: usize) -> f64 {
        if x <= self.c {
            self.left.eval(x, order)
        } else {
            self.right.eval(x, order)
        }
    }

    /// One-sided derivatives at the turning point, `(f'(c-), f'(c+))`.
    pub fn turning_slopes(&self) -> (f64, f64) {
        (self.left.eval(self.c, 1), self.right.eval(self.c, 1))
    }

    /// One-sided derivatives of order `order` at the turning point.
    pub fn turning_derivs(&self, order: usize) -> (f64, f64) {
        (self.left.eval(self.c, order), self.right.eval(self.c, order))
    }

    pub fn critical_value(&self) -> f64 {
        self.left.eval(self.c, 0)
    }

    /// Preimage of `y` on the chosen branch.
    pub fn inverse_branch(&self, y: f64, sign: Sign) -> Result<f64> {
        let fc = self.critical_value();
        let tol = VALIDATION_TOL * (self.b - self.a);
        if y > fc + tol {
            return Err(Error::AboveCriticalValue { y, max: fc });
        }
        Ok(self.inv(y.min(fc), sign))
    }

    /// Preimage of `y <= f(c)` without range checks.
    pub fn inv(&self, y: f64, sign: Sign) -> f64 {
        let br = self.branch(sign);
        if let Some(x) = br.inverse(y) {
            return x;
        }
        let (a, b, c) = (self.a, self.b, self.c);
        let w = b - a;
        // g is increasing in the search variable for both signs after orientation.
        let orient = if sign == Sign::Plus { 1.0 } else { -1.0 };
        let g = |x: f64| orient * (br.eval(x, 0) - y);
        let (mut lo, mut hi) = match sign {
            Sign::Plus => (a, c),
            Sign::Minus => (c, b),
        };
        // Extend the bracket when y lies below f(a) = f(b) = a.
        let mut ext = 0.25 * w;
        for _ in 0..40 {
            if g(lo) <= 0.0 {
                break;
            }
            if sign == Sign::Plus {
                lo -= ext;
            } else {
                lo = c;
                break;
            }
            ext *= 2.0;
        }
        let mut ext = 0.25 * w;
        for _ in 0..40 {
            if g(hi) >= 0.0 {
                break;
            }
            if sign == Sign::Minus {
                hi += ext;
            } else {
                hi = c;
                break;
            }
            ext *= 2.0;
        }
        let (glo, ghi) = (g(lo), g(hi));
        if glo == 0.0 {
            return lo;
        }
        if ghi == 0.0 {
            return hi;
        }
        // Safeguarded Newton: bisection whenever the Newton step leaves the bracket.
        let mut x = lo - glo * (hi - lo) / (ghi - glo);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        for _ in 0..60 {
            let gx = g(x);
            if gx == 0.0 {
                return x;
            }
            if gx < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let d = orient * br.eval(x, 1);
            let mut next = x - gx / d;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            let step = (next - x).abs();
            x = next;
            if step <= 1e-15 * w || hi - lo <= 1e-15 * w {
                break;
            }
        }
        x
    }

    /// Sampled bounds `(inf |f'|, sup |f'|)` over both branches, including endpoints.
    pub fn derivative_bounds(&self, samples: usize) -> (f64, f64) {
        let n = samples.max(2);
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..=n {
            let t = i as f64 / n as f64;
            for d in [
                self.left.eval(self.a + (self.c - self.a) * t, 1).abs(),
                self.right.eval(self.c + (self.b - self.c) * t, 1).abs(),
            ] {
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
        (lo, hi)
    }

    /// Sup of `|f''|` over both branches, sampled.
    pub fn second_derivative_sup(&self, samples: usize) -> f64 {
        let n = samples.max(2);
        (0..=n)
            .flat_map(|i| {
                let t = i as f64 / n as f64;
                [
                    self.left.eval(self.a + (self.c - self.a) * t, 2).abs(),
                    self.right.eval(self.c + (self.b - self.c) * t, 2).abs(),
                ]
            })
            .fold(0.0, f64::max)
    }
}

/// Points `c_k = f^k(c)` and cumulative derivatives `(f^k)'(c_1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalOrbit {
    /// `points[k] = c_k`, `k = 0..=horizon`.
    pub points: Vec<f64>,
    /// `cum_derivs[k] = (f^k)'(c_1)`, defined while the orbit avoids `c`.
    pub cum_derivs: Vec<f64>,
    pub horizon: usize,
    /// First `k >= 1` with `c_k = c`, if any.
    pub hits_critical: Option<usize>,
}

impl CriticalOrbit {
    /// `(f^k)'(c_1)`, failing once the orbit has passed through `c`.
    pub fn deriv(&self, k: usize) -> Result<f64> {
        self.cum_derivs.get(k).copied().ok_or(Error::OrbitHitsCritical(self.hits_critical.unwrap_or(k)))
    }

    pub fn point(&self, k: usize) -> f64 {
        self.points[k]
    }
}

/// Iterates the turning point `horizon` times.
pub fn critical_orbit(map: &UnimodalMap, horizon: usize) -> Result<CriticalOrbit> {
    if horizon < 1 {
        return Err(Error::InvalidMap("orbit horizon must be at least 1".into()));
    }
    let tol = map.exact_hit_tol();
    let mut points = Vec::with_capacity(horizon + 1);
    let mut cum = Vec::with_capacity(horizon);
    let mut hit = None;
    let mut x = map.c;
    points.push(x);
    cum.push(1.0);
    for k in 1..=horizon {
        x = map.f(x);
        if (x - map.c).abs() < tol {
            x = map.c;
            if hit.is_none() {
                hit = Some(k);
            }
        }
        points.push(x);
        if hit.is_none() && k < horizon {
            let d = cum[k - 1] * map.df(x, 1);
            cum.push(d);
        }
    }
    if let Some(k) = hit {
        cum.truncate(k);
    }
    Ok(CriticalOrbit { points, cum_derivs: cum, horizon, hits_critical: hit })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrbitKind {
    Periodic { n1: usize },
    Preperiodic { n0: usize, n1: usize },
    NoPeriodDetected { horizon: usize },
}

/// Orbit classification with `N_f` and `M_f`; `None` stands for infinity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrbitClass {
    pub kind: OrbitKind,
    pub n_f: Option<usize>,
    pub m_f: Option<usize>,
}

impl OrbitClass {
    pub fn is_periodic(&self) -> bool {
        matches!(self.kind, OrbitKind::Periodic { .. })
    }

    pub fn is_finite(&self) -> bool {
        self.n_f.is_some()
    }
}

/// `f64` ordered by `total_cmp`, for range queries in a `BTreeMap`.
#[derive(Clone, Copy, Debug)]
struct Key(f64);
impl PartialEq for Key {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other).is_eq()
    }
}
impl Eq for Key {}
impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Finds the first recurrence `c_{n0+n1} ≈ c_{n0}` within the horizon.
pub fn classify_orbit(orbit: &CriticalOrbit, tol: f64) -> OrbitClass {
    let pts = &orbit.points;
    let mut seen: BTreeMap<Key, usize> = BTreeMap::new();
    for (m, &x) in pts.iter().enumerate() {
        let hit = seen
            .range(Key(x - tol)..=Key(x + tol))
            .map(|(_, &j)| j)
            .filter(|&j| {
                // Confirm on the next few points to reject chance coincidences.
                (1..=3).all(|i| match (pts.get(m + i), pts.get(j + i)) {
                    (Some(p), Some(q)) => (p - q).abs() < tol,
                    _ => true,
                })
            })
            .min();
        if let Some(j) = hit {
            let n1 = m - j;
            return if j == 0 {
                OrbitClass { kind: OrbitKind::Periodic { n1 }, n_f: Some(n1), m_f: Some(n1) }
            } else {
                OrbitClass { kind: OrbitKind::Preperiodic { n0: j, n1 }, n_f: Some(j + n1 - 1), m_f: None }
            };
        }
        seen.insert(Key(x), m);
    }
    OrbitClass { kind: OrbitKind::NoPeriodDetected { horizon: orbit.horizon }, n_f: None, m_f: None }
}

/// Result of the "good map" test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodReport {
    pub good: bool,
    /// `inf |(f^{n1})'|` along the period when `c` is periodic.
    pub period_product: Option<f64>,
}

/// A map is good unless `c` is periodic with `inf |(f^{n1})'| <= 2`.
pub fn is_good(map: &UnimodalMap, orbit: &CriticalOrbit, class: &OrbitClass) -> GoodReport {
    match class.kind {
        OrbitKind::Periodic { n1 } => {
            let (l, r) = map.turning_slopes();
            let along: f64 = (1..n1).map(|k| map.df(orbit.points[k], 1).abs()).product();
            let p = along * l.abs().min(r.abs());
            GoodReport { good: p > 2.0, period_product: Some(p) }
        }
        _ => GoodReport { good: true, period_product: None },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConstants {
    /// Upper bound for the contraction rate of inverse branches, `1 / inf |f'|`.
    pub lambda_hat: f64,
    /// `sup |f'|`.
    pub big_lambda_hat: f64,
    /// True when the bounds are exact (affine branches).
    pub rigorous: bool,
}

/// Margin applied to sampled derivative bounds of curved branches.
pub const SAMPLING_MARGIN: f64 = 1.01;

pub fn expansion_constants(map: &UnimodalMap) -> Result<ExpansionConstants> {
    let (inf, sup) = map.derivative_bounds(8192);
    if inf <= 1.0 {
        return Err(Error::NotExpanding(inf));
    }
    let rigorous = map.is_piecewise_linear();
    let m = if rigorous { 1.0 } else { SAMPLING_MARGIN };
    let lambda_hat = (m / inf).min(1.0 - 1e-12);
    Ok(ExpansionConstants { lambda_hat, big_lambda_hat: sup * m, rigorous })
}

/// Optional `n`-step refinement: `sup_x |(f^n)'(x)|^{-1/n}` over a sample.
pub fn contraction_rate_n_step(map: &UnimodalMap, n: usize, samples: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..samples {
        let mut x = map.a + (map.b - map.a) * (i as f64 + 0.5) / samples as f64;
        let mut logd = 0.0;
        for _ in 0..n {
            logd += map.df(x, 1).abs().ln();
            x = map.f(x);
        }
        worst = worst.max((-logd / n as f64).exp());
    }
    worst
}

/// `theta^n + delta / (1 - theta)`.
pub fn itinerary_distance_bound(theta: f64, delta: f64, n: usize) -> f64 {
    theta.powi(n as i32) + delta / (1.0 - theta)
}

/// Outcome of comparing two orbits with a common itinerary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItineraryCheck {
    pub same_itinerary: bool,
    pub distance: f64,
    pub bound: f64,
}

/// Compares `x_f` under `f` with `x_g` under `g` for `n` steps.
pub fn itinerary_pair_check(f: &UnimodalMap, g: &UnimodalMap, x_f: f64, x_g: f64, n: usize) -> ItineraryCheck {
    let (inf_f, _) = f.derivative_bounds(2048);
    let (inf_g, _) = g.derivative_bounds(2048);
    let theta = 1.0 / inf_f.min(inf_g);
    let delta = (0..=4096)
        .map(|i| {
            let x = f.a + (f.b - f.a) * i as f64 / 4096.0;
            (f.f(x) - g.f(x)).abs()
        })
        .fold(0.0, f64::max);
    let (mut p, mut q) = (x_f, x_g);
    let mut same = true;
    for _ in 0..=n {
        if (p - f.c) * (q - g.c) < 0.0 {
            same = false;
            break;
        }
        p = f.f(p);
        q = g.f(q);
    }
    ItineraryCheck {
        same_itinerary: same,
        distance: (x_f - x_g).abs(),
        bound: itinerary_distance_bound(theta, delta, n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phi() -> f64 {
        UnimodalMap::golden_mean()
    }

    #[test]
    fn tent_values() {
        let t2 = UnimodalMap::tent(2.0).unwrap();
        assert_eq!(t2.eval(0.25, 0, Side::Auto).unwrap(), 0.5);
        assert_eq!(t2.eval(0.5, 1, Side::Left).unwrap(), 2.0);
        assert_eq!(t2.eval(0.5, 1, Side::Right).unwrap(), -2.0);
        let t19 = UnimodalMap::tent(1.9).unwrap();
        assert!((t19.eval(0.9, 0, Side::Auto).unwrap() - 0.19).abs() < 1e-15);
    }

    #[test]
    fn eval_errors() {
        let t2 = UnimodalMap::tent(2.0).unwrap();
        assert_eq!(t2.eval(0.5, 1, Side::Auto), Err(Error::AmbiguousSide));
        assert!(matches!(t2.eval(1.5, 0, Side::Auto), Err(Error::OutOfDomain { .. })));
        assert!(matches!(t2.inverse_branch(1.2, Sign::Plus), Err(Error::AboveCriticalValue { .. })));
    }

    #[test]
    fn inverse_branches() {
        let t2 = UnimodalMap::tent(2.0).unwrap();
        assert_eq!(t2.inverse_branch(0.5, Sign::Plus).unwrap(), 0.25);
        assert_eq!(t2.inverse_branch(0.5, Sign::Minus).unwrap(), 0.75);
        let tg = UnimodalMap::tent(phi()).unwrap();
        assert!((tg.inverse_branch(phi() / 2.0, Sign::Plus).unwrap() - 0.5).abs() < 1e-13);
    }

    #[test]
    fn inverse_of_curved_branches() {
        let m = UnimodalMap::smooth_tent(1.7, 0.4).unwrap();
        for i in 1..200 {
            let x = i as f64 / 200.0;
            if x == 0.5 {
                continue;
            }
            let y = m.f(x);
            let s = if x < 0.5 { Sign::Plus } else { Sign::Minus };
            let back = m.inverse_branch(y, s).unwrap();
            assert!((back - x).abs() < 1e-10, "{x} -> {y} -> {back}");
            assert!((m.f(back) - y).abs() < 1e-12);
        }
        // Below f(a): the extension to the left of a.
        let x = m.inv(-0.1, Sign::Plus);
        assert!(x < 0.0 && (m.f(x) + 0.1).abs() < 1e-12);
        let x = m.inv(-0.1, Sign::Minus);
        assert!(x > 1.0 && (m.f(x) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn orbits_and_classes() {
        let t2 = UnimodalMap::tent(2.0).unwrap();
        let o = critical_orbit(&t2, 50).unwrap();
        assert_eq!(&o.points[..4], &[0.5, 1.0, 0.0, 0.0]);
        let cl = classify_orbit(&o, 1e-9);
        assert_eq!(cl.kind, OrbitKind::Preperiodic { n0: 2, n1: 1 });
        assert_eq!(cl.n_f, Some(2));
        assert_eq!(cl.m_f, None);

        let tg = UnimodalMap::tent(phi()).unwrap();
        let o = critical_orbit(&tg, 50).unwrap();
        assert!((o.points[1] - 0.809_016_994_374_947_4).abs() < 1e-12);
        assert!((o.points[2] - 0.309_016_994_374_947_4).abs() < 1e-12);
        assert_eq!(o.points[3], 0.5);
        assert_eq!(o.hits_critical, Some(3));
        assert!(o.deriv(3).is_err());
        let cl = classify_orbit(&o, 1e-9);
        assert_eq!(cl.kind, OrbitKind::Periodic { n1: 3 });
        assert_eq!((cl.n_f, cl.m_f), (Some(3), Some(3)));

        let tr = UnimodalMap::tent(2f64.sqrt()).unwrap();
        let o = critical_orbit(&tr, 50).unwrap();
        assert!((o.points[3] - (2.0 - 2f64.sqrt())).abs() < 1e-12);
        assert!((o.points[4] - o.points[3]).abs() < 1e-12);
        assert_eq!(classify_orbit(&o, 1e-9).kind, OrbitKind::Preperiodic { n0: 3, n1: 1 });
    }

    #[test]
    fn generic_slope_has_no_detected_period() {
        let t = UnimodalMap::tent(1.9).unwrap();
        let o = critical_orbit(&t, 10_000).unwrap();
        let cl = classify_orbit(&o, 1e-9);
        assert_eq!(cl.kind, OrbitKind::NoPeriodDetected { horizon: 10_000 });
        assert_eq!(cl.n_f, None);
    }

    #[test]
    fn goodness() {
        let tg = UnimodalMap::tent(phi()).unwrap();
        let o = critical_orbit(&tg, 20).unwrap();
        let g = is_good(&tg, &o, &classify_orbit(&o, 1e-9));
        assert!(g.good);
        assert!((g.period_product.unwrap() - phi().powi(3)).abs() < 1e-12);

        // Cubic branches with a period-three turning point whose slopes along the
        // cycle multiply to 1.9: expanding everywhere, but not good.
        let m = UnimodalMap::from_spec(&MapSpec::Poly {
            a: 0.0,
            b: 1.0,
            c: 0.5,
            left: PolySpec {
                poly: vec![0.0, 2.584_017_959_345_207_4, -3.748_054_968_491_888, 3.203_465_785_035_801_5],
            },
            right: PolySpec {
                poly: vec![
                    3.779_604_711_822_367,
                    -10.371_972_796_668_969,
                    10.702_113_092_683_192,
                    -4.109_745_007_836_59,
                ],
            },
        })
        .unwrap();
        let o = critical_orbit(&m, 20).unwrap();
        let cl = classify_orbit(&o, 1e-9);
        assert_eq!(cl.kind, OrbitKind::Periodic { n1: 3 });
        let g = is_good(&m, &o, &cl);
        assert!(!g.good, "{g:?}");
        assert!((g.period_product.unwrap() - 1.9).abs() < 1e-9);
    }

    #[test]
    fn expansion() {
        let e = expansion_constants(&UnimodalMap::tent(2.0).unwrap()).unwrap();
        assert_eq!((e.lambda_hat, e.big_lambda_hat), (0.5, 2.0));
        let e = expansion_constants(&UnimodalMap::tent(phi()).unwrap()).unwrap();
        assert!((e.lambda_hat - 1.0 / phi()).abs() < 1e-15);
        let e = expansion_constants(&UnimodalMap::smooth_tent(1.7, 0.4).unwrap()).unwrap();
        assert!((e.lambda_hat - 1.01 / 1.7).abs() < 1e-12);
        assert!((e.big_lambda_hat - 2.1 * 1.01).abs() < 1e-12);
        assert!(!e.rigorous);
        let r = contraction_rate_n_step(&UnimodalMap::tent(1.9).unwrap(), 5, 100);
        assert!((r - 1.0 / 1.9).abs() < 1e-12);
    }

    #[test]
    fn itinerary_bound_values() {
        assert!((itinerary_distance_bound(0.5, 0.0, 10) - 9.765_625e-4).abs() < 1e-15);
        assert!((itinerary_distance_bound(0.5, 0.01, 0) - 1.02).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_maps() {
        assert!(UnimodalMap::tent(0.9).is_err());
        let r = MapSpec::Poly {
            a: 0.0,
            b: 1.0,
            c: 0.5,
            left: PolySpec { poly: vec![0.0, 1.1] },
            right: PolySpec { poly: vec![1.1, -1.1] },
        };
        assert!(UnimodalMap::from_spec(&r).is_ok());
        let bad = MapSpec::Poly {
            a: 0.0,
            b: 1.0,
            c: 0.5,
            left: PolySpec { poly: vec![0.0, 0.9] },
            right: PolySpec { poly: vec![0.9, -0.9] },
        };
        assert!(matches!(UnimodalMap::from_spec(&bad), Err(Error::NotExpanding(_))));
    }

    #[test]
    fn spec_json_formats() {
        let s: MapSpec = serde_json::from_str(r#"{"family":"tent","slope":1.9}"#).unwrap();
        assert_eq!(s, MapSpec::Named(NamedMap::Tent { slope: 1.9 }));
        let s: MapSpec = serde_json::from_str(
            r#"{"a":0,"b":1,"c":0.5,"left":{"poly":[0,1.7,0.4]},"right":{"poly":[2.1,-2.5,0.4]}}"#,
        )
        .unwrap();
        let m = UnimodalMap::from_spec(&s).unwrap();
        let sm = UnimodalMap::smooth_tent(1.7, 0.4).unwrap();
        for x in [0.1, 0.3, 0.7, 0.95] {
            assert!((m.f(x) - sm.f(x)).abs() < 1e-15);
        }
    }
}
