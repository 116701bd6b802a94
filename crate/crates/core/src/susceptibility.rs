//! Susceptibility function `Ψ(z)`, its resummation `Ψ₁` and the identities around it.

use crate::error::{Error, Result};
use crate::func::{extrapolate_to_zero, Fun, RealFn};
use crate::jumpspace::{Anchors, Closure, GridFunction, JumpFunction, Regular, TransferPlan};
use crate::map_core::{expansion_constants, OrbitKind, UnimodalMap};
use crate::tce::{compose_with_map, solve_tce, sup_on, OrbitTable, TceSolution};
use crate::transfer::{
    fixed_vector, invariant_decomposition, neumann_solve, spectral_gap_estimate, ulam_matrix, DensityDecomposition,
    DensityOptions, NeumannOptions,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Map, density decomposition and the cached operators shared by the computations below.
pub struct Setup {
    pub map: UnimodalMap,
    pub dec: DensityDecomposition,
    pub plan: TransferPlan,
    /// `ρ₀` normalized to unit mass.
    pub rho0: JumpFunction,
    pub tau_hat: f64,
    pub neumann: NeumannOptions,
}

impl Setup {
    /// Builds the operator cache; `τ̂` comes from the Ulam matrix at (at most) 4096 cells.
    pub fn new(map: &UnimodalMap, dec: DensityDecomposition) -> Result<Self> {
        let n = dec.grid().n.min(4096);
        let op = ulam_matrix(map, n)?;
        let fv = fixed_vector(&op, 1e-13, 50_000)?;
        let gap = spectral_gap_estimate(&op, &fv.masses, 20_000)?;
        Ok(Self::with_tau(map, dec, gap.tau))
    }

    pub fn with_tau(map: &UnimodalMap, dec: DensityDecomposition, tau_hat: f64) -> Self {
        let plan = TransferPlan::new(map, dec.grid(), dec.anchors.clone());
        let rho = dec.density();
        let rho0 = rho.scale(1.0 / rho.integral());
        Setup { map: map.clone(), dec, plan, rho0, tau_hat, neumann: NeumannOptions::default() }
    }

    pub fn from_options(map: &UnimodalMap, opts: &DensityOptions) -> Result<Self> {
        Self::new(map, invariant_decomposition(map, opts)?)
    }

    pub fn anchors(&self) -> &Arc<Anchors> {
        &self.dec.anchors
    }

    /// `J(f, X) = Σ s_k X(c_k)`.
    pub fn weighted_jump(&self, x: &dyn RealFn) -> f64 {
        self.dec.s.iter().zip(&self.anchors().points).map(|(s, &p)| s * x.value(p)).sum()
    }

    /// `∫ φ ρ₀ dx`.
    pub fn mean(&self, phi: &dyn RealFn) -> f64 {
        self.rho0.pair(&|y| phi.value(y))
    }
}

/// `H_p(x)`: `-1` left of `p`, `0` right of it, `-1/2` at `p`.
#[inline]
pub(crate) fn heaviside(x: f64, p: f64) -> f64 {
    if x < p {
        -1.0
    } else if x == p {
        -0.5
    } else {
        0.0
    }
}

/// `g · Γ(φ)` with an exact pointwise regular part `g·φ_reg + Σ u_k (g − g(c_k)) H_{c_k}`.
pub fn product(phi: &JumpFunction, g: Fun) -> JumpFunction {
    let pts = phi.anchors().points.clone();
    let u = phi.jumps().to_vec();
    let gk: Vec<f64> = pts.iter().map(|&p| g.value(p)).collect();
    let jumps = gk.iter().zip(&u).map(|(a, b)| a * b).collect();
    let reg = phi.regular().clone();
    let rule = move |x: f64| {
        let gx = g.value(x);
        let mut v = gx * reg.eval(x);
        for k in 0..pts.len() {
            v += u[k] * (gx - gk[k]) * heaviside(x, pts[k]);
        }
        v
    };
    JumpFunction::new(Regular::Pointwise(Arc::new(rule)), jumps, phi.anchors().clone(), phi.eta())
        .expect("lengths agree")
}

/// `g'ρ₀ + g ρ'_reg` on the decomposition grid, with jumps `g'(c_k)s_k + g(c_k)s'_k`.
///
/// `ρ'_reg` is a central difference of `ρ_reg` with the kink contributions `s'_k`
/// removed from the cells that straddle an anchor.
pub fn derivative_product(dec: &DensityDecomposition, g: &Fun) -> JumpFunction {
    let grid = dec.grid();
    let n = grid.n;
    let rr = &dec.rho_reg.values;
    let pts = &dec.anchors.points;
    let s = &dec.s;
    let sp = &dec.s_prime;
    let g0k: Vec<f64> = pts.iter().map(|&p| g.eval(p, 0)).collect();
    let g1k: Vec<f64> = pts.iter().map(|&p| g.eval(p, 1)).collect();
    let values = (0..=n)
        .into_par_iter()
        .map(|i| {
            let x = grid.node(i);
            let (lo, hi) = (i.saturating_sub(1), (i + 1).min(n));
            let (l, r) = (grid.node(lo), grid.node(hi));
            let mut dreg = (rr[hi] - rr[lo]) / (r - l);
            for k in 0..pts.len() {
                let frac = ((pts[k] - l) / (r - l)).clamp(0.0, 1.0);
                dreg += sp[k] * frac;
            }
            let (gx, g1x) = (g.eval(x, 0), g.eval(x, 1));
            let mut v = g1x * rr[i] + gx * dreg;
            for k in 0..pts.len() {
                let hk = heaviside(x, pts[k]);
                v += (s[k] * (g1x - g1k[k]) + sp[k] * (gx - g0k[k])) * hk;
            }
            v
        })
        .collect();
    let jumps = (0..pts.len()).map(|k| g1k[k] * s[k] + g0k[k] * sp[k]).collect();
    JumpFunction::new(Regular::Grid(GridFunction { grid, values }), jumps, dec.anchors.clone(), dec.eta)
        .expect("lengths agree")
}

/// `X' ρ_sal` as a jump-space element.
fn derivative_times_saltus(dec: &DensityDecomposition, x: &Fun) -> JumpFunction {
    let pts = dec.anchors.points.clone();
    let s = dec.s.clone();
    let x1k: Vec<f64> = pts.iter().map(|&p| x.eval(p, 1)).collect();
    let jumps = x1k.iter().zip(&s).map(|(a, b)| a * b).collect();
    let xf = x.clone();
    let rule = move |y: f64| {
        let d = xf.eval(y, 1);
        (0..pts.len()).map(|k| s[k] * (d - x1k[k]) * heaviside(y, pts[k])).sum()
    };
    JumpFunction::new(Regular::Pointwise(Arc::new(rule)), jumps, dec.anchors.clone(), dec.eta)
        .expect("lengths agree")
        .on_grid(dec.grid())
}

/// Index where the postcritical orbit enters its cycle, for Markov maps.
fn cycle_start(kind: OrbitKind) -> Option<(usize, usize)> {
    match kind {
        OrbitKind::Periodic { n1 } => Some((1, n1)),
        OrbitKind::Preperiodic { n0, n1 } => Some((n0, n1)),
        OrbitKind::NoPeriodDetected { .. } => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psi1Tails {
    pub term1: f64,
    pub term1_alpha: f64,
    pub term2: f64,
}

/// Both routes to `Ψ₁`, evaluated on the centered observable `φ − ∫φρ₀`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psi1Report {
    pub term1: f64,
    pub term2: f64,
    pub psi1: f64,
    pub psi1_alpha: f64,
    /// `∫ φ' α ρ₀ dx` with the series `α`; equal to `psi1` only when `α` is absolutely continuous.
    pub psi1_elegant: Option<f64>,
    pub tail_bounds: Psi1Tails,
    /// `∫ φ ρ₀ dx`, subtracted from `φ` before evaluation.
    pub phi_mean: f64,
    /// Same formulas applied to `φ` without centering.
    pub psi1_uncentered: f64,
    pub psi1_alpha_uncentered: f64,
    /// Markov maps only: the formula centered by the cycle average of `φ` instead of `∫φρ₀`.
    /// This is the value `Ψ(z)` tends to as `z ↑ 1`.
    pub psi1_orbit_centered: Option<f64>,
    #[serde(rename = "J")]
    pub j: f64,
    pub eta_mean: f64,
    pub neumann_terms: usize,
    pub term1_terms: usize,
    pub tau_hat: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Psi1Options {
    /// Largest `|J|` accepted as horizontal.
    pub j_tol: f64,
    /// Truncation target for the postcritical sum.
    pub trunc_tol: f64,
    pub elegant: bool,
}

impl Default for Psi1Options {
    fn default() -> Self {
        Psi1Options { j_tol: 1e-6, trunc_tol: 1e-13, elegant: true }
    }
}

/// Partial sums `S_j = s₁ Σ_{k≤min(j,M_f)} X(c_k)/(f^{k-1})'(c₁)` for `j = 1..=len`.
fn orbit_partial_sums(table: &OrbitTable, s1: f64, x: &dyn RealFn, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut acc = 0.0;
    for j in 1..=len {
        if let Some(d) = table.derivs.get(j - 1) {
            acc += s1 * x.value(table.points[j]) / d;
        }
        out.push(acc);
    }
    out
}

/// `Ψ₁` by the postcritical-sum formula and by the `α` formula.
pub fn psi1(setup: &Setup, x: &Fun, phi: &Fun, tce: Option<&TceSolution>, opts: &Psi1Options) -> Result<Psi1Report> {
    let map = &setup.map;
    let dec = &setup.dec;
    let anchors = setup.anchors();
    let j = setup.weighted_jump(x.as_ref());
    if j.abs() > opts.j_tol {
        return Err(Error::NotHorizontal(j));
    }
    let lam = expansion_constants(map)?.lambda_hat;
    let mean = setup.mean(phi.as_ref());
    let owned;
    let alpha = match tce {
        Some(t) => t,
        None => {
            owned = solve_tce(map, compose_with_map(map, x.clone()), 0.0, None)?;
            &owned
        }
    };
    let sup_alpha = alpha.sup_v * lam / (1.0 - lam) + alpha.tail_bound;
    let sup_phat = sup_on(map, phi.as_ref()) + mean.abs();
    let s1 = dec.s[0];

    // Postcritical sum, truncated once the geometric factor is below the target.
    let class = dec.orbit_class;
    let (table, jmax) = match class.kind {
        OrbitKind::Periodic { n1 } => (OrbitTable::new(map, Some(class), n1 + 1)?, n1),
        _ => {
            let t = OrbitTable::new(map, Some(class), 4000)?;
            let mut jm = t.derivs.len();
            for (i, d) in t.derivs.iter().enumerate() {
                if (s1 / d).abs() * sup_phat * sup_alpha / (1.0 - lam) < opts.trunc_tol {
                    jm = i + 1;
                    break;
                }
            }
            (t, jm)
        }
    };
    let sums = orbit_partial_sums(&table, s1, x.as_ref(), jmax);
    let mut term1 = 0.0;
    let mut term1_raw = 0.0;
    for (jj, sj) in sums.iter().enumerate() {
        let p = phi.value(table.points[jj + 1]);
        term1 -= (p - mean) * sj;
        term1_raw -= p * sj;
    }
    let tail1 = if class.is_periodic() {
        0.0
    } else {
        sup_phat * sup_alpha * (s1 / table.derivs[jmax - 1]).abs() / (1.0 - lam)
    };

    // Ψ₁ without centering, applied to φ ≡ 1; the Neumann part pairs to zero against constants.
    let raw_one: f64 = -sums.iter().sum::<f64>();
    let orbit_mean = cycle_start(class.kind).map(|(q0, n1)| {
        let t = OrbitTable::new(map, Some(class), q0 + n1)?;
        Ok::<f64, Error>((q0..q0 + n1).map(|i| phi.value(t.points[i])).sum::<f64>() / n1 as f64)
    });
    let orbit_mean = orbit_mean.transpose()?;

    let mut term1_alpha = 0.0;
    let mut term1_alpha_raw = 0.0;
    for (k, &p) in anchors.points.iter().enumerate() {
        let w = alpha.eval(p) * dec.s[k];
        term1_alpha -= w * (phi.value(p) - mean);
        term1_alpha_raw -= w * phi.value(p);
    }
    let s_abs: f64 = dec.s.iter().map(|v| v.abs()).sum();
    let mut tail1a = s_abs * alpha.tail_bound * sup_phat;
    if anchors.closure == Closure::Open {
        tail1a += dec.s.last().map_or(0.0, |v| v.abs()) * sup_alpha * sup_phat * lam / (1.0 - lam);
    }

    // The mean of η is −J; what is left after the horizontality check is discretization error.
    let eta = derivative_product(dec, x);
    let eta_mean = eta.integral();
    let eta = eta.lin_comb(1.0, &setup.rho0, -eta_mean)?;
    let sol = neumann_solve(&setup.plan, &eta, setup.tau_hat, Some(&setup.rho0), &setup.neumann)?;
    let sum_mass = sol.sum.integral();
    let term2 = -(sol.sum.pair(&|y| phi.value(y)) - mean * sum_mass);
    let tail2 = sol.tail_bound * sup_phat * (map.b - map.a);

    let psi1_elegant = if opts.elegant { Some(setup.rho0.pair(&|y| phi.eval(y, 1) * alpha.eval(y))) } else { None };
    Ok(Psi1Report {
        term1,
        term2,
        psi1: term1 + term2,
        psi1_alpha: term1_alpha + term2,
        psi1_elegant,
        tail_bounds: Psi1Tails { term1: tail1, term1_alpha: tail1a, term2: tail2 },
        phi_mean: mean,
        psi1_uncentered: term1_raw + term2,
        psi1_alpha_uncentered: term1_alpha_raw + term2,
        psi1_orbit_centered: orbit_mean.map(|om| term1_raw + term2 - raw_one * om),
        j,
        eta_mean,
        neumann_terms: sol.terms,
        term1_terms: jmax,
        tau_hat: setup.tau_hat,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeriesOptions {
    pub n_series: usize,
    /// Coefficients computed by iterating `L₀` directly, for cross-checking.
    pub n_direct: usize,
    /// Stop iterating `L₁` once `‖L₁ⁿη − mρ₀‖` falls below this.
    pub settle_tol: f64,
}

impl Default for SeriesOptions {
    fn default() -> Self {
        SeriesOptions { n_series: 40_000, n_direct: 30, settle_tol: 1e-13 }
    }
}

/// Coefficients `κ_n = ∫ L₀ⁿ(Xρ₀) φ' dx`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilitySeries {
    pub kappa: Vec<f64>,
    pub kappa_direct: Vec<f64>,
    /// True when `kappa` comes from the dual form `−⟨L₁ⁿη, φ⟩ − Σ_k s_k X(c_k) φ(c_{k+n})`.
    pub dual: bool,
    /// `max |κ_direct − κ_dual|` over the directly computed range.
    pub direct_dual_gap: f64,
    pub x_id: String,
    pub phi_id: String,
    /// `∫ η dx`, equal to `−J` up to discretization.
    pub eta_mean: f64,
    /// `−Σ_n ⟨L₁ⁿη, φ⟩` when `η` is mean-zero.
    pub resolvent_at_1: Option<f64>,
    /// Closed rational first term at `z = 1` (Markov maps only).
    pub rational_first_term_at_1: Option<f64>,
}

impl SusceptibilitySeries {
    /// `Σ_{n≤N} κ_n zⁿ` and the remainder bound `max_{tail}|κ| z^{N+1}/(1−z)`.
    pub fn psi(&self, z: f64) -> (f64, f64) {
        let mut acc = 0.0;
        let mut zn = 1.0;
        for k in &self.kappa {
            acc += k * zn;
            zn *= z;
        }
        let n = self.kappa.len();
        let tail_k = self.kappa[n.saturating_sub(64)..].iter().map(|v| v.abs()).fold(0.0, f64::max);
        (acc, tail_k * zn / (1.0 - z.abs()).max(1e-300))
    }

    pub fn partial_sums(&self, z: f64) -> Vec<f64> {
        let mut zn = 1.0;
        let mut acc = 0.0;
        self.kappa
            .iter()
            .map(|k| {
                acc += k * zn;
                zn *= z;
                acc
            })
            .collect()
    }

    /// Value of the holomorphic extension at `z = 1` for Markov maps.
    pub fn markov_value(&self) -> Option<f64> {
        Some(self.rational_first_term_at_1? + self.resolvent_at_1?)
    }

    /// `(n, κ_n)` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,kappa\n");
        for (n, k) in self.kappa.iter().enumerate() {
            out.push_str(&format!("{n},{k:.16e}\n"));
        }
        out
    }
}

/// Jump heights continued along an extended orbit by `s_{k+1} = s_k / f'(c_k)`.
fn extend_saltus(s: &[f64], anchors: &Anchors) -> Vec<f64> {
    let mut out = s.to_vec();
    while out.len() < anchors.len() {
        let k = out.len();
        out.push(out[k - 1] / anchors.slopes[k - 1]);
    }
    out
}

/// Direct coefficients by iterating `L₀` on anchors long enough that no jump is dropped.
fn kappa_direct(setup: &Setup, x: &Fun, phi: &Fun, n: usize) -> Result<Vec<f64>> {
    let map = &setup.map;
    let dec = &setup.dec;
    let anchors = match dec.anchors.closure {
        Closure::Open => {
            let (a, _, _) = Anchors::from_map(map, Some(dec.anchors.len() + n + 2))?;
            Arc::new(a)
        }
        _ => dec.anchors.clone(),
    };
    let s = extend_saltus(setup.rho0.jumps(), &anchors);
    let rho = JumpFunction::new(setup.rho0.regular().clone(), s, anchors.clone(), dec.eta)?;
    let plan = TransferPlan::new(map, dec.grid(), anchors);
    let mut g = product(&rho, x.clone());
    let dphi = |y: f64| phi.eval(y, 1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        out.push(g.pair(&dphi));
        if i + 1 < n {
            g = plan.apply_l0(&g)?;
        }
    }
    Ok(out)
}

/// Builds the coefficient sequence, using the dual form when its boundary terms vanish.
pub fn series(
    setup: &Setup,
    x: &Fun,
    phi: &Fun,
    x_id: &str,
    phi_id: &str,
    opts: &SeriesOptions,
) -> Result<SusceptibilitySeries> {
    let map = &setup.map;
    let dec = &setup.dec;
    let anchors = setup.anchors();
    let tol = map.exact_hit_tol();
    let dual = map.critical_value() < map.b - tol && x.value(map.a).abs() < 1e-12;
    let n_direct = if dual { opts.n_direct.min(opts.n_series) } else { opts.n_series };
    let direct = kappa_direct(setup, x, phi, n_direct)?;
    let eta = derivative_product(dec, x);
    let m = eta.integral();
    if !dual {
        return Ok(SusceptibilitySeries {
            kappa: direct.clone(),
            kappa_direct: direct,
            dual: false,
            direct_dual_gap: f64::NAN,
            x_id: x_id.into(),
            phi_id: phi_id.into(),
            eta_mean: m,
            resolvent_at_1: None,
            rational_first_term_at_1: None,
        });
    }
    // With vanishing boundary terms the exact mean is −J; the grid only gets it to O(h).
    let j = setup.weighted_jump(x.as_ref());
    let eta = eta.lin_comb(1.0, &setup.rho0, -j - m)?;
    let m_exact = -j;
    let n = opts.n_series;
    let phif = |y: f64| phi.value(y);
    let phi_mean = setup.rho0.pair(&phif);
    // Regular-part contribution, iterated until it settles on −J ρ₀.
    let mut part = Vec::with_capacity(n);
    let mut t = eta.clone();
    let limit = -m_exact * phi_mean;
    let mut settled = false;
    for _ in 0..n {
        part.push(-t.pair(&phif));
        let dev = t.lin_comb(1.0, &setup.rho0, -m_exact)?.b0_norm();
        if dev < opts.settle_tol {
            settled = true;
            break;
        }
        let next = setup.plan.apply_l1(&t)?;
        let drift = m_exact - next.integral();
        t = next.lin_comb(1.0, &setup.rho0, drift)?;
    }
    // Only a horizontal deformation has a finite sum here.
    let resolvent_at_1 =
        if settled && m_exact.abs() < 1e-6 { Some(part.iter().map(|v| v - limit).sum()) } else { None };
    while part.len() < n {
        part.push(limit);
    }

    // Atoms X(c_k) s_k δ_{c_k} pushed forward along the orbit.
    let class = dec.orbit_class;
    let table = OrbitTable::new(map, Some(class), anchors.len() + n + 1)?;
    let a: Vec<f64> = dec.s.iter().zip(&anchors.points).map(|(s, &p)| s * x.value(p)).collect();
    let phi_orbit: Vec<f64> = table.points.par_iter().map(|&p| phi.value(p)).collect();
    let kappa: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| part[i] - a.iter().enumerate().map(|(k, ak)| ak * phi_orbit[k + 1 + i]).sum::<f64>())
        .collect();
    let gap = direct.iter().zip(&kappa).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);

    let rational = cycle_start(class.kind).map(|(q0, n1)| {
        let mut finite = 0.0;
        let mut dnum = 0.0;
        for (idx, ak) in a.iter().enumerate() {
            let k = idx + 1;
            let pk = q0.saturating_sub(k);
            for i in 0..pk {
                finite += ak * phi_orbit[k + i];
            }
            let mut p1 = 0.0;
            let mut dp = 0.0;
            for r in 0..n1 {
                let v = phi_orbit[k + pk + r];
                p1 += v;
                dp += r as f64 * v;
            }
            dnum += ak * (pk as f64 * p1 + dp);
        }
        -finite + dnum / n1 as f64
    });
    Ok(SusceptibilitySeries {
        kappa,
        kappa_direct: direct,
        dual: true,
        direct_dual_gap: gap,
        x_id: x_id.into(),
        phi_id: phi_id.into(),
        eta_mean: m,
        resolvent_at_1,
        rational_first_term_at_1: rational,
    })
}

/// `z = 1 − 2^{-k}`, `k = 4..=10`.
pub fn default_z_list() -> Vec<f64> {
    (4..=10).map(|k| 1.0 - 0.5f64.powi(k)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbelianReport {
    pub z: Vec<f64>,
    pub psi: Vec<f64>,
    pub remainders: Vec<f64>,
    /// `(1 − z) Ψ(z)`, which tends to a nonzero constant when `Ψ` has a pole at 1.
    pub scaled: Vec<f64>,
    pub extrapolated: f64,
    pub extrapolation_err: f64,
    pub psi1: f64,
    pub gap: f64,
    pub rel_gap: f64,
    pub markov_value: Option<f64>,
    pub markov_gap: Option<f64>,
}

/// Evaluates `Ψ` along `z ↑ 1` and extrapolates polynomially in `1 − z`.
pub fn abelian_scan(series: &SusceptibilitySeries, psi1_value: f64, z_list: &[f64]) -> AbelianReport {
    let (psi, remainders): (Vec<f64>, Vec<f64>) = z_list.iter().map(|&z| series.psi(z)).unzip();
    let hs: Vec<f64> = z_list.iter().map(|z| 1.0 - z).collect();
    let (extrapolated, extrapolation_err) = extrapolate_to_zero(&hs, &psi);
    let scaled = psi.iter().zip(&hs).map(|(p, h)| p * h).collect();
    let gap = (extrapolated - psi1_value).abs();
    let markov_value = series.markov_value();
    AbelianReport {
        z: z_list.to_vec(),
        psi,
        remainders,
        scaled,
        extrapolated,
        extrapolation_err,
        psi1: psi1_value,
        gap,
        rel_gap: gap / psi1_value.abs().max(0.01),
        markov_value,
        markov_gap: markov_value.map(|v| (v - extrapolated).abs()),
    }
}

/// Partial sums of the series that diverge when `J ≠ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceTable {
    /// `−Σ_{j≤J} φ(c_j) S_j`.
    pub orbit_sums: Vec<f64>,
    /// `−Σ_{1≤j≤J} ⟨L₁ʲ(X'ρ_sal), φ⟩`.
    pub sal_sums: Vec<f64>,
    pub combined: Vec<f64>,
    /// `−Σ_{1≤j≤J} ⟨L₁ʲ((Xρ_reg)'), φ⟩`, convergent.
    pub reg_sums: Vec<f64>,
    /// Fitted geometric ratio of the `reg_sums` increments.
    pub reg_ratio: f64,
    /// `J Σ_{j≤J} (−φ(c_j) + ∫φρ₀)`.
    pub predicted_drift: Vec<f64>,
    #[serde(rename = "J")]
    pub j: f64,
    pub phi_mean: f64,
}

pub fn divergence_probe(setup: &Setup, x: &Fun, phi: &Fun, j_max: usize) -> Result<DivergenceTable> {
    let map = &setup.map;
    let dec = &setup.dec;
    let j = setup.weighted_jump(x.as_ref());
    let phif = |y: f64| phi.value(y);
    let mean = setup.rho0.pair(&phif);
    let table = OrbitTable::new(map, Some(dec.orbit_class), j_max + 1)?;
    let sums = orbit_partial_sums(&table, dec.s[0], x.as_ref(), j_max);
    let mut orbit_sums = Vec::with_capacity(j_max);
    let mut predicted = Vec::with_capacity(j_max);
    let (mut acc, mut pacc) = (0.0, 0.0);
    for (i, sj) in sums.iter().enumerate() {
        let p = phi.value(table.points[i + 1]);
        acc -= p * sj;
        pacc += j * (mean - p);
        orbit_sums.push(acc);
        predicted.push(pacc);
    }
    let eta = derivative_product(dec, x);
    let sal = derivative_times_saltus(dec, x);
    let reg = eta.lin_comb(1.0, &sal, -1.0)?;
    let mut sal_sums = Vec::with_capacity(j_max);
    let mut reg_sums = Vec::with_capacity(j_max);
    let mut reg_terms = Vec::with_capacity(j_max);
    let (mut ts, mut tr) = (sal, reg);
    let (mut a1, mut a2) = (0.0, 0.0);
    for _ in 0..j_max {
        ts = setup.plan.apply_l1(&ts)?;
        tr = setup.plan.apply_l1(&tr)?;
        a1 -= ts.pair(&phif);
        let r = tr.pair(&phif);
        a2 -= r;
        reg_terms.push(r.abs());
        sal_sums.push(a1);
        reg_sums.push(a2);
    }
    let combined = orbit_sums.iter().zip(&sal_sums).map(|(p, q)| p + q).collect();
    let big: Vec<(usize, f64)> = reg_terms.iter().copied().enumerate().filter(|(_, v)| *v > 1e-12).collect();
    let reg_ratio = match (big.first(), big.last()) {
        (Some(&(i0, v0)), Some(&(i1, v1))) if i1 > i0 => (v1 / v0).powf(1.0 / (i1 - i0) as f64),
        _ => 0.0,
    };
    Ok(DivergenceTable {
        orbit_sums,
        sal_sums,
        combined,
        reg_sums,
        reg_ratio,
        predicted_drift: predicted,
        j,
        phi_mean: mean,
    })
}

/// Residuals of `(id − L₀)(αρ₀) = Xρ₀` and of its telescoped form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnyReport {
    pub sup_residual: f64,
    pub jump_mismatch: f64,
    /// `sup |Σ_{k≤n} L₀ᵏ(Xρ₀) − αρ₀ + L₀ⁿ⁺¹(αρ₀)|` off anchors. Grid error is amplified
    /// up to `2ⁿ` by the unweighted operator, so this is only small for smooth `α`.
    pub telescoping: Option<f64>,
    pub nodes_checked: usize,
}

/// Grid nodes at least two cells away from every anchor and from `c`.
fn nodes_off_anchors(setup: &Setup) -> Vec<f64> {
    let grid = setup.dec.grid();
    let h = grid.h();
    let mut avoid = setup.anchors().points.clone();
    avoid.push(setup.map.c);
    grid.nodes().into_iter().filter(|x| avoid.iter().all(|p| (x - p).abs() > 2.0 * h)).collect()
}

fn sup_regular_diff(parts: &[(&JumpFunction, f64)], xs: &[f64]) -> f64 {
    xs.par_iter()
        .map(|&x| parts.iter().map(|(f, w)| w * f.regular().eval(x)).sum::<f64>().abs())
        .reduce(|| 0.0, f64::max)
}

fn jump_diff(parts: &[(&JumpFunction, f64)]) -> f64 {
    let k = parts[0].0.jumps().len();
    (0..k).map(|i| parts.iter().map(|(f, w)| w * f.jumps()[i]).sum::<f64>().abs()).fold(0.0, f64::max)
}

pub fn funny_check(setup: &Setup, x: &Fun, alpha: &Fun, telescoping_n: Option<usize>) -> Result<FunnyReport> {
    let ar = product(&setup.rho0, alpha.clone());
    let xr = product(&setup.rho0, x.clone());
    let l0 = setup.plan.apply_l0(&ar)?;
    let xs = nodes_off_anchors(setup);
    let parts = [(&ar, 1.0), (&l0, -1.0), (&xr, -1.0)];
    let sup_residual = sup_regular_diff(&parts, &xs);
    let jump_mismatch = jump_diff(&parts);
    let telescoping = match telescoping_n {
        None => None,
        Some(n) => {
            let mut term = xr.on_grid(setup.dec.grid());
            let mut acc = term.clone();
            for _ in 0..n {
                term = setup.plan.apply_l0(&term)?;
                acc = acc.lin_comb(1.0, &term, 1.0)?;
            }
            let mut tail = ar.on_grid(setup.dec.grid());
            for _ in 0..=n {
                tail = setup.plan.apply_l0(&tail)?;
            }
            let parts = [(&acc, 1.0), (&ar, -1.0), (&tail, 1.0)];
            Some(sup_regular_diff(&parts, &xs).max(jump_diff(&parts)))
        }
    };
    Ok(FunnyReport { sup_residual, jump_mismatch, telescoping, nodes_checked: xs.len() })
}

/// `∫ φ' α ρ₀` against `Ψ₁`, and the differentiated equation for smooth `α`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElegantReport {
    pub integral: f64,
    pub psi1: f64,
    pub diff: f64,
    /// `max(|Ψ₁|, 0.01)`.
    pub scale: f64,
    /// Sup off anchors of `(id − L₁)ζ − η`, `ζ = α'ρ₀ + αρ'_reg`, `η = X'ρ₀ + Xρ'_reg`.
    pub ttce_residual: Option<f64>,
    pub ttce_jump_mismatch: Option<f64>,
    /// Same with the opposite sign convention `(−id + L₁)ζ = η`.
    pub ttce_residual_opposite: Option<f64>,
    /// `5 h max(|Ψ₁|, 0.01)`.
    pub ttce_bound: Option<f64>,
}

pub fn elegant_check(setup: &Setup, x: &Fun, phi: &Fun, alpha: &Fun, psi1: f64, smooth: bool) -> Result<ElegantReport> {
    let integral = setup.rho0.pair(&|y| phi.eval(y, 1) * alpha.eval(y, 0));
    let scale = psi1.abs().max(0.01);
    let mut rep = ElegantReport {
        integral,
        psi1,
        diff: (integral - psi1).abs(),
        scale,
        ttce_residual: None,
        ttce_jump_mismatch: None,
        ttce_residual_opposite: None,
        ttce_bound: None,
    };
    if smooth {
        let dec = &setup.dec;
        let zeta = derivative_product(dec, alpha);
        let eta = derivative_product(dec, x);
        let lz = setup.plan.apply_l1(&zeta)?;
        let xs = nodes_off_anchors(setup);
        let parts = [(&zeta, 1.0), (&lz, -1.0), (&eta, -1.0)];
        rep.ttce_residual = Some(sup_regular_diff(&parts, &xs));
        rep.ttce_jump_mismatch = Some(jump_diff(&parts));
        let opposite = [(&zeta, -1.0), (&lz, 1.0), (&eta, -1.0)];
        rep.ttce_residual_opposite = Some(sup_regular_diff(&opposite, &xs));
        rep.ttce_bound = Some(5.0 * dec.grid().h() * scale);
    }
    Ok(rep)
}
