// Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so the lines are
// always printed; exits non-zero if any criterion fails.
//
// Where cheap, the quantities are measured with code written here rather than the library's
// own diagnostics: histograms, finite-difference slopes and the z -> 1 extrapolation.

use linresp::func::Fun;
use linresp::jumpspace::{compress_jumps, expand_jumps, relocate_jumps};
use linresp::response_lab::{
    atomic_limit_experiment, density, dyadic, nonlip_report, orbit_observable, pt_derivative_experiment,
    response_curve, tangent_pair_experiment,
};
use linresp::susceptibility::{elegant_check, funny_check, series, SeriesOptions};
use linresp::tce::{compose_with_map, horizontal_projection, horizontality, orbit_derivative, solve_tce, Deformation};
use linresp::{
    build_family, invariant_decomposition, psi1, Anchors, DensityOptions, Expr, FamilyConfig, Grid, JumpFunction,
    Psi1Options, Result, Setup, TransferPlan, UnimodalMap, DEFAULT_ETA,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;
use std::time::Instant;

const N: usize = 4096;
const SEED: u64 = 7_001;

type Criterion = fn() -> Result<Verdict>;

struct Verdict {
    passed: bool,
    measured: f64,
    limit: f64,
    note: String,
}

fn verdict(passed: bool, measured: f64, limit: f64, note: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { passed, measured, limit, note: note.into() })
}

fn opts() -> DensityOptions {
    DensityOptions { n: N, ..Default::default() }
}

fn x2() -> Fun {
    Expr::poly(&[0.0, 0.0, 1.0]).into_fun()
}

fn golden() -> UnimodalMap {
    UnimodalMap::tent(UnimodalMap::golden_mean()).unwrap()
}

fn sine_family(slope: f64) -> Result<linresp::Family> {
    build_family(&FamilyConfig::tent_sine(slope, 0.05))
}

/// Orbit histogram on `bins` cells, normalized to a density.
fn histogram(map: &UnimodalMap, points: u64, bins: usize) -> Vec<f64> {
    let chains = 32u64;
    let per = points / chains;
    let (a, w) = (map.a, map.b - map.a);
    let counts = (0..chains)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED + k);
            let mut x = a + w * rng.random::<f64>();
            for _ in 0..500 {
                x = map.f(x);
            }
            let mut c = vec![0u64; bins];
            for _ in 0..per {
                x = map.f(x);
                c[(((x - a) / w) * bins as f64).min(bins as f64 - 1.0) as usize] += 1;
            }
            c
        })
        .reduce(
            || vec![0; bins],
            |mut l, r| {
                l.iter_mut().zip(r).for_each(|(p, q)| *p += q);
                l
            },
        );
    let cell = w / bins as f64;
    counts.into_iter().map(|k| k as f64 / ((per * chains) as f64 * cell)).collect()
}

fn c1_tent2_density() -> Result<Verdict> {
    let map = UnimodalMap::tent(2.0)?;
    let start = Instant::now();
    let (rho, _) = density(&map, &opts())?;
    let secs = start.elapsed().as_secs_f64();
    let dev = (0..=980).map(|i| 0.01 + i as f64 * 1e-3).map(|x| (rho.materialize(x) - 1.0).abs()).fold(0.0, f64::max);
    verdict(dev <= 1e-3 && secs < 1.0, dev, 1e-3, format!("{secs:.3}s"))
}

fn c2_saltus() -> Result<Verdict> {
    let t2 = invariant_decomposition(&UnimodalMap::tent(2.0)?, &opts())?;
    let m = t2.density().integral();
    let (s1, s2, reg) = (t2.s[0] / m, t2.s[1] / m, t2.rho_reg.sup_norm() / m);
    let ok_t2 = (s1 + 1.0).abs() <= 1e-3 && (s2 - 1.0).abs() <= 1e-3 && reg <= 1e-2;

    let gm = golden();
    let (rho, dec) = density(&gm, &opts())?;
    let bins = 2000;
    let hist = histogram(&gm, 100_000_000, bins);
    let cell = (gm.b - gm.a) / bins as f64;
    // Fine midpoint quadrature of ρ per bin; the three jumps cost O(cell/64) each.
    let l1: f64 = (0..bins)
        .into_par_iter()
        .map(|i| {
            let lo = gm.a + i as f64 * cell;
            let mass: f64 =
                (0..64).map(|j| rho.materialize(lo + (j as f64 + 0.5) * cell / 64.0)).sum::<f64>() * cell / 64.0;
            (mass - hist[i] * cell).abs()
        })
        .sum();
    let jumps = dec.anchors.len();
    verdict(ok_t2 && jumps == 3 && l1 <= 2e-2, l1, 2e-2, format!("s1={s1:.5} s2={s2:.5} reg={reg:.1e} jumps={jumps}"))
}

/// Largest `|(L₀p)'(x) − L₁(p')(x)|` using forward differences at nodes away from anchors.
fn intertwining_error(map: &UnimodalMap, c: &[f64], n: usize) -> Result<f64> {
    let grid = Grid::for_map(map, n);
    let (anchors, _, _) = Anchors::from_map(map, None)?;
    let anchors = Arc::new(anchors);
    let k = anchors.len();
    let dc: Vec<f64> = c.iter().enumerate().skip(1).map(|(i, v)| i as f64 * v).collect();
    let (p, dp) = (Expr::poly(c), Expr::poly(&dc));
    use linresp::RealFn;
    let phi = JumpFunction::from_total(grid, anchors.clone(), DEFAULT_ETA, vec![0.0; k], |x| p.value(x))?;
    let dphi = JumpFunction::from_total(grid, anchors.clone(), DEFAULT_ETA, vec![0.0; k], |x| dp.value(x))?;
    let plan = TransferPlan::new(map, grid, anchors.clone());
    let (l0, l1) = (plan.apply_l0(&phi)?, plan.apply_l1(&dphi)?);
    let h = grid.h();
    let mut worst: f64 = 0.0;
    for i in 0..grid.n {
        let (x0, x1) = (grid.node(i), grid.node(i + 1));
        if anchors.points.iter().any(|&q| q >= x0 - h && q <= x1 + h) {
            continue;
        }
        worst = worst.max(((l0.materialize(x1) - l0.materialize(x0)) / h - l1.materialize(x0)).abs());
    }
    Ok(worst)
}

fn c3_intertwining() -> Result<Verdict> {
    let map = UnimodalMap::tent(1.9)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 1.0;
    for _ in 0..10 {
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ratio = intertwining_error(&map, &c, 1024)? / intertwining_error(&map, &c, 2048)?;
        let r = ratio / 2.0;
        worst = worst.max(r.max(1.0 / r));
    }
    verdict(worst <= 1.3, worst, 1.3, "error ratio at h, h/2 relative to 2")
}

fn c4_tce() -> Result<Verdict> {
    let map = UnimodalMap::tent(1.9)?;
    let mut worst: f64 = 0.0;
    for c in [vec![0.0, 1.0 / 1.9], vec![0.1, -0.4, 0.7], vec![0.0, 0.3, 0.2, -0.5]] {
        let sol = solve_tce(&map, compose_with_map(&map, Expr::Poly { coeffs: c }.into_fun()), 0.0, Some(40))?;
        let r = (0..=1000)
            .map(|i| i as f64 / 1000.0)
            .filter(|x| (x - map.c).abs() > 1e-9)
            .map(|x| sol.residual(x).abs())
            .fold(0.0, f64::max);
        worst = worst.max(r / sol.residual_bound());
    }
    verdict(worst <= 1.0, worst, 1.0, "residual / bound")
}

fn c5_weighted_jump() -> Result<Verdict> {
    let cases = [
        (UnimodalMap::tent(2.0)?, vec![0.0, 0.5]),
        (golden(), vec![0.0, 1.0]),
        (golden(), vec![0.2, -0.3, 0.5]),
        (golden(), vec![0.0, 0.1, 0.0, 0.4]),
    ];
    let mut worst: f64 = 0.0;
    for (map, c) in cases {
        let dec = invariant_decomposition(&map, &opts())?;
        let r = horizontality(
            &map,
            Some(dec.orbit_class),
            &Deformation::X(Expr::poly(&c).into_fun()),
            Some(&dec),
            true,
            None,
        )?;
        let m = dec.density().integral();
        worst = worst.max((r.j.unwrap() - r.j_closed.unwrap()).abs() / m);
    }
    verdict(worst <= 1e-6, worst, 1e-6, "|J - J_closed|")
}

fn c6_normalization() -> Result<Verdict> {
    let fam = sine_family(1.9)?;
    let setup = Setup::from_options(&fam.base, &opts())?;
    let one = Expr::poly(&[1.0]).into_fun();
    let r = psi1(&setup, &fam.x().unwrap(), &one, None, &Psi1Options::default())?;
    let mut ts: Vec<f64> = dyadic(6, 13).into_iter().flat_map(|t| [t, -t]).collect();
    ts.push(0.0);
    let curve = response_curve(&fam, &one, &ts, &opts())?;
    let dev = curve.r_values.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    let p = r.psi1.abs().max(r.psi1_alpha.abs());
    verdict(p <= 1e-6 && dev <= 1e-10, p, 1e-6, format!("max |R-1| = {dev:.1e}"))
}

fn c7_linear_response() -> Result<Verdict> {
    let start = Instant::now();
    let fam = sine_family(1.9)?;
    let phi = x2();
    let h = 1e-2;
    let ts: Vec<f64> = (0..3).flat_map(|k| [h / f64::from(1 << k), -h / f64::from(1 << k)]).collect();
    let curve = response_curve(&fam, &phi, &ts, &opts())?;
    // Central differences at h, h/2, h/4, then two Richardson steps in h².
    let d: Vec<f64> = (0..3).map(|k| (curve.r_values[2 * k] - curve.r_values[2 * k + 1]) / (2.0 * ts[2 * k])).collect();
    let r1 = [(4.0 * d[1] - d[0]) / 3.0, (4.0 * d[2] - d[1]) / 3.0];
    let slope = (16.0 * r1[1] - r1[0]) / 15.0;
    let setup = Setup::from_options(&fam.base, &DensityOptions { n: 8192, ..Default::default() })?;
    let p = psi1(&setup, &fam.x().unwrap(), &phi, None, &Psi1Options::default())?.psi1;
    let secs = start.elapsed().as_secs_f64();
    let rel = (slope - p).abs() / p.abs().max(0.01);
    verdict(rel <= 0.02 && secs < 120.0, rel, 0.02, format!("slope={slope:.8} psi1={p:.8} {secs:.1}s"))
}

fn c8_two_routes() -> Result<Verdict> {
    let t19 = UnimodalMap::tent(1.9)?;
    let t2 = UnimodalMap::tent(2.0)?;
    let gm = golden();
    let proj = |m: &UnimodalMap, c: &[f64]| {
        horizontal_projection(m, None, Expr::poly(c).into_fun(), None, None).map(|p| p.x_h)
    };
    let cases = [
        (t19.clone(), sine_family(1.9)?.x().unwrap()),
        (t19.clone(), proj(&t19, &[0.0, 1.0, -0.5])?),
        (gm.clone(), sine_family(UnimodalMap::golden_mean())?.x().unwrap()),
        (gm.clone(), proj(&gm, &[0.0, 0.3, 0.4])?),
        (t2.clone(), proj(&t2, &[0.0, 0.5])?),
    ];
    let phis = [x2(), Expr::Sin { amp: 1.0, freq: 4.0, phase: 0.3 }.into_fun()];
    let mut worst: f64 = 0.0;
    for (map, x) in &cases {
        let setup = Setup::from_options(map, &opts())?;
        for phi in &phis {
            let r = psi1(&setup, x, phi, None, &Psi1Options::default())?;
            worst = worst.max((r.psi1 - r.psi1_alpha).abs() / r.psi1.abs().max(0.01));
        }
    }
    verdict(worst <= 5e-3, worst, 5e-3, "10 pairs")
}

fn c9_abelian() -> Result<Verdict> {
    let gm = golden();
    let setup = Setup::from_options(&gm, &opts())?;
    let x = horizontal_projection(&gm, None, Expr::poly(&[0.0, 0.3, 0.4]).into_fun(), None, None)?.x_h;
    let phi = x2();
    let p = psi1(&setup, &x, &phi, None, &Psi1Options::default())?.psi1;
    let ser = series(&setup, &x, &phi, "X_h", "x^2", &SeriesOptions::default())?;
    // Ψ(z) on z = 1 − 2^{-k}; two Richardson steps in (1 − z).
    let v: Vec<f64> = (8..=10).map(|k| ser.psi(1.0 - 0.5f64.powi(k)).0).collect();
    let r1 = [2.0 * v[1] - v[0], 2.0 * v[2] - v[1]];
    let limit = (4.0 * r1[1] - r1[0]) / 3.0;
    let rel = (limit - p).abs() / p.abs();
    verdict(rel <= 0.01, rel, 0.01, format!("limit={limit:.7} psi1={p:.7}"))
}

fn c10_nonlip() -> Result<Verdict> {
    let slope = build_family(&FamilyConfig::TentSlope { slope: 1.9, t_max: 0.05 })?;
    let (rho0, _) = density(&slope.base, &opts())?;
    let phi = orbit_observable(&slope.base, 8, 0.01, Some(&rho0))?.into_fun();
    let ts = dyadic(7, 12);
    let r = nonlip_report(&slope, &phi, &ts, &opts())?;
    let control = nonlip_report(&sine_family(1.9)?, &x2(), &ts, &opts())?;
    let ratio = r.variance_ratio.unwrap_or(0.0);
    let k = r.tlnt_coeff.unwrap_or(0.0);
    verdict(
        k != 0.0 && r.sign_consistent && ratio >= 1.1 && control.tlnt_within_noise,
        ratio,
        1.1,
        format!("K={k:.3} signs={} control ok={}", r.sign_consistent, control.tlnt_within_noise),
    )
}

fn c11_modulus() -> Result<Verdict> {
    let slope = build_family(&FamilyConfig::TentSlope { slope: 1.9, t_max: 0.05 })?;
    let (rho0, _) = density(&slope.base, &opts())?;
    let ts: Vec<f64> = (0..=8).map(|i| 1e-4 * 10f64.powf(i as f64 / 4.0)).collect();
    // ‖ρ_t − ρ₀‖_L¹ / (t ln(1/t)) measured here by midpoint quadrature.
    let ratios: Vec<f64> = ts
        .iter()
        .map(|&t| {
            let (rho, _) = density(&slope.map_at(t)?, &opts())?;
            let m = 200_000;
            let l1 = (0..m)
                .into_par_iter()
                .map(|i| {
                    let x = (i as f64 + 0.5) / m as f64;
                    (rho.materialize(x) - rho0.materialize(x)).abs()
                })
                .sum::<f64>()
                / m as f64;
            Ok(l1 / (t * (1.0 / t).ln()))
        })
        .collect::<Result<_>>()?;
    let (lo, hi) = ratios.iter().fold((f64::MAX, 0.0f64), |(l, h), &r| (l.min(r), h.max(r)));
    let spread = hi / lo;
    verdict(spread <= 5.0, spread, 5.0, format!("ratios in [{lo:.3}, {hi:.3}]"))
}

fn c12_tangent() -> Result<Verdict> {
    let base = FamilyConfig::tent_sine(1.9, 0.05);
    let f = build_family(&base)?;
    let g = build_family(&FamilyConfig::Perturbed {
        inner: Box::new(base),
        bump: Expr::poly(&[0.0, 0.5, -0.5]),
        power: 2,
    })?;
    let r = tangent_pair_experiment(&f, &g, &dyadic(6, 12), &opts())?;
    verdict(
        r.passed,
        r.xi_hat.unwrap_or(f64::NAN),
        1.0,
        format!("envelope exponent {:.3}", r.envelope_exponent.unwrap_or(f64::NAN)),
    )
}

fn c13_funny() -> Result<Verdict> {
    let map = UnimodalMap::tent(2.0)?;
    let setup = Setup::from_options(&map, &opts())?;
    let x = horizontal_projection(&map, None, Expr::poly(&[0.0, 0.5]).into_fun(), None, None)?.x_h;
    let alpha = solve_tce(&map, compose_with_map(&map, x.clone()), 0.0, Some(60))?;
    let r = funny_check(&setup, &x, &alpha.as_fun(), None)?;
    let m = r.sup_residual.max(r.jump_mismatch);
    verdict(m <= 1e-6, m, 1e-6, "")
}

fn c14_elegant() -> Result<Verdict> {
    let fam = sine_family(1.9)?;
    let setup = Setup::from_options(&fam.base, &opts())?;
    let (x, alpha, phi) = (fam.x().unwrap(), fam.alpha().unwrap(), x2());
    let p = psi1(&setup, &x, &phi, None, &Psi1Options::default())?.psi1;
    let e = elegant_check(&setup, &x, &phi, &alpha, p, true)?;
    let (res, bound) = (e.ttce_residual.unwrap_or(f64::INFINITY), e.ttce_bound.unwrap_or(0.0));
    verdict(e.diff <= 0.01 * e.scale && res <= bound, e.diff / e.scale, 0.01, format!("ttce {res:.1e} <= {bound:.1e}"))
}

fn c15_pt() -> Result<Verdict> {
    let fam = sine_family(1.9)?;
    let dec = invariant_decomposition(&fam.base, &opts())?;
    let e = pt_derivative_experiment(&fam, &dec, &dyadic(6, 12))?.exponent.unwrap_or(f64::NAN);
    verdict((1.5..=2.5).contains(&e), e, 1.5, "exponent in [1.5, 2.5]")
}

fn c16_orbit_derivatives() -> Result<Verdict> {
    let s0 = 1.9;
    let map = UnimodalMap::tent(s0)?;
    let x = Expr::poly(&[0.0, 1.0 / s0]).into_fun();
    let fam = |t: f64| UnimodalMap::tent(s0 + t);
    let ts = [1e-6, 5e-7, 2.5e-7, 1.25e-7];
    let long = orbit_derivative(&map, &fam, &x, None, 30, &ts)?;
    let mut linear = true;
    for k in [3, 6, 10] {
        let r = orbit_derivative(&map, &fam, &x, None, k, &ts)?;
        let inside: Vec<_> = r.samples.iter().filter(|s| k as i64 <= s.horizon).collect();
        linear &= !inside.is_empty() && inside.iter().all(|s| s.within_bound);
        linear &= r.linear_rates.iter().all(|q| (0.7..=1.4).contains(q));
    }
    let w0 = [-1.0, 0.7, 0.3];
    let w = compress_jumps(&expand_jumps(&w0, 2, 2, &[-1.9, 1.7], 256)?, 2, 2);
    let id = w.iter().zip(w0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    verdict(
        long.twisted_residual <= 1e-12 && linear && id <= 1e-12,
        long.twisted_residual,
        1e-12,
        format!("linear={linear} compress(expand)={id:.1e}"),
    )
}

fn c17_atomic() -> Result<Verdict> {
    let fam = sine_family(1.9)?;
    let dec = invariant_decomposition(&fam.base, &opts())?;
    let tests: Vec<(String, Fun)> = vec![
        ("x".into(), Expr::poly(&[0.0, 1.0]).into_fun()),
        ("sin".into(), Expr::Sin { amp: 1.0, freq: 3.0, phase: 1.0 }.into_fun()),
        ("cubic".into(), Expr::poly(&[0.2, 0.0, 0.0, 1.0]).into_fun()),
    ];
    let r = atomic_limit_experiment(&fam, &dec, &tests, &dyadic(6, 12), &opts())?;
    let other = build_family(&FamilyConfig::TentSlope { slope: 1.9, t_max: 0.05 })?.map_at(0.03)?;
    let (anchors, _, _) = Anchors::from_map(&other, Some(dec.anchors.len()))?;
    let rho = dec.density();
    let moved = relocate_jumps(&rho, Arc::new(anchors))?;
    let iso = (moved.b0_norm() - rho.b0_norm()).abs().max(r.isometry_defect);
    let shrinking = r.rows.iter().all(|row| row.shrinking);
    verdict(iso <= 1e-14 && shrinking, iso, 1e-14, format!("errors shrink: {shrinking}"))
}

fn main() {
    let criteria: [(&str, Criterion); 17] = [
        ("tent2 density", c1_tent2_density),
        ("saltus recursion", c2_saltus),
        ("derivative intertwining", c3_intertwining),
        ("tce residual", c4_tce),
        ("weighted jump identity", c5_weighted_jump),
        ("normalization null", c6_normalization),
        ("linear response", c7_linear_response),
        ("two-route psi1", c8_two_routes),
        ("abelian limit", c9_abelian),
        ("non-lipschitz signature", c10_nonlip),
        ("modulus of continuity", c11_modulus),
        ("tangent pair exponent", c12_tangent),
        ("funny identity", c13_funny),
        ("elegant identity", c14_elegant),
        ("step-2 derivative", c15_pt),
        ("orbit derivatives", c16_orbit_derivatives),
        ("isometry and atomic limit", c17_atomic),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (ok, line) = match run() {
            Ok(v) => (v.passed, format!("measured={:.6e} limit={:.1e} {}", v.measured, v.limit, v.note)),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("{tag} {:>2} {name:<26} {line} ({:.1}s)", i + 1, start.elapsed().as_secs_f64());
        if !ok {
            failed.push(i + 1);
        }
    }
    println!("{} of 17 criteria passed", 17 - failed.len());
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
