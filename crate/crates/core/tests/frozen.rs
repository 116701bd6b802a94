// Values recorded from a reviewed run at N = 4096. They guard against silent drift; a change
// here needs a reason, not a new number.

use linresp::susceptibility::{series, SeriesOptions};
use linresp::tce::horizontal_projection;
use linresp::{
    build_family, invariant_decomposition, psi1, DensityOptions, Expr, FamilyConfig, Psi1Options, Setup, UnimodalMap,
};

fn opts() -> DensityOptions {
    DensityOptions { n: 4096, ..Default::default() }
}

#[test]
fn tent19_saltus_values() {
    let dec = invariant_decomposition(&UnimodalMap::tent(1.9).unwrap(), &opts()).unwrap();
    let m = dec.density().integral();
    let s: Vec<f64> = dec.s.iter().map(|v| v / m).collect();
    assert!((s[0] + 1.302_150_99).abs() < 1e-6, "s1 = {}", s[0]);
    // Recursion s_{k+1} = s_k / f'(c_k) with c₁ right of c and c₂ left of it.
    assert!((s[1] - s[0] / -1.9).abs() < 1e-9);
    assert!((s[2] - s[1] / 1.9).abs() < 1e-9);
}

#[test]
fn tent19_sine_psi1() {
    let fam = build_family(&FamilyConfig::tent_sine(1.9, 0.05)).unwrap();
    let setup = Setup::from_options(&fam.base, &opts()).unwrap();
    let x = fam.x().unwrap();
    assert!(setup.weighted_jump(x.as_ref()).abs() < 1e-10);
    let phi = Expr::poly(&[0.0, 0.0, 1.0]).into_fun();
    let p = psi1(&setup, &x, &phi, None, &Psi1Options::default()).unwrap().psi1;
    assert!((p + 0.021_580_446_1).abs() < 1e-8, "psi1 = {p}");
}

#[test]
fn golden_horizontalized_psi1_and_markov_value() {
    let gm = UnimodalMap::tent(UnimodalMap::golden_mean()).unwrap();
    let setup = Setup::from_options(&gm, &opts()).unwrap();
    let x = horizontal_projection(&gm, None, Expr::poly(&[0.0, 0.3, 0.4]).into_fun(), None, None).unwrap().x_h;
    let phi = Expr::poly(&[0.0, 0.0, 1.0]).into_fun();
    let r = psi1(&setup, &x, &phi, None, &Psi1Options::default()).unwrap();
    assert!((r.psi1 - 0.109_102_829_3).abs() < 1e-8, "psi1 = {}", r.psi1);
    let centered = r.psi1_orbit_centered.unwrap();
    assert!((centered - 0.127_228_476_3).abs() < 1e-8, "orbit-centered = {centered}");
    let ser = series(&setup, &x, &phi, "X_h", "x^2", &SeriesOptions::default()).unwrap();
    assert!((ser.markov_value().unwrap() - centered).abs() < 1e-10);
}
