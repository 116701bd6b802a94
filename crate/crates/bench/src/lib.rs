//! Fixtures shared by the criterion benches.

use linresp::{build_family, DensityOptions, Family, FamilyConfig, Setup, UnimodalMap};

pub fn tent(slope: f64) -> UnimodalMap {
    UnimodalMap::tent(slope).expect("valid slope")
}

pub fn opts(n: usize) -> DensityOptions {
    DensityOptions { n, ..Default::default() }
}

/// Conjugacy family `h_t = x + 0.05 t sin 2πx` on a tent map.
pub fn sine_family(slope: f64) -> Family {
    build_family(&FamilyConfig::tent_sine(slope, 0.05)).expect("family builds")
}

pub fn setup(map: &UnimodalMap, n: usize) -> Setup {
    Setup::from_options(map, &opts(n)).expect("density converges")
}
