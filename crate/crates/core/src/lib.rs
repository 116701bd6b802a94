//! Linear response of piecewise expanding unimodal maps.
//!
//! The crate computes invariant densities with their jump decompositions, solves the
//! twisted cohomological equation, evaluates the susceptibility function and its
//! resummation, and runs parameter-sweep experiments on one-parameter families.

pub mod checks;
pub mod error;
pub mod func;
pub mod jumpspace;
pub mod map_core;
pub mod response_lab;
pub mod susceptibility;
pub mod tce;
pub mod transfer;

pub use error::{Error, Result};
pub use func::{Expr, Fun, RealFn};
pub use jumpspace::{Anchors, Closure, Grid, GridFunction, JumpFunction, Regular, TransferPlan, DEFAULT_ETA};
pub use map_core::{
    classify_orbit, critical_orbit, expansion_constants, is_good, CriticalOrbit, ExpansionConstants, MapSpec,
    OrbitClass, OrbitKind, Side, Sign, UnimodalMap,
};
pub use response_lab::{build_family, Family, FamilyConfig, ResponseCurve};
pub use susceptibility::{psi1, Psi1Options, Psi1Report, Setup};
pub use transfer::{invariant_decomposition, DensityDecomposition, DensityOptions, UlamOperator};
