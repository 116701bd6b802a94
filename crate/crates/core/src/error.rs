use thiserror::Error;

/// Errors raised by map construction, operators and experiments.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point {x} lies outside the domain [{a}, {b}]")]
    OutOfDomain { x: f64, a: f64, b: f64 },

    #[error("derivative at the turning point needs an explicit side")]
    AmbiguousSide,

    #[error("value {y} exceeds the critical value {max}")]
    AboveCriticalValue { y: f64, max: f64 },

    #[error("critical orbit returns to the turning point at step {0}")]
    OrbitHitsCritical(usize),

    #[error("map is not expanding: inf |f'| = {0}")]
    NotExpanding(f64),

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),

    #[error("no convergence at t = {t}: {source}")]
    NoConvergenceAt { t: f64, source: Box<Error> },

    #[error("spectral gap too small: tau = {0}")]
    NoGap(f64),

    #[error("argument is not mean-zero: integral = {0}")]
    NotMeanZero(f64),

    #[error("the two estimates of s_1 disagree: {fit} vs {closure}")]
    S1Disagreement { fit: f64, closure: f64 },

    #[error("first jump height has the wrong sign: s_1 = {0}")]
    PositiveFirstJump(f64),

    #[error("jump anchors do not match the map's critical orbit")]
    AnchorMismatch,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("multiplier {0} is not expanding")]
    NonExpandingMultiplier(f64),

    #[error("a decomposition is needed to compute the weighted jump")]
    MissingDecomposition,

    #[error("bump has degenerate defect {0}")]
    DegenerateBump(f64),

    #[error("deformation is not horizontal: J = {0}")]
    NotHorizontal(f64),

    #[error("conjugacy is not a homeomorphism: |t| sup|b'| = {0}")]
    NotHomeomorphism(f64),

    #[error("branch evaluations of X disagree by {0}")]
    BranchInconsistency(f64),

    #[error("families are not tangent: sup|f_t - g_t| / t^2 grows to {0}")]
    NotTangent(f64),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::OutOfDomain { .. } => "OutOfDomain",
            Error::AmbiguousSide => "AmbiguousSide",
            Error::AboveCriticalValue { .. } => "AboveCriticalValue",
            Error::OrbitHitsCritical(_) => "OrbitHitsCritical",
            Error::NotExpanding(_) => "NotExpanding",
            Error::InvalidMap(_) => "InvalidMap",
            Error::NoConvergence(_) => "NoConvergence",
            Error::NoConvergenceAt { .. } => "NoConvergence",
            Error::NoGap(_) => "NoGap",
            Error::NotMeanZero(_) => "NotMeanZero",
            Error::S1Disagreement { .. } => "S1Disagreement",
            Error::PositiveFirstJump(_) => "PositiveFirstJump",
            Error::AnchorMismatch => "AnchorMismatch",
            Error::LengthMismatch(..) => "LengthMismatch",
            Error::NonExpandingMultiplier(_) => "NonExpandingMultiplier",
            Error::MissingDecomposition => "MissingDecomposition",
            Error::DegenerateBump(_) => "DegenerateBump",
            Error::NotHorizontal(_) => "NotHorizontal",
            Error::NotHomeomorphism(_) => "NotHomeomorphism",
            Error::BranchInconsistency(_) => "BranchInconsistency",
            Error::NotTangent(_) => "NotTangent",
            Error::Config(_) => "Config",
            Error::Io(_) => "Io",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
