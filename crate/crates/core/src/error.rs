use thiserror::Error;

/// Errors produced by the library.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("syntax error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("evaluation error in `{expr}`: {reason}")]
    Eval { expr: String, reason: String },
    #[error("unknown grid family `{0}`")]
    UnknownFamily(String),
    #[error("invalid grid parameters: {0}")]
    GridParams(String),
    #[error("time {t} outside the represented grid window")]
    OutOfWindow { t: f64 },
    #[error("interval index {k} outside the represented grid window")]
    IndexOutOfWindow { k: i64 },
    #[error("{what}: t = {t} and tau = {tau} lie in different grid intervals")]
    DifferentIntervals { what: &'static str, t: f64, tau: f64 },
    #[error("singular factor E on interval {interval} (condition number {cond:.3e}); condition (C) likely violated")]
    SingularFactor { interval: i64, cond: f64 },
    #[error("matrix is numerically singular (condition number {cond:.3e})")]
    Singular { cond: f64 },
    #[error("condition (C) violated on window [{lo}, {hi}]: nu+ = {nu_plus:.6}, nu- = {nu_minus:.6}")]
    ConditionC { lo: i64, hi: i64, nu_plus: f64, nu_minus: f64 },
    #[error("no hyperbolic splitting: eigenvalue with |lambda| = {modulus:.12} on the unit circle")]
    NoDichotomy { modulus: f64 },
    #[error("reduction matrices are not constant; supply a projection and rate explicitly")]
    NonConstantReduction,
    #[error("{0}")]
    Domain(String),
    #[error("fixed-point sub-iteration failed to converge on interval {interval} (last delta {delta:.3e})")]
    SubIteration { interval: i64, delta: f64 },
    #[error("Picard iteration exceeded {cap} iterations (last increment {increment:.3e})")]
    PicardCap { cap: usize, increment: f64 },
    #[error("Gronwall inequality inapplicable: w = {w:.6} >= 1")]
    GronwallInapplicable { w: f64 },
    #[error("non-finite value encountered during {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration at {path}: {message}")]
    Config { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
