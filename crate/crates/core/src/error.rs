//! Crate-wide error type.

/// Everything that can go wrong across the library, from geometry checks to
/// optimizer aborts. Variants carry enough context to diagnose a failure from
/// the message alone.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error(
        "orbit is not star-shaped about its center: radius spread {spread:.3e} in angular bin {bin} \
         exceeds 25% of the orbit's radial span"
    )]
    NonStarShaped { bin: usize, spread: f64 },

    #[error("orbit samples cover only {coverage:.3} rad of angle, need at least {required:.3}")]
    InsufficientCoverage { coverage: f64, required: f64 },

    #[error("least-squares design matrix is rank-deficient (condition number {0:.3e})")]
    RankDeficient(f64),

    #[error("descriptor harmonic counts differ: {0} vs {1}")]
    HarmonicMismatch(usize, usize),

    #[error("no {wanted} limit cycle exists at mu = {mu}")]
    MissingBranch { mu: f64, wanted: &'static str },

    #[error("{what} did not converge after {iters} iterations (residual {residual:.3e})")]
    NoConvergence { what: &'static str, iters: usize, residual: f64 },

    #[error("jacobian is singular (|det| = {0:.3e})")]
    SingularJacobian(f64),

    #[error("oscillation speed is non-positive ({omega:.3e}) at theta = {theta:.3}, mu = {mu}")]
    NonPositiveSpeed { omega: f64, theta: f64, mu: f64 },

    #[error("non-finite gradient at iteration {iteration} of {phase}")]
    NanGradient { phase: String, iteration: usize },

    #[error("non-finite loss at iteration {iteration} of {phase}")]
    NanLoss { phase: String, iteration: usize },

    #[error("no limit cycle found: oscillation amplitude decayed to {0:.3e}")]
    NoLco(f64),

    #[error("oscillation has not settled: amplitude still drifting by {0:.2}% over the recording window")]
    NotSettled(f64),

    #[error("feedback control failed to stabilize the target orbit: {0}")]
    NotStabilized(String),

    #[error("feedback control is invasive: control-to-response power ratio {0:.3e} exceeds 1e-2")]
    Invasive(f64),

    #[error("inverse mapping failed at sample {index}")]
    InverseFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("model file format version {found} is not supported (expected {expected})")]
    UnsupportedFormat { found: u32, expected: u32 },

    #[error("dataset fingerprint mismatch: model was trained on {expected}, got {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
