use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },

    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPd { min_eigenvalue: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("damped block {block} is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPdWithDamping { block: usize, min_eigenvalue: f64 },

    #[error("index out of range: plane ({i}, {j}) in dimension {dim}")]
    IndexOutOfRange { i: usize, j: usize, dim: usize },

    #[error("bad dimension: {0}")]
    BadDimension(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("incoming gradient is zero")]
    ZeroGradient,

    #[error("function value is not finite at query {query}")]
    NonFiniteFunctionValue { query: usize },

    #[error("directional curvature {0:e} is not positive")]
    NonPositiveDirectionalCurvature(f64),

    #[error("probability {0} is outside (0, 1)")]
    BadProbability(f64),

    #[error("degenerate dimension: {0}")]
    DegenerateDimension(String),

    #[error("alignment {0} is outside [0, 1]")]
    BadAlpha(f64),

    #[error("block partition does not match vector: {0}")]
    PartitionMismatch(String),

    #[error("cross-block curvature is required but was not supplied")]
    MissingCrossBlocks,

    #[error("need at least {required} trials, got {got}")]
    TooFewTrials { required: usize, got: usize },

    #[error("continual stream has no tasks")]
    EmptyStream,

    #[error("no constant in [{lo:e}, {hi:e}] reaches the target coverage")]
    NoFeasibleC { lo: f64, hi: f64 },

    #[error("spectrum is degenerate (max == min eigenvalue), no sweep possible")]
    DegenerateSpectrum,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
