//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("invalid POVM: {0}")]
    InvalidPovm(String),

    #[error("invalid channel: {0}")]
    InvalidChannel(String),

    #[error("invalid instrument: {0}")]
    InvalidInstrument(String),

    #[error("branch {label} has zero probability")]
    ZeroProbabilityBranch { label: i64 },

    #[error("unknown outcome label {0}")]
    UnknownLabel(i64),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parameter {theta:?} lies outside the model region")]
    OutsideRegion { theta: Vec<f64> },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("state is not strictly positive (minimum eigenvalue {min_eigenvalue:e})")]
    StateNotPositive { min_eigenvalue: f64 },

    #[error("no SLD exists for coordinate {coordinate}: kernel block entry {kernel_entry:e}")]
    M2Violated { coordinate: usize, kernel_entry: f64 },

    #[error("outcome {outcome} has zero probability but nonzero score {score:e}")]
    SingularSupport { outcome: usize, score: f64 },

    #[error("Fisher information is singular (condition number {condition:e})")]
    SingularFisher { condition: f64 },

    #[error("B matrix is singular (condition number {condition:e})")]
    SingularB { condition: f64 },

    #[error("no feasible allocation for n = {n}, n1 = {n1}")]
    Infeasible { n: usize, n1: usize },

    #[error("preliminary POVM cannot identify the parameters (Gram rank {rank} < {m})")]
    IdentifiabilityFailure { rank: usize, m: usize },

    #[error("operation supports only scalar parameters, got m = {0}")]
    MultiparameterUnsupported(usize),

    #[error("outcome tree has {paths} paths, above the limit of {limit}")]
    TreeTooLarge { paths: u128, limit: u128 },

    #[error("estimator is not locally unbiased (bias error {bias_error:e}, B error {b_error:e})")]
    NotLocallyUnbiased { bias_error: f64, b_error: f64 },

    #[error("the cost weights direction {direction:?}, which neither party can identify")]
    UnidentifiableDirection { direction: Vec<f64> },

    #[error("channel family is not interior at the requested radius")]
    NotInterior,

    #[error("mixture weight {index} is on the boundary ({weight:e})")]
    BoundaryWeight { index: usize, weight: f64 },

    #[error("strategy `{strategy}` is not supported for family `{family}`")]
    StrategyUnsupported { strategy: String, family: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Configuration and validation failures, as opposed to numerical ones.
    /// The CLI maps the former to exit code 2 and the latter to 3.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::UnknownModel(_)
                | Error::InvalidParameter(_)
                | Error::OutsideRegion { .. }
                | Error::InvalidGrid(_)
                | Error::StrategyUnsupported { .. }
                | Error::InvalidConfig(_)
                | Error::Parse(_)
                | Error::Json(_)
                | Error::Io(_)
                | Error::MultiparameterUnsupported(_)
                | Error::InvalidPovm(_)
                | Error::InvalidChannel(_)
                | Error::InvalidInstrument(_)
                | Error::InvalidOperator(_)
        )
    }
}
