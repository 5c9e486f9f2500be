use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinError {
    #[error("invalid manifold spec: {0}")]
    InvalidSpec(String),
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("state length {got} does not match 3N = {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate configuration: centered velocity norm is zero")]
    DegenerateState,
    #[error("pair ({k}, {l}) has |v_k - v_l| = {beta:e} below the cutoff")]
    PairBelowCutoff { k: usize, l: usize, beta: f64 },
    #[error("unknown observable `{0}`")]
    UnknownObservable(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

pub type Result<T> = std::result::Result<T, KinError>;
