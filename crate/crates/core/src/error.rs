use thiserror::Error;

use crate::factor_graph::{LandmarkId, PoseId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("underdetermined alignment: {0} point pairs, need at least 3")]
    UnderdeterminedAlignment(usize),
    #[error("degenerate configuration: points are (nearly) collinear")]
    DegenerateConfiguration,
    #[error("gauge or observability failure: variable {0} is unconstrained")]
    Unobservable(String),
    #[error("singular information matrix")]
    SingularInformation,
    #[error("unknown pose {0}")]
    UnknownPose(PoseId),
    #[error("unknown landmark {0}")]
    UnknownLandmark(LandmarkId),
    #[error("class mismatch: landmark {a} has class {class_a}, landmark {b} has class {class_b}")]
    ClassMismatch {
        a: LandmarkId,
        b: LandmarkId,
        class_a: u32,
        class_b: u32,
    },
    #[error("degenerate gate: chi-square quantile needs dof >= 1")]
    DegenerateGate,
    #[error("insufficient degrees of freedom: constellation of {0} matches, need at least 3")]
    InsufficientDof(usize),
    #[error("inconsistent covariance query: residual covariance is not positive definite")]
    InconsistentCovariance,
    #[error("locality violated: constellation has no common observing pose")]
    LocalityViolated,
    #[error("brute-force search limited to {limit} vertices, got {got}")]
    SearchTooLarge { limit: usize, got: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
