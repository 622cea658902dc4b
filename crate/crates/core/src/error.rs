use thiserror::Error;

/// Errors raised by the numerical stages.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("covariance of component {component} is not positive definite")]
    SingularCovariance { component: usize },
    #[error("component {component} has vanishing total responsibility")]
    EmptyComponent { component: usize },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("node contains no samples")]
    EmptyNode,
    #[error("split leaves one child empty")]
    DegenerateSplit,
    #[error("class {0} received no samples")]
    EmptyClass(crate::Class),
    #[error("regressor Gram matrix is numerically singular")]
    RankDeficient,
    #[error("normal equations could not be factorized after maximal damping")]
    IllConditioned,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
