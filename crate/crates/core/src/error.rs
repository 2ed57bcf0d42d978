use thiserror::Error;

/// Failure results of table operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
pub enum Error {
    #[error("another rebuild is in progress")]
    Busy,
    #[error("rebuild trigger declined")]
    NotRequired,
    #[error("key already present")]
    Exists,
    #[error("key not found")]
    NotFound,
    #[error("bucket count must be at least 1")]
    ZeroBuckets,
}
