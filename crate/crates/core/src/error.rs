use thiserror::Error;

/// Errors raised by the numerical modules. Messages carry the module tag so
/// that the harness can report them without extra context.
#[derive(Debug, Error)]
pub enum Error {
    #[error("lattice: {0}")]
    Lattice(String),
    #[error("hilbert: {0}")]
    Hilbert(String),
    #[error("exact: {0}")]
    Exact(String),
    #[error(
        "exact: Lanczos did not converge after {iterations} iterations (residual {residual:.3e})"
    )]
    NotConverged { iterations: usize, residual: f64 },
    #[error("freefermion: {0}")]
    FreeFermion(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("analysis: {0}")]
    Analysis(String),
}

pub type Result<T> = std::result::Result<T, Error>;
