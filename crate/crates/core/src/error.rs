use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("CFL violated: courant number {courant:.4} exceeds {limit} at t = {time}")]
    Cfl { courant: f64, limit: f64, time: f64 },
    #[error("linear solve failed in {context}: relative residual {residual:e}")]
    Solver { context: &'static str, residual: f64 },
    #[error("non-finite value produced by {term} at t = {time}")]
    NonFinite { term: &'static str, time: f64 },
    #[error("missing stochastic parameter: {0}")]
    MissingParameter(&'static str),
    #[error("infeasible request: {0}")]
    Infeasible(String),
    #[error("initialization rejected {rejected} of {attempted} samples")]
    TooManyRejections { rejected: usize, attempted: usize },
    #[error("{file}: record {record}: {message}")]
    Parse {
        file: PathBuf,
        record: usize,
        message: String,
    },
    #[error("schema version {found} is not supported (expected {expected})")]
    Schema { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
