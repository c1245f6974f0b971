use std::io;

/// Errors produced by famdiff operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("size error: {0}")]
    Size(String),

    #[error("spectral asymmetry: imaginary residue {residue:e} exceeds {limit:e}")]
    SpectralAsymmetry { residue: f64, limit: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("singular update: {0}")]
    Singularity(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("capacity exceeded: {what} needs {requested}, cap is {cap}")]
    Capacity {
        what: &'static str,
        requested: usize,
        cap: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention pairing: no native record for step t={t} block {block}")]
    Pairing { t: usize, block: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("bench error: {0}")]
    Bench(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
