use thiserror::Error;

/// Errors surfaced by the library layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image dimensions {h}x{w} are not divisible by 2^{levels}")]
    NonDyadic { h: usize, w: usize, levels: usize },
    #[error("stepsize {tau} out of range (0, {max})")]
    StepsizeOutOfRange { tau: f64, max: f64 },
    #[error("iteration cap {cap} exceeded without meeting tolerance; map may not contract")]
    NotContractive { cap: usize },
    #[error("dimension {n} exceeds dense guard {max}")]
    DenseGuard { n: usize, max: usize },
    #[error("identical inputs: PSNR is infinite")]
    InfinitePsnr,
    #[error("singular system: {0}")]
    Singular(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
