use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("integration failure at t = {t}: {msg}")]
    Integration { t: f64, msg: String },
    #[error("no convergence: {msg} (achieved residual {residual:e})")]
    NoConvergence { msg: String, residual: f64 },
    #[error("incomplete basis: projection deficit {deficit:e} exceeds {threshold:e}")]
    IncompleteBasis { deficit: f64, threshold: f64 },
    #[error("cutoff error: {0}")]
    Cutoff(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("ambiguous spectrum: {0}")]
    Ambiguous(String),
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Coarse category used by the CLI to pick an exit code.
    pub fn is_resource_refusal(&self) -> bool {
        matches!(self, Error::Refused(_))
    }
}
