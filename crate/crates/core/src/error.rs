use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular system (condition estimate {cond:.3e}): {context}")]
    Singular { cond: f64, context: String },

    #[error("iteration did not converge: {context} (residual {residual:.3e})")]
    NonConvergence { residual: f64, context: String },

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("invalid config: {0}")]
    Config(String),
}
