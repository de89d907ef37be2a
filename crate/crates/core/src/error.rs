use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite entry in {0}")]
    NonFinite(String),

    #[error("matrix is singular to working precision (condition estimate {condition:.3e}) in {context}")]
    Singular { context: String, condition: f64 },

    #[error("eigenvalue iteration did not converge for a {0}x{0} matrix")]
    EigenNonConvergence(usize),

    #[error("{0} is not positive semidefinite")]
    NotPsd(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("not mean-square compensated: spectral radius of H is {rho:.6} (>= 1), steady state does not exist")]
    NotMeanSquareCompensated { rho: f64 },

    #[error("moment explosion: {0}")]
    MomentExplosion(String),

    #[error("moment sequence is not log-convex at order {order}: (M^{order})^2 = {lhs:.6e} > M^{prev} M^{next} = {rhs:.6e}", prev = order - 1, next = order + 1)]
    InconsistentMoments { order: usize, lhs: f64, rhs: f64 },

    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse { line: usize, column: usize, message: String },

    #[error("config schema error at `{field}`: {message}")]
    ConfigSchema { field: String, message: String },

    #[error("config validation error: {}", .0.join("; "))]
    ConfigValidation(Vec<String>),

    #[error("fixed-mismatch simulation requires a true A matrix (options.true_A)")]
    MissingTrueA,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
