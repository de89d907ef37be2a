use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{compensator} Riccati iteration did not converge after {iterations} iterations (last change {residual:.3e})")]
    NotConverged {
        compensator: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("writing {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] mlqg::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use mlqg::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::NotConverged { .. } => 3,
            CliError::Output { .. } => 1,
            CliError::Core(e) => match e {
                E::ConfigParse { .. }
                | E::ConfigSchema { .. }
                | E::ConfigValidation(_)
                | E::MissingTrueA
                | E::InvalidInput(_)
                | E::Dimension(_)
                | E::NotPsd(_)
                | E::Io(_) => 2,
                E::NotMeanSquareCompensated { .. } => 4,
                _ => 1,
            },
        }
    }
}
