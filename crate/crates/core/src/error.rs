use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("true anomaly {nu} rad outside [{lo}, {hi}]")]
    Domain { nu: f64, lo: f64, hi: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("integration diverged at step {step} (t = {t})")]
    Divergence { step: usize, t: f64 },

    #[error("envelope diverges at t = {blowup} s")]
    EnvelopeDiverged { blowup: f64 },

    #[error("control bound violated: |u| = 0 at t = {t} s")]
    AssumptionViolation { t: f64 },

    #[error("deviation is outside the range of a singular Gramian")]
    InfeasibleRecovery,

    #[error("constraint evaluation failed in {block}: {source}")]
    ConstraintEval {
        block: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
