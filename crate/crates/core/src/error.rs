use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid noise model: {0}")]
    InvalidNoise(String),

    #[error("unsupported Sobolev order {order} (supported: {supported})")]
    UnsupportedOrder { order: u32, supported: &'static str },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid scheme parameters: {0}")]
    InvalidParams(String),

    #[error(
        "fixed-point iteration did not converge: residual {residual:e} > tolerance {tolerance:e} \
         after {iterations} iterations (time step too large for this field amplitude)"
    )]
    FixedPointDivergence {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sample {sample}, tau {tau:e}: {source}")]
    Sample {
        sample: usize,
        tau: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),

    #[error("order fit: {0}")]
    InvalidFit(String),
}

impl Error {
    /// True when the root cause is a numerical breakdown of the integrator
    /// (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::FixedPointDivergence { .. } | Error::NumericalFailure(_) => true,
            Error::Step { source, .. } | Error::Sample { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
