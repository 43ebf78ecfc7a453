use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmpcError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch { context: &'static str, expected: usize, got: usize },

    #[error("integration produced a non-finite state from x = {state:?}, u = {control:?}")]
    IntegrationFailure { state: Vec<f64>, control: Vec<f64> },

    #[error("rollout failed at step {index}: {source}")]
    RolloutFailure {
        index: usize,
        #[source]
        source: Box<EmpcError>,
    },

    #[error("no finite cost at the warm start: {0}")]
    UnrecoverableStart(String),

    #[error("Newton iteration did not converge (residual history {residuals:?})")]
    NewtonFailure { residuals: Vec<f64> },

    #[error("steady-state scan failed at every grid point")]
    SteadyScanFailed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
}

pub type Result<T, E = EmpcError> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(EmpcError::DimensionMismatch { context, expected, got });
    }
    Ok(())
}
