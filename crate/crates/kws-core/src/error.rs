use thiserror::Error;

pub type Result<T, E = KwsError> = std::result::Result<T, E>;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum KwsError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("batchnorm fold: {0}")]
    Fold(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("evaluation: {0}")]
    Eval(String),
    /// Training aborted on a non-finite loss. Carries the history recorded
    /// up to the failing step as `(step, loss, accuracy)` rows.
    #[error("training diverged at step {step} (loss={loss})")]
    Diverged {
        step: usize,
        loss: f32,
        history: Vec<(usize, f32, f32)>,
    },
    #[error("training: {0}")]
    Train(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
