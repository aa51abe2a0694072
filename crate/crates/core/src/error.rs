use thiserror::Error;

pub type Result<T> = std::result::Result<T, MfgError>;

#[derive(Debug, Error)]
pub enum MfgError {
    #[error("model evaluation error: {function} returned a non-finite value at {tuple}")]
    ModelEvaluation { function: &'static str, tuple: String },

    #[error("empty bundle: {0}")]
    EmptyBundle(String),

    #[error("size mismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("ensembles belong to different scenarios ({left} vs {right})")]
    ScenarioMismatch { left: usize, right: usize },

    #[error("minimizer not found: first-order residual {residual:e} after {iterations} iterations")]
    MinimizerNotFound { residual: f64, iterations: usize },

    #[error("degenerate basis at step {step}")]
    DegenerateBasis { step: usize },

    #[error("Picard iteration did not converge after {} iterations (last residual {:e})", .history.len(), .history.last().copied().unwrap_or(f64::NAN))]
    PicardNonConvergence { history: Vec<f64> },

    #[error("Picard divergence; try continuation (residual history {history:?})")]
    PicardDivergence { history: Vec<f64> },

    #[error("continuation stalled at gamma = {gamma} (step fell below {min_step:e})")]
    ContinuationStalled { gamma: f64, min_step: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("Riccati escape at t = {time}: |coefficient| exceeded 1e8")]
    RiccatiEscape { time: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("empty deviation family")]
    EmptyFamily,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
