use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowDetError {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("sampling diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("non-finite value in decoder stage {stage}: {detail}")]
    Numeric { stage: usize, detail: String },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("assignment infeasible: {rows} ground truths but only {cols} predictions")]
    Infeasible { rows: usize, cols: usize },

    #[error("invalid cost matrix: {0}")]
    InvalidCost(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("config hash mismatch: checkpoint has {found}, expected {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("image {id}: {detail}")]
    MissingImage { id: String, detail: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FlowDetError {
    /// True for failures caused by numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            FlowDetError::Divergence { .. }
                | FlowDetError::Numeric { .. }
                | FlowDetError::NonFiniteLoss(_)
                | FlowDetError::InvalidState(_)
        )
    }
}

pub type Result<T, E = FlowDetError> = std::result::Result<T, E>;
