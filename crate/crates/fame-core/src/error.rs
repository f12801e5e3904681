use thiserror::Error;

/// Errors surfaced by the continual-RL laboratory.
#[derive(Debug, Error)]
pub enum FameError {
    /// An MDP or task definition violates a structural invariant.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A procedural generator exhausted its retry budget.
    #[error("generation failed: {0}")]
    GenerationFailed(String),

    /// A buffer bucket needed for weight estimation is empty.
    #[error("empty buffer for task {task_id}; integration must be skipped")]
    EmptyTaskBucket { task_id: usize },

    /// A run configuration failed validation before running.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Serialization / deserialization of the flat numeric layout failed.
    #[error("flat layout error: {0}")]
    FlatLayout(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FameError>;
