use thiserror::Error;

/// Crate-wide error type. Parse errors carry enough position detail to
/// point at the offending byte or line; everything else is an invariant
/// or configuration violation surfaced before work starts.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("unknown symbol '{0}'")]
    UnknownSymbol(String),

    #[error("arity mismatch for '{op}': expected {expected}, got {got}")]
    ArityMismatch {
        op: String,
        expected: usize,
        got: usize,
    },

    #[error("rule file line {line}: {msg}")]
    RuleParse { line: usize, msg: String },

    #[error("rule '{rule}': right side uses variable ?{var} not bound on the left")]
    FreeVariable { rule: String, var: String },

    #[error("no e-class with id {0}")]
    UnknownClass(u32),

    #[error("substitution has no binding for ?{0}")]
    UnboundVar(String),

    #[error("action {action} out of range: rule set has {count} rules")]
    InvalidAction { action: u32, count: usize },

    #[error("episode is already done")]
    EpisodeDone,

    #[error("no term extractable from the root class within the given depth")]
    ExtractNoTerm,

    #[error("extraction enumeration budget exceeded")]
    ExtractBudget,

    #[error("every root action is saturated; the episode is over")]
    Saturated,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("worker pool failure: {0}")]
    Worker(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
