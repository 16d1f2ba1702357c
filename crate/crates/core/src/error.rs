use thiserror::Error;

/// Errors surfaced by the engine. Message text for the contract-level
/// failures (`EmptyLogits`, `OffsetCollidesAnchors`, ...) is stable and
/// asserted by tests; don't reword it casually.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("query sees nothing")]
    QuerySeesNothing,

    #[error("offset collides with anchors")]
    OffsetCollidesAnchors,

    #[error("invalid tree mask")]
    InvalidTreeMask,

    #[error("draft requires target context")]
    DraftNeedsContext,

    #[error("malformed model file: {0}")]
    MalformedModel(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("token {0} out of range for vocab size {1}")]
    TokenOutOfRange(u32, usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
