use thiserror::Error;

/// Unified error type for the engine.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("dimension mismatch in {ctx}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimMismatch {
        ctx: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("degenerate mask: row {row} has no valid columns")]
    DegenerateMask { row: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("format error at byte offset {offset}: {msg}")]
    Format { msg: String, offset: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("batch composition error: {0}")]
    BatchComposition(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("scoring term {term_id} failed: {source}")]
    TermScoring {
        term_id: u64,
        #[source]
        source: Box<EngineError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EngineError>;
