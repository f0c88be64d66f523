use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of two operands disagree (row counts, dims, lengths).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An input value is outside the mathematical domain (non-finite entries,
    /// non-positive temperature, negative hardness scale).
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation-level precondition does not hold (empty term set,
    /// wrong aggregator for the requested derivative, ...).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A configuration value is invalid or inconsistent with the data.
    #[error("invalid config: {0}")]
    Config(String),

    /// A row that should be normalized has near-zero norm.
    #[error("degenerate embedding: row {row} has norm {norm:e} (< 1e-12)")]
    DegenerateEmbedding { row: usize, norm: f64 },

    /// A similarity or gradient turned non-finite; `pair` is the offending
    /// target index within the batch (0 = positive, i >= 1 = negative i-1).
    #[error("non-finite intermediate for pair {pair}: {what}")]
    NonFinite { pair: usize, what: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A file failed magic/version/layout validation.
    #[error("file format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
