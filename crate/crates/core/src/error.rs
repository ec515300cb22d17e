use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The line set does not form a tree rooted at the substation, or an
    /// impedance / capability value is out of range.
    #[error("invalid feeder topology: {0}")]
    Topology(String),

    /// A caller-supplied value violates a documented precondition.
    #[error("{0}")]
    Contract(String),

    /// A data file could not be parsed; `line` is 1-based and counts the
    /// header.
    #[error("{}:{line}: {msg}", path.display())]
    Ingest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// A model file does not match the expected format version or the
    /// architecture of the feeder it is applied to.
    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    /// Training or dual ascent produced non-finite numbers or blew past the
    /// divergence bound.
    #[error("numerical divergence at iteration {iteration} (scenario {scenario}): {detail}")]
    Divergence {
        iteration: usize,
        scenario: usize,
        detail: String,
    },

    /// The voltage band cannot be met even with inverters at their limits.
    #[error("problem appears infeasible: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
