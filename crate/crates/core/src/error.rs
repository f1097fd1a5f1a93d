use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (bad dimensions, indices, simplex).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Every particle assigns zero likelihood (after flooring) to one observation.
    #[error("weight degeneracy at period {period}, instance {instance}, observation {observation} (row {row})")]
    Degenerate {
        period: u32,
        instance: u32,
        observation: usize,
        row: usize,
    },

    #[error("instance {instance} (seed {seed}) failed: {source}")]
    Instance {
        instance: u32,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("oracle refused: enumeration cost {cost:.3e} exceeds bound {bound:.0e}")]
    OracleCost { cost: f64, bound: f64 },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("parse error in {source_name}: {message}")]
    Parse { source_name: String, message: String },

    #[error("snapshot version mismatch: file has {found}, this build reads {expected}")]
    SnapshotVersion { found: u32, expected: u32 },

    #[error("snapshot integrity: {0}")]
    SnapshotIntegrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
