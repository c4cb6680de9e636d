//! Error taxonomy. The variants map onto CLI exit codes: precision and
//! certificate failures are 2, rank failures 3, budget refusals 4.

use thiserror::Error;

#[derive(Error, Debug, Clone)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precision exhausted: {0}")]
    Precision(String),

    #[error(
        "certificate failure: residual valuation {got} below required floor {floor} ({context})"
    )]
    Certificate { got: i64, floor: i64, context: String },

    #[error("rank deficient at working precision: rank {rank} of {cols} columns ({context})")]
    RankDeficient { rank: usize, cols: usize, context: String },

    #[error("evaluation budget refused: {needed} steps needed, budget is {budget}")]
    Budget { needed: u64, budget: u64 },

    #[error("combinatorial budget refused: {count} {what}, cap is {cap}")]
    Combinatorial { count: u64, cap: u64, what: String },

    #[error("cache error: {0}")]
    Cache(String),

    #[error("unresolved symbols after all solve routes: {0}")]
    Unresolved(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Precision(_) | Error::Certificate { .. } => 2,
            Error::RankDeficient { .. } => 3,
            Error::Budget { .. } | Error::Combinatorial { .. } => 4,
            _ => 1,
        }
    }
}
