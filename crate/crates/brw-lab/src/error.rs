//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or estimator was called outside its parameter domain.
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// An operation received inputs it cannot act on (empty sample, grid too
    /// short, track too short, negative truncation level).
    #[error("domain error: {0}")]
    Domain(String),

    /// The live population outgrew the hard particle cap. Simulation stops
    /// rather than silently subsampling; the generation index is reported so
    /// the caller can shrink the horizon or tighten the prune cap.
    #[error("particle cap {cap} exceeded at generation {generation} ({population} live particles)")]
    Budget {
        generation: usize,
        population: usize,
        cap: usize,
    },

    /// A runtime self-check failed, for example a rejection envelope that
    /// the renewal table was supposed to bound.
    #[error("internal consistency violation: {0}")]
    Consistency(String),

    /// Experiment configuration rejected before execution; the message names
    /// the offending field.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for config problems, 3 for budget
    /// exhaustion, 1 for everything else (assertion-level failures).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter { .. } => 2,
            Error::Budget { .. } => 3,
            _ => 1,
        }
    }
}
