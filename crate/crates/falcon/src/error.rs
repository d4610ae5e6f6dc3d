//! Error taxonomy shared across the crate.
//!
//! Variants map onto the CLI exit-code classes: configuration, data,
//! training divergence, checkpoint integrity, and report-schema errors.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not compose for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A data file is malformed (bad magic, wrong header fields).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Two related data files disagree (e.g. image/label counts).
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Checkpoint carries an unrecognized format version.
    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Checkpoint payload does not match its recorded checksum.
    #[error("checkpoint checksum mismatch: stored {stored}, computed {computed}")]
    CheckpointChecksum { stored: String, computed: String },

    /// Experiment or perturbation configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A loss became non-finite during training.
    #[error("training diverged at step {step}: {term} is not finite")]
    Divergence { step: usize, term: &'static str },

    /// A report or config file does not match the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Temperature fitting could not proceed (degenerate inputs).
    #[error("temperature fit error: {0}")]
    TemperatureFit(String),

    /// An unregistered perturbation kind was requested.
    #[error("unknown perturbation kind: {0}")]
    UnknownPerturbation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
