// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by model construction, analyses and trace I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent model, operator or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A step, readout position or prefix length outside its valid range.
    #[error("range error: {0}")]
    Range(String),

    /// Mismatched dimensions or supports.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument (empty collection, unknown format name, ...).
    #[error("argument error: {0}")]
    Argument(String),

    /// A symbol that is not part of the model vocabulary.
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// Data that cannot support the requested analysis.
    #[error("data error: {0}")]
    Data(String),

    /// A serialized artifact written under a different schema.
    #[error("unsupported schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    /// Malformed line in a newline-delimited file.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A record that parsed but violates its invariants.
    #[error("record `{example_id}`: {message}")]
    Record { example_id: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
