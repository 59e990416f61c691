//! Sources of final-layer hidden states.
//!
//! [`toy`] is a small seeded transformer that runs in-process; [`provider`]
//! talks to an external process serving a real model over a line-delimited
//! JSON protocol.

pub mod provider;
pub mod toy;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid toy model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("provider timed out")]
    Timeout,
    #[error("provider error for request {id}: {message}")]
    Provider { id: u64, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Causal,
    Bidirectional,
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Causal => "causal",
            AttentionMode::Bidirectional => "bidirectional",
        })
    }
}

/// Token ids with the byte range each token covers in the source text.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenization {
    pub token_ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

impl Tokenization {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Final-layer activations, one row of width `dim` per token position.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates<S> {
    rows: usize,
    dim: usize,
    data: Vec<S>,
    attention: AttentionMode,
}

impl<S: Scalar> HiddenStates<S> {
    /// Builds states from row-major data, rejecting ragged or non-finite input.
    pub fn from_rows(rows: Vec<Vec<S>>, dim: usize, attention: AttentionMode) -> Result<Self, BackendError> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(BackendError::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(BackendError::Protocol("non-finite activation".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(HiddenStates {
            rows: rows.len(),
            dim,
            data,
            attention,
        })
    }

    pub(crate) fn from_flat(data: Vec<S>, dim: usize, attention: AttentionMode) -> Self {
        debug_assert!(dim > 0 && data.len().is_multiple_of(dim));
        HiddenStates {
            rows: data.len() / dim,
            dim,
            data,
            attention,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn attention(&self) -> AttentionMode {
        self.attention
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }
}

/// Anything that maps text to a tokenization and per-token hidden states.
pub trait Backend<S: Scalar>: Sync {
    fn encode(&self, text: &str) -> Result<(Tokenization, HiddenStates<S>), BackendError>;

    fn dim(&self) -> usize;

    fn max_seq_len(&self) -> usize;
}

impl<S: Scalar, B: Backend<S> + ?Sized> Backend<S> for &B {
    fn encode(&self, text: &str) -> Result<(Tokenization, HiddenStates<S>), BackendError> {
        (**self).encode(text)
    }

    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn max_seq_len(&self) -> usize {
        (**self).max_seq_len()
    }
}
