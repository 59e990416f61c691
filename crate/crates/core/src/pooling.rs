//! Pooling rules and similarity metrics.
//!
//! Pooling and norms accumulate in `f64` whatever scalar the hidden states
//! arrive in.

use serde::Serialize;
use thiserror::Error;

use crate::backend::HiddenStates;
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolingError {
    #[error("empty token selection")]
    EmptySelection,
    #[error("token index {index} out of range for {len} positions")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("non-finite pooled value")]
    NonFinite,
}

/// Which rule produced a [`PooledEmbedding`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolRule {
    Mean,
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PooledEmbedding {
    pub vector: Vec<f64>,
    pub rule: PoolRule,
    /// Number of token positions pooled.
    pub cardinality: usize,
}

impl PooledEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Arithmetic mean of the selected rows.
pub fn mean_pool<S: Scalar>(states: &HiddenStates<S>, indices: &[usize]) -> Result<PooledEmbedding, PoolingError> {
    if indices.is_empty() {
        return Err(PoolingError::EmptySelection);
    }
    let mut acc = vec![0.0f64; states.dim()];
    for &i in indices {
        if i >= states.rows() {
            return Err(PoolingError::IndexOutOfRange {
                index: i,
                len: states.rows(),
            });
        }
        acc.iter_mut().zip(states.row(i)).for_each(|(a, v)| *a += v.wide());
    }
    let n = indices.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    finite(PooledEmbedding {
        vector: acc,
        rule: PoolRule::Mean,
        cardinality: indices.len(),
    })
}

/// Row `T - 1`.
pub fn last_pool<S: Scalar>(states: &HiddenStates<S>) -> Result<PooledEmbedding, PoolingError> {
    if states.rows() == 0 {
        return Err(PoolingError::EmptySequence);
    }
    row_pool(states, states.rows() - 1)
}

/// A single row as an embedding.
pub fn row_pool<S: Scalar>(states: &HiddenStates<S>, index: usize) -> Result<PooledEmbedding, PoolingError> {
    if index >= states.rows() {
        return Err(PoolingError::IndexOutOfRange {
            index,
            len: states.rows(),
        });
    }
    finite(PooledEmbedding {
        vector: states.row(index).iter().map(|v| v.wide()).collect(),
        rule: PoolRule::Last,
        cardinality: 1,
    })
}

fn finite(p: PooledEmbedding) -> Result<PooledEmbedding, PoolingError> {
    if p.vector.iter().all(|v| v.is_finite()) {
        Ok(p)
    } else {
        Err(PoolingError::NonFinite)
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `<u, v> / (|u| |v|)`, clamped to `[-1, 1]`.
///
/// The denominator is `sqrt(|u|² |v|²)`, so `cosine(v, v)` is exactly 1.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, PoolingError> {
    if u.len() != v.len() {
        return Err(PoolingError::DimensionMismatch(u.len(), v.len()));
    }
    let uu = dot(u, u);
    let vv = dot(v, v);
    if uu == 0.0 || vv == 0.0 {
        return Err(PoolingError::ZeroVector);
    }
    Ok((dot(u, v) / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// `|u - v|₂`.
pub fn euclidean(u: &[f64], v: &[f64]) -> Result<f64, PoolingError> {
    if u.len() != v.len() {
        return Err(PoolingError::DimensionMismatch(u.len(), v.len()));
    }
    Ok(u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}
