//! Token significance from CLIP text/image embeddings.
//!
//! Each image-patch embedding is compared to the pooled text embedding with cosine
//! similarity; a softmax over all patches turns the similarities into the
//! significance distribution that drives selection.

use serde::Serialize;
use thiserror::Error;

use crate::tensor_io::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("image token {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("empty input")]
    Empty,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("text embedding must be a single row, got {0} rows")]
    TextRows(usize),
    #[error("{n} scores do not form a {side}x{side} grid")]
    NotSquare { n: usize, side: usize },
}

/// The pooled (end-of-text) text embedding, already projected into the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledTextEmbedding(Vec<f32>);

impl PooledTextEmbedding {
    pub fn new(vec: Vec<f32>) -> Result<Self, MetricError> {
        if vec.is_empty() {
            return Err(MetricError::Empty);
        }
        if let Some(i) = vec.iter().position(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite(i));
        }
        if norm(&vec) == 0.0 {
            return Err(MetricError::ZeroNorm);
        }
        Ok(Self(vec))
    }

    /// Accepts a `1×D` matrix, the on-disk form of the pooled embedding.
    pub fn from_matrix(m: &Matrix) -> Result<Self, MetricError> {
        if m.rows() != 1 {
            return Err(MetricError::TextRows(m.rows()));
        }
        Self::new(m.row(0).to_vec())
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Per-token cosine similarities and their softmax.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignificanceScores {
    raw: Vec<f64>,
    softmax: Vec<f64>,
}

impl SignificanceScores {
    /// Wraps precomputed raw similarities, deriving the softmax.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self, MetricError> {
        let softmax = softmax(&raw)?;
        Ok(Self { raw, softmax })
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn softmax(&self) -> &[f64] {
        &self.softmax
    }

    pub fn n_tokens(&self) -> usize {
        self.raw.len()
    }

    /// Sum of softmax mass over `indices`.
    pub fn mass(&self, indices: &[usize]) -> f64 {
        indices.iter().map(|&i| self.softmax[i]).sum()
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity in f64, clamped to `[-1, 1]`.
pub fn cosine_similarity(v: &[f32], u: &[f32]) -> Result<f64, MetricError> {
    if v.len() != u.len() {
        return Err(MetricError::DimensionMismatch { left: v.len(), right: u.len() });
    }
    let (nv, nu) = (norm(v), norm(u));
    if nv == 0.0 || nu == 0.0 {
        return Err(MetricError::ZeroNorm);
    }
    Ok((dot(v, u) / (nv * nu)).clamp(-1.0, 1.0))
}

/// Max-shifted softmax.
///
/// The normalizer sums the exponentials in ascending order, so the result for each
/// element does not depend on where it sits in the input.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>, MetricError> {
    if x.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let mut sorted = exps.clone();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Scores every row of `image_tokens` against the pooled text embedding.
pub fn score_tokens(
    image_tokens: &Matrix,
    text: &PooledTextEmbedding,
) -> Result<SignificanceScores, MetricError> {
    if image_tokens.cols() != text.dim() {
        return Err(MetricError::DimensionMismatch {
            left: image_tokens.cols(),
            right: text.dim(),
        });
    }
    let u = text.as_slice();
    let raw = image_tokens
        .iter_rows()
        .enumerate()
        .map(|(i, row)| match cosine_similarity(row, u) {
            Err(MetricError::ZeroNorm) => Err(MetricError::ZeroNormRow(i)),
            other => other,
        })
        .collect::<Result<Vec<_>, _>>()?;
    SignificanceScores::from_raw(raw)
}

/// Lays the softmax scores out row-major on a `side × side` patch grid.
pub fn similarity_grid(scores: &SignificanceScores, side: usize) -> Result<Vec<Vec<f64>>, MetricError> {
    let n = scores.n_tokens();
    if side == 0 || side.checked_mul(side) != Some(n) {
        return Err(MetricError::NotSquare { n, side });
    }
    Ok(scores.softmax.chunks_exact(side).map(<[f64]>::to_vec).collect())
}

/// Side length of the square grid holding `n` tokens, if there is one.
pub fn grid_side(n: usize) -> Option<usize> {
    let s = (n as f64).sqrt().round() as usize;
    (s > 0 && s * s == n).then_some(s)
}
