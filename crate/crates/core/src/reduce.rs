//! Building the reduced token sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clip_metric::{score_tokens, MetricError, PooledTextEmbedding, SignificanceScores};
use crate::select::{SelectError, SelectionResult, SelectionStrategy, StrategyKind};
use crate::tensor_io::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum ReduceError {
    #[error("selection covers {selection} tokens but source has {source_rows} rows")]
    SizeMismatch { selection: usize, source_rows: usize },
    #[error("selection index {index} out of range for {n} tokens")]
    IndexOutOfRange { index: usize, n: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Select(#[from] SelectError),
}

/// Kept rows in source order, followed by the mean of the dropped rows when any were
/// dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSequence {
    pub tokens: Matrix,
    pub kept_indices: Vec<usize>,
    pub has_aggregate: bool,
    pub source_n: usize,
}

impl ReducedSequence {
    pub fn output_rows(&self) -> usize {
        self.tokens.rows()
    }
}

/// JSON sidecar written next to a reduced tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedSidecar {
    pub kept_indices: Vec<usize>,
    pub has_aggregate: bool,
    pub source_n: usize,
    pub strategy: String,
    pub strategy_kind: StrategyKind,
    pub threshold: Option<f64>,
    pub output_rows: usize,
}

impl ReducedSidecar {
    pub fn new(reduced: &ReducedSequence, selection: &SelectionResult, strategy: &SelectionStrategy) -> Self {
        Self {
            kept_indices: reduced.kept_indices.clone(),
            has_aggregate: reduced.has_aggregate,
            source_n: reduced.source_n,
            strategy: strategy.to_string(),
            strategy_kind: selection.strategy,
            threshold: selection.threshold,
            output_rows: reduced.output_rows(),
        }
    }
}

fn check_sizes(source: &Matrix, selection: &SelectionResult) -> Result<(), ReduceError> {
    if selection.n_total != source.rows() {
        return Err(ReduceError::SizeMismatch {
            selection: selection.n_total,
            source_rows: source.rows(),
        });
    }
    if let Some(&index) = selection.indices.iter().find(|&&i| i >= source.rows()) {
        return Err(ReduceError::IndexOutOfRange { index, n: source.rows() });
    }
    Ok(())
}

/// Mean of the rows not in `selection`, or `None` if every row was kept.
///
/// Accumulates in f64.
pub fn aggregate_unselected(source: &Matrix, selection: &SelectionResult) -> Result<Option<Vec<f32>>, ReduceError> {
    check_sizes(source, selection)?;
    let dropped = selection.complement();
    if dropped.is_empty() {
        return Ok(None);
    }
    let mut acc = vec![0f64; source.cols()];
    for &i in &dropped {
        for (a, &v) in acc.iter_mut().zip(source.row(i)) {
            *a += v as f64;
        }
    }
    let n = dropped.len() as f64;
    Ok(Some(acc.into_iter().map(|a| (a / n) as f32).collect()))
}

pub fn reduce(source: &Matrix, selection: &SelectionResult) -> Result<ReducedSequence, ReduceError> {
    let aggregate = aggregate_unselected(source, selection)?;
    let extra = usize::from(aggregate.is_some());
    let mut data = Vec::with_capacity((selection.k() + extra) * source.cols());
    for &i in &selection.indices {
        data.extend_from_slice(source.row(i));
    }
    if let Some(row) = &aggregate {
        data.extend_from_slice(row);
    }
    let tokens = Matrix::new(selection.k() + extra, source.cols(), data)
        .expect("rows are copied from a valid matrix");
    Ok(ReducedSequence {
        tokens,
        kept_indices: selection.indices.clone(),
        has_aggregate: aggregate.is_some(),
        source_n: source.rows(),
    })
}

/// Every intermediate artifact of one scoring, selection and reduction pass.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub scores: SignificanceScores,
    pub selection: SelectionResult,
    pub reduced: ReducedSequence,
}

pub fn run_pipeline(
    image_tokens: &Matrix,
    text: &PooledTextEmbedding,
    strategy: &SelectionStrategy,
) -> Result<PipelineOutput, ReduceError> {
    let scores = score_tokens(image_tokens, text)?;
    let selection = strategy.apply(&scores)?;
    let reduced = reduce(image_tokens, &selection)?;
    Ok(PipelineOutput { scores, selection, reduced })
}
