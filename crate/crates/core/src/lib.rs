//! Visual token reduction for multimodal LLMs using the CLIP text/image similarity
//! metric, plus an analytical model of the inference cost it saves.
//!
//! Pipeline: [`clip_metric::score_tokens`] → [`select`] → [`reduce::reduce`].

pub mod cli;
pub mod clip_metric;
pub mod cost;
pub mod reduce;
pub mod report;
pub mod select;
pub mod tensor_io;

pub use clip_metric::{PooledTextEmbedding, SignificanceScores};
pub use cost::{compare_costs, CostReport, HardwareSpec, ModelSpec, Precision};
pub use reduce::{run_pipeline, PipelineOutput, ReducedSequence};
pub use select::{SelectionResult, SelectionStrategy, StrategyKind};
pub use tensor_io::{read_tensor, write_tensor, Matrix};
