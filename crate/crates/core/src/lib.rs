//! Rank-based conformal prediction for graph node classification.
//!
//! A base GCN is trained with cross-entropy; a topology-aware correction GCN
//! is then trained on its probabilities with an added differentiable
//! conformal loss, and final prediction sets come from hard split conformal
//! prediction with THR, APS or RANK scores.

pub mod cp;
pub mod gcn;
pub mod graph;
pub mod pipeline;
pub mod smooth;
pub mod tensor;

pub use pipeline::PipelineError as Error;

pub type Result<T> = std::result::Result<T, Error>;
