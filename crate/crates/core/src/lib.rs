//! Desk-scale three-expert mixture-of-transformers manipulation policy:
//! autodiff engine, shared-attention trunk, depth and action experts,
//! deterministic tabletop simulator, shard dataset format, and the
//! train/eval pipeline.

pub mod action;
pub mod config;
pub mod data;
pub mod depth;
pub mod error;
pub mod graph;
pub mod infer;
pub mod mot;
pub mod params;
pub mod semantic;
pub mod sim;
pub mod train;

pub use action::{ActionChunk, DimStats};
pub use config::{DepthInit, DepthInput, MaskMode, ModelConfig, RunConfig, Stage};
pub use data::{DataSet, NormStats, ShardManifest};
pub use depth::DepthMap;
pub use error::{Result, TrimotError};
pub use graph::{Graph, Real, Var};
pub use infer::PolicyModel;
pub use mot::{StreamLayout, StreamSet};
pub use params::{ParamSet, ParamSpec};
pub use semantic::Vocabulary;
pub use sim::{Scene, Suite, TaskSpec};
pub use train::{Checkpoint, EvalMetrics, RunReport};
