//! Anchor-conditioned long-term referring for fixed-view video.
//!
//! Given per-frame features and instance proposals from a fixed camera, the
//! engine discovers static scene anchors, maps a language query onto them,
//! and tracks the referred object through exits and re-entries with an
//! anchor-guided search prior and an identity gate.

pub mod ablation;
pub mod anchor;
pub mod association;
pub mod config;
pub mod container;
pub mod embedder;
pub mod embedding;
pub mod error;
pub mod exec;
pub mod heads;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod prior;
pub mod reid;
pub mod sim;
pub mod types;
pub mod validate;

pub use anchor::{build_bank, AnchorBank, AnchorMap, BankParams};
pub use config::RunConfig;
pub use container::{FrameSource, InMemoryTrace, TraceReader, TraceWriter};
pub use embedding::Embedding;
pub use error::{Error, Result};
pub use heads::AlignmentHeads;
pub use pipeline::{Engine, RunOutput};
pub use types::{BBox, FrameOutput, PerceptionFrame, Proposal, QuerySpec};
