//! Parallel-reasoning decode engine at desk scale.
//!
//! A prompt is expanded into several isolated reasoning paths that decode
//! concurrently over a forked KV cache and are then merged for a summary
//! stage. Path isolation comes from a visibility mask, path identity from
//! learnable embeddings folded into the rotary key/value transform; a
//! monolithic masked forward pass serves as the oracle every incremental
//! decode is replayed against.

pub mod datakit;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod kvcache;
pub mod layout;
pub mod mask;
pub mod matrix;
pub mod model;
pub mod precision;
pub mod rng;
pub mod rope;

pub use error::{Error, Result};
pub use kvcache::{BlockStore, CacheStats, KvConfig, MergedView, SequenceCache, SequenceHandle};
pub use layout::{SegmentLayout, SpecialVocab, TokenId, TokenRole, MAX_PATHS};
pub use mask::{build_causal_mask, build_path_mask, is_visible, mask_to_pgm, PathMask};
pub use matrix::Matrix;
pub use model::{ModelConfig, ToyDecoder};
pub use precision::Precision;
pub use rope::{
    assign_positions, assign_positions_disjoint, PathEmbeddingTable, PositionPlan, RotaryParams,
};
