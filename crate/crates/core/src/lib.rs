//! Visual token compression for transformer decoders.
//!
//! Visual tokens are progressively compressed between groups of decoder
//! layers. At every group boundary a cosine-similarity graph is built over
//! the live visual tokens, the tokens are ranked by how strongly the last
//! text token attends to them, and the information of the dropped tokens is
//! propagated into the survivors through the symmetrically normalized graph
//! before they are discarded.
//!
//! The crate is `no_std` (it needs `alloc`) and purely computational:
//!
//! - [`graph`] builds the similarity graph and its normalization.
//! - [`selector`] computes the importance indicator, the top-k split and the
//!   layer group schedule.
//! - [`aggregator`] performs the graph aggregation and a full compression step.
//! - [`decoder`] is a small deterministic decoder that drives the pipeline end
//!   to end during prefill and generates greedily afterwards.
//! - [`flops`] is the analytic cost model.
//! - [`baselines`] holds one-shot pruning and average merging for comparison.
//!
//! File formats and the command-line driver live in the `visa` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod aggregator;
pub mod baselines;
pub mod decoder;
mod error;
pub mod flops;
pub mod graph;
mod matrix;
pub mod selector;
mod types;

pub use aggregator::{aggregate, compress_step, CompressionStepResult, GraphStats};
pub use baselines::{average_merge, fastv_prune};
pub use error::{Error, Result};
pub use graph::{build_similarity_graph, SimilarityGraph};
pub use matrix::Matrix;
pub use selector::{
    build_group_schedule, compute_importance, keep_count, split_tokens, GroupSchedule,
    ImportanceScore, SplitResult,
};
pub use types::{AttentionRecord, BoundaryRecord, CompressionReport, TokenSequence, VisaConfig};
