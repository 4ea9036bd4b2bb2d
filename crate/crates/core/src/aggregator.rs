//! Graph aggregation of removed tokens into kept tokens.
//!
//! For every kept token `i`:
//!
//! ```text
//! x_i <- x_i + alpha * sum_{j in removed} Ĝ[i][j] * x_j
//! ```
//!
//! where `Ĝ` is normalized over the full live set before the kept × removed
//! block is taken. Each removed token reaches every kept token it is
//! positively connected to, not just its closest one.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{build_similarity_graph, SimilarityGraph};
use crate::matrix::Matrix;
use crate::selector::{compute_importance, split_tokens, SplitResult};
use crate::types::{AttentionRecord, TokenSequence, VisaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphStats {
    pub edge_count: usize,
    pub isolated_count: usize,
}

impl From<&SimilarityGraph> for GraphStats {
    fn from(g: &SimilarityGraph) -> Self {
        Self { edge_count: g.edge_count(), isolated_count: g.isolated_count() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionStepResult {
    pub new_tokens: TokenSequence,
    pub split: SplitResult,
    pub graph_stats: GraphStats,
}

pub fn aggregate(
    tokens: &TokenSequence,
    graph: &SimilarityGraph,
    split: &SplitResult,
    alpha: f64,
) -> Result<TokenSequence> {
    let n = tokens.len();
    if graph.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: graph.len() });
    }
    if split.n() != n
        || split.kept_local_indices.iter().chain(&split.removed_local_indices).any(|&i| i >= n)
    {
        return Err(Error::InvalidInput("split does not cover the token set"));
    }

    let kept = tokens.gather(&split.kept_local_indices);
    // Exact identity when nothing flows, including signed zeros.
    if alpha == 0.0 || split.removed_local_indices.is_empty() {
        return Ok(kept);
    }

    let d = tokens.dim();
    let g_hat = graph.normalized();
    let mut out = kept.data().clone();
    let mut acc = alloc::vec![0.0; d];
    for (row, &i) in split.kept_local_indices.iter().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &j in &split.removed_local_indices {
            let w = g_hat.get(i, j);
            if w == 0.0 {
                continue;
            }
            for (a, &x) in acc.iter_mut().zip(tokens.row(j)) {
                *a += w * x;
            }
        }
        for (o, &a) in out.row_mut(row).iter_mut().zip(&acc) {
            *o += alpha * a;
        }
    }
    Ok(kept.with_data(out))
}

/// Graph, importance, split and aggregation, in that order, on the live
/// visual tokens at one group boundary. The graph is always rebuilt from the
/// tokens passed in.
pub fn compress_step(
    tokens: &TokenSequence,
    records: &[AttentionRecord],
    config: &VisaConfig,
) -> Result<CompressionStepResult> {
    config.validate()?;
    if let Some(r) = records.iter().find(|r| r.n_vis() != tokens.len()) {
        return Err(Error::DimensionMismatch { expected: tokens.len(), actual: r.n_vis() });
    }
    let graph = build_similarity_graph(tokens)?;
    let importance = compute_importance(records, config.avg_layers_m)?;
    let split = split_tokens(&importance, config.keep_ratio_p, config.min_keep)?;
    let new_tokens = aggregate(tokens, &graph, &split, config.alpha)?;
    Ok(CompressionStepResult { new_tokens, split, graph_stats: GraphStats::from(&graph) })
}

/// Kept × removed block of `Ĝ`.
pub fn kept_removed_block(graph: &SimilarityGraph, split: &SplitResult) -> Matrix {
    let rows: Vec<Vec<f64>> = split
        .kept_local_indices
        .iter()
        .map(|&i| split.removed_local_indices.iter().map(|&j| graph.normalized().get(i, j)).collect())
        .collect();
    let cols = split.removed_local_indices.len();
    Matrix::from_vec(rows.len(), cols, rows.concat())
}
