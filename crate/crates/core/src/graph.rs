//! Semantic similarity graph over visual tokens.
//!
//! Edge weights are clamped cosine similarities, `G[i][j] = max(cos(x_i, x_j), 0)`
//! for `i != j` and zero on the diagonal. The normalized graph is
//! `D^{-1/2} G D^{-1/2}` with `D` the diagonal degree matrix; a node of degree
//! zero gets `D^{-1/2} = 0`, so its row and column of the normalized graph
//! vanish.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::types::TokenSequence;

/// Rows with a Euclidean norm below this are treated as corrupt.
pub const MIN_TOKEN_NORM: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    adjacency: Matrix,
    degree: Vec<f64>,
    normalized: Matrix,
}

impl SimilarityGraph {
    /// Adjacency `G`.
    pub fn adjacency(&self) -> &Matrix {
        &self.adjacency
    }

    /// Diagonal of `D`.
    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    /// Normalized adjacency `Ĝ`.
    pub fn normalized(&self) -> &Matrix {
        &self.normalized
    }

    pub fn len(&self) -> usize {
        self.degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degree.is_empty()
    }

    /// Number of undirected edges with positive weight.
    pub fn edge_count(&self) -> usize {
        let n = self.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency.get(i, j) > 0.0)
            .count()
    }

    pub fn isolated_count(&self) -> usize {
        self.degree.iter().filter(|&&d| d == 0.0).count()
    }

    /// Builds a graph from a precomputed normalized adjacency, for callers
    /// that want to drive aggregation with a hand-made graph.
    pub fn from_normalized(normalized: Matrix) -> Result<Self> {
        let n = normalized.rows();
        if normalized.cols() != n {
            return Err(Error::DimensionMismatch { expected: n, actual: normalized.cols() });
        }
        Ok(Self { adjacency: normalized.clone(), degree: alloc::vec![0.0; n], normalized })
    }
}

pub fn build_similarity_graph(tokens: &TokenSequence) -> Result<SimilarityGraph> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::InvalidTokens("graph needs at least one token"));
    }

    let norms = (0..n)
        .map(|i| {
            let r = tokens.row(i);
            let norm = libm::sqrt(dot(r, r));
            if norm < MIN_TOKEN_NORM {
                Err(Error::ZeroNormToken(i))
            } else {
                Ok(norm)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut adjacency = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let cos = dot(tokens.row(i), tokens.row(j)) / (norms[i] * norms[j]);
            let w = if cos > 0.0 { cos } else { 0.0 };
            adjacency.set(i, j, w);
            adjacency.set(j, i, w);
        }
    }

    let degree: Vec<f64> = adjacency.iter_rows().map(|r| r.iter().sum()).collect();
    let inv_sqrt: Vec<f64> =
        degree.iter().map(|&d| if d > 0.0 { 1.0 / libm::sqrt(d) } else { 0.0 }).collect();

    let mut normalized = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = inv_sqrt[i] * adjacency.get(i, j) * inv_sqrt[j];
            normalized.set(i, j, v);
            normalized.set(j, i, v);
        }
    }

    Ok(SimilarityGraph { adjacency, degree, normalized })
}
