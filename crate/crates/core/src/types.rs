use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Ordered visual token embeddings, `n × d`, each row tagged with its
/// position in the original (uncompressed) sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    data: Matrix,
    origin_indices: Vec<usize>,
}

impl TokenSequence {
    /// Tokens numbered `0..n` in their original order.
    pub fn new(data: Matrix) -> Result<Self> {
        let origin = (0..data.rows()).collect();
        Self::with_origin(data, origin)
    }

    pub fn with_origin(data: Matrix, origin_indices: Vec<usize>) -> Result<Self> {
        if data.cols() == 0 {
            return Err(Error::InvalidTokens("embedding width must be at least 1"));
        }
        if origin_indices.len() != data.rows() {
            return Err(Error::InvalidTokens("origin index count differs from row count"));
        }
        if origin_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidTokens("origin indices must be strictly increasing"));
        }
        if !data.is_finite() {
            return Err(Error::InvalidTokens("non-finite embedding value"));
        }
        Ok(Self { data, origin_indices })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidTokens("use TokenSequence::new for an empty sequence"));
        }
        Self::new(Matrix::from_rows(rows))
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    #[inline]
    pub fn data(&self) -> &Matrix {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    #[inline]
    pub fn origin_indices(&self) -> &[usize] {
        &self.origin_indices
    }

    /// Subsequence at the given local indices, which must be strictly increasing.
    pub fn gather(&self, local: &[usize]) -> Self {
        debug_assert!(local.windows(2).all(|w| w[0] < w[1]));
        Self {
            data: self.data.gather_rows(local),
            origin_indices: local.iter().map(|&i| self.origin_indices[i]).collect(),
        }
    }

    /// Same origins, new values. Used by the aggregation steps.
    pub(crate) fn with_data(&self, data: Matrix) -> Self {
        debug_assert_eq!(data.rows(), self.origin_indices.len());
        Self { data, origin_indices: self.origin_indices.clone() }
    }

    pub(crate) fn from_parts_unchecked(data: Matrix, origin_indices: Vec<usize>) -> Self {
        Self { data, origin_indices }
    }
}

/// Attention of the last text token onto the live visual tokens at one
/// layer, one row per head. Rows are a slice of a softmax row, so they are
/// bounded by 1 but need not sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer_index: usize,
    pub rows: Matrix,
}

impl AttentionRecord {
    pub fn new(layer_index: usize, rows: Matrix) -> Result<Self> {
        if rows.rows() == 0 {
            return Err(Error::ShapeMismatch("attention record needs at least one head"));
        }
        if rows.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("attention weights must lie in [0, 1]"));
        }
        Ok(Self { layer_index, rows })
    }

    #[inline]
    pub fn heads(&self) -> usize {
        self.rows.rows()
    }

    #[inline]
    pub fn n_vis(&self) -> usize {
        self.rows.cols()
    }
}

/// Compression hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisaConfig {
    /// Magnitude of the information propagated from removed to kept tokens.
    pub alpha: f64,
    /// Layers per group after the two-layer head group.
    pub group_size_s: usize,
    /// Trailing layers of a group whose attention is averaged.
    pub avg_layers_m: usize,
    /// Fraction of visual tokens kept at each boundary.
    pub keep_ratio_p: f64,
    pub total_layers: usize,
    /// Floor on kept tokens per step.
    pub min_keep: usize,
}

impl VisaConfig {
    pub const DEFAULT_ALPHA: f64 = 0.1;
    pub const DEFAULT_GROUP_SIZE: usize = 5;
    pub const DEFAULT_AVG_LAYERS: usize = 2;

    pub fn new(total_layers: usize, keep_ratio_p: f64) -> Self {
        Self {
            alpha: Self::DEFAULT_ALPHA,
            group_size_s: Self::DEFAULT_GROUP_SIZE,
            avg_layers_m: Self::DEFAULT_AVG_LAYERS,
            keep_ratio_p,
            total_layers,
            min_keep: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidConfig("alpha must be finite and >= 0"));
        }
        if self.group_size_s == 0 {
            return Err(Error::InvalidConfig("group size must be >= 1"));
        }
        if self.avg_layers_m == 0 {
            return Err(Error::InvalidConfig("averaged layer count must be >= 1"));
        }
        if !(self.keep_ratio_p > 0.0 && self.keep_ratio_p <= 1.0) {
            return Err(Error::InvalidConfig("keep ratio must lie in (0, 1]"));
        }
        if self.total_layers < 2 {
            return Err(Error::InvalidConfig("need at least 2 layers"));
        }
        if self.min_keep == 0 {
            return Err(Error::InvalidConfig("min_keep must be >= 1"));
        }
        Ok(())
    }
}

/// One group boundary of a compression run.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryRecord {
    pub group_index: usize,
    pub kept_origin_indices: Vec<usize>,
    pub removed_origin_indices: Vec<usize>,
    pub token_count_before: usize,
    pub token_count_after: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompressionReport {
    pub boundaries: Vec<BoundaryRecord>,
    /// Closed-form `(1 - p^N) / (N (1 - p))` for the run's `p` and group count.
    pub theoretical_cost_ratio: f64,
    /// FLOPs actually spent by the run under the cost model, summed over layers.
    pub simulated_cost_units: f64,
    /// The same sum for an uncompressed run.
    pub uncompressed_cost_units: f64,
}

impl CompressionReport {
    pub fn total_removed(&self) -> usize {
        self.boundaries.iter().map(|b| b.removed_origin_indices.len()).sum()
    }

    pub fn simulated_ratio(&self) -> f64 {
        if self.uncompressed_cost_units == 0.0 {
            1.0
        } else {
            self.simulated_cost_units / self.uncompressed_cost_units
        }
    }
}
