//! Group-wise token selection.
//!
//! Decoder layers are partitioned into a two-layer head group followed by
//! groups of `S` layers (the last one possibly shorter). After every group but
//! the last, the visual tokens are ranked by the attention the last text token
//! pays them, averaged over heads and over the group's trailing layers, and
//! the top fraction `p` is kept.

use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::types::AttentionRecord;

/// Layers in the first group.
pub const HEAD_GROUP_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSchedule {
    groups: Vec<Range<usize>>,
}

impl GroupSchedule {
    /// A schedule from explicit contiguous ranges starting at layer 0.
    pub fn from_groups(groups: Vec<Range<usize>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidSchedule("no groups"));
        }
        let mut next = 0;
        for g in &groups {
            if g.start != next || g.end <= g.start {
                return Err(Error::InvalidSchedule("groups must be contiguous and non-empty"));
            }
            next = g.end;
        }
        Ok(Self { groups })
    }

    /// `n_groups` groups of `layers_per_group` layers each.
    pub fn uniform(n_groups: usize, layers_per_group: usize) -> Result<Self> {
        if n_groups == 0 || layers_per_group == 0 {
            return Err(Error::InvalidSchedule("uniform schedule needs positive sizes"));
        }
        Self::from_groups(
            (0..n_groups).map(|g| g * layers_per_group..(g + 1) * layers_per_group).collect(),
        )
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    /// Number of groups, `N`.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn total_layers(&self) -> usize {
        self.groups.last().map_or(0, |g| g.end)
    }

    /// Group indices after which aggregation runs: every group but the last.
    pub fn vta_boundaries(&self) -> Range<usize> {
        0..self.groups.len() - 1
    }

    /// Group containing `layer`.
    pub fn group_of(&self, layer: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&layer))
    }

    /// Group index whose boundary falls right after `layer`, if any.
    pub fn boundary_after(&self, layer: usize) -> Option<usize> {
        let g = self.group_of(layer)?;
        (self.groups[g].end == layer + 1 && g + 1 < self.groups.len()).then_some(g)
    }
}

pub fn build_group_schedule(total_layers: usize, group_size_s: usize) -> Result<GroupSchedule> {
    if total_layers < HEAD_GROUP_LAYERS {
        return Err(Error::InvalidSchedule("need at least 2 layers"));
    }
    if group_size_s == 0 {
        return Err(Error::InvalidSchedule("group size must be >= 1"));
    }
    let mut groups = Vec::with_capacity(2 + (total_layers - HEAD_GROUP_LAYERS) / group_size_s);
    groups.push(0..HEAD_GROUP_LAYERS);
    let mut start = HEAD_GROUP_LAYERS;
    while start < total_layers {
        let end = (start + group_size_s).min(total_layers);
        groups.push(start..end);
        start = end;
    }
    Ok(GroupSchedule { groups })
}

/// Per-token importance averaged over heads and layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScore {
    pub scores: Vec<f64>,
    pub source_layers: Vec<usize>,
    pub heads: usize,
}

/// Averages the last `min(avg_layers_m, records.len())` records over all heads.
pub fn compute_importance(records: &[AttentionRecord], avg_layers_m: usize) -> Result<ImportanceScore> {
    let first = records.first().ok_or(Error::ShapeMismatch("no attention records"))?;
    if avg_layers_m == 0 {
        return Err(Error::InvalidConfig("averaged layer count must be >= 1"));
    }
    let (n, heads) = (first.n_vis(), first.heads());
    if records.iter().any(|r| r.n_vis() != n) {
        return Err(Error::ShapeMismatch("records disagree on visual token count"));
    }
    if records.iter().any(|r| r.heads() != heads) {
        return Err(Error::ShapeMismatch("records disagree on head count"));
    }

    let m = avg_layers_m.min(records.len());
    let used = &records[records.len() - m..];
    let mut scores = alloc::vec![0.0; n];
    for rec in used {
        for row in rec.rows.iter_rows() {
            for (s, &a) in scores.iter_mut().zip(row) {
                *s += a;
            }
        }
    }
    let denom = (m * heads) as f64;
    scores.iter_mut().for_each(|s| *s /= denom);

    Ok(ImportanceScore { scores, source_layers: used.iter().map(|r| r.layer_index).collect(), heads })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitResult {
    pub kept_local_indices: Vec<usize>,
    pub removed_local_indices: Vec<usize>,
}

impl SplitResult {
    pub fn n(&self) -> usize {
        self.kept_local_indices.len() + self.removed_local_indices.len()
    }

    /// Split from an explicit kept set over `0..n`.
    pub fn from_kept(mut kept: Vec<usize>, n: usize) -> Result<Self> {
        kept.sort_unstable();
        kept.dedup();
        if kept.last().is_some_and(|&k| k >= n) {
            return Err(Error::InvalidInput("kept index out of range"));
        }
        let mut removed = Vec::with_capacity(n - kept.len());
        let mut it = kept.iter().peekable();
        for i in 0..n {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                removed.push(i);
            }
        }
        Ok(Self { kept_local_indices: kept, removed_local_indices: removed })
    }
}

/// Kept-token count for one step: `max(min_keep, round(p·n))`, capped at `n`.
/// Rounding is half away from zero.
pub fn keep_count(n: usize, keep_ratio_p: f64, min_keep: usize) -> usize {
    let rounded = libm::round(keep_ratio_p * n as f64) as usize;
    rounded.max(min_keep).min(n)
}

/// Keeps the highest-scoring tokens. Equal scores prefer the lower index.
pub fn split_tokens(importance: &ImportanceScore, keep_ratio_p: f64, min_keep: usize) -> Result<SplitResult> {
    let n = importance.scores.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty importance scores"));
    }
    if !(keep_ratio_p > 0.0 && keep_ratio_p <= 1.0) {
        return Err(Error::InvalidConfig("keep ratio must lie in (0, 1]"));
    }
    if importance.scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN importance score"));
    }
    let k = keep_count(n, keep_ratio_p, min_keep);

    let scores = &importance.scores;
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort, so ties keep ascending index order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    SplitResult::from_kept(order, n)
}
