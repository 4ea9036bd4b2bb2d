//! Analytic cost model.
//!
//! FLOP conventions (fixed):
//!
//! - one multiply-accumulate is 2 FLOPs;
//! - attention counts the Q, K, V and output projections (`4·n·d²` MACs) plus
//!   `Q·Kᵀ` and `A·V` (`2·n²·d` MACs);
//! - the FFN counts `ffn_matrices` projections of `d × ffn_dim` each
//!   (`3` for a gated SiLU block), i.e. `ffn_matrices·n·d·ffn_dim` MACs;
//! - softmax, normalization, embedding and the LM head are not counted.
//!
//! `n` is the number of live visual tokens plus `text_len` non-visual tokens
//! (system prompt, question and template tokens), which are never compressed.
//! The presets assume 132 non-visual tokens, which places the uncompressed
//! 7B and 13B settings at 9.43 and 18.31 TFLOPs within 0.5%.

use alloc::vec::Vec;

use crate::selector::{build_group_schedule, keep_count, GroupSchedule, HEAD_GROUP_LAYERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostModel {
    /// Includes the quadratic attention term.
    Full,
    /// Drops the `n²·d` term so per-layer cost is proportional to `n`.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchCost {
    pub d: usize,
    pub ffn_dim: usize,
    pub total_layers: usize,
    /// Non-visual tokens included in every layer's token count.
    pub text_len: usize,
    pub ffn_matrices: usize,
    pub model: CostModel,
}

impl ArchCost {
    pub fn new(d: usize, ffn_dim: usize, total_layers: usize, text_len: usize) -> Self {
        Self { d, ffn_dim, total_layers, text_len, ffn_matrices: 3, model: CostModel::Full }
    }

    pub fn linearized(mut self) -> Self {
        self.model = CostModel::Linear;
        self
    }
}

/// A published model setting: architecture, visual token count, group size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchPreset {
    pub name: &'static str,
    pub arch: ArchCost,
    pub n_visual: usize,
    pub group_size: usize,
}

pub const PRESET_TEXT_LEN: usize = 132;

pub const LLAVA_7B: ArchPreset = ArchPreset {
    name: "llava7b",
    arch: ArchCost {
        d: 4096,
        ffn_dim: 11008,
        total_layers: 32,
        text_len: PRESET_TEXT_LEN,
        ffn_matrices: 3,
        model: CostModel::Full,
    },
    n_visual: 576,
    group_size: 5,
};

pub const LLAVA_13B: ArchPreset = ArchPreset {
    name: "llava13b",
    arch: ArchCost {
        d: 5120,
        ffn_dim: 13824,
        total_layers: 40,
        text_len: PRESET_TEXT_LEN,
        ffn_matrices: 3,
        model: CostModel::Full,
    },
    n_visual: 576,
    group_size: 7,
};

pub fn preset(name: &str) -> Option<ArchPreset> {
    [LLAVA_7B, LLAVA_13B].into_iter().find(|p| p.name == name)
}

/// Closed-form cost of progressive compression relative to no compression:
/// `(1 - p^N) / (N (1 - p))`, with the limit 1 at `p = 1`.
pub fn theoretical_ratio(p: f64, n_groups: usize) -> f64 {
    debug_assert!(p > 0.0 && p <= 1.0 && n_groups >= 1);
    if p == 1.0 {
        return 1.0;
    }
    let n = n_groups as f64;
    (1.0 - libm::pow(p, n)) / (n * (1.0 - p))
}

/// FLOPs of one decoder layer with `n_visual` live visual tokens.
pub fn layer_cost(n_visual: f64, arch: &ArchCost) -> f64 {
    let n = n_visual + arch.text_len as f64;
    let d = arch.d as f64;
    let projections = 4.0 * n * d * d;
    let ffn = arch.ffn_matrices as f64 * n * d * arch.ffn_dim as f64;
    let scores = match arch.model {
        CostModel::Full => 2.0 * n * n * d,
        CostModel::Linear => 0.0,
    };
    2.0 * (projections + scores + ffn)
}

pub fn uncompressed_cost(n_visual: usize, arch: &ArchCost) -> f64 {
    arch.total_layers as f64 * layer_cost(n_visual as f64, arch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rounding {
    /// `n_{k+1} = max(1, round(p·n_k))`, as the pipeline does.
    On,
    /// `n_k = n_0·p^k` as a real number.
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleCost {
    pub total: f64,
    pub per_group: Vec<f64>,
    /// Visual tokens alive in each group.
    pub visual_counts: Vec<f64>,
}

pub fn schedule_cost(
    schedule: &GroupSchedule,
    p: f64,
    n0: usize,
    arch: &ArchCost,
    rounding: Rounding,
) -> ScheduleCost {
    let mut visual_counts = Vec::with_capacity(schedule.len());
    let mut per_group = Vec::with_capacity(schedule.len());
    let mut live = n0 as f64;
    let mut live_int = n0;
    for (g, layers) in schedule.groups().iter().enumerate() {
        if g > 0 {
            match rounding {
                Rounding::On => {
                    live_int = keep_count(live_int, p, 1);
                    live = live_int as f64;
                }
                Rounding::Off => live *= p,
            }
        }
        visual_counts.push(live);
        per_group.push(layers.len() as f64 * layer_cost(live, arch));
    }
    ScheduleCost { total: per_group.iter().sum(), per_group, visual_counts }
}

/// Cost of pruning once to `keep_count` visual tokens after `prune_after`
/// layers (one-shot pruning at the second layer uses `prune_after = 2`).
pub fn fastv_cost(n0: usize, keep_count: usize, prune_after: usize, arch: &ArchCost) -> f64 {
    let head = prune_after.min(arch.total_layers);
    head as f64 * layer_cost(n0 as f64, arch)
        + (arch.total_layers - head) as f64 * layer_cost(keep_count as f64, arch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastvMatch {
    pub keep_ratio: f64,
    /// Continuous (unrounded) progressive cost at `keep_ratio`.
    pub visa_cost: f64,
    /// Progressive cost at `keep_ratio` with integer token counts.
    pub visa_cost_rounded: f64,
    pub fastv_cost: f64,
}

impl FastvMatch {
    pub fn relative_error(&self) -> f64 {
        (self.visa_cost - self.fastv_cost).abs() / self.fastv_cost
    }

    pub fn relative_error_rounded(&self) -> f64 {
        (self.visa_cost_rounded - self.fastv_cost).abs() / self.fastv_cost
    }
}

/// Finds the keep ratio whose progressive schedule costs the same as pruning
/// once to `keep_count` tokens after the head group. Bisection on the
/// unrounded schedule cost, which is continuous and increasing in `p`.
///
/// Returns `None` when no `p` in `(0, 1]` matches, e.g. a keep count larger
/// than the input or a schedule without boundaries.
pub fn match_fastv(arch: &ArchCost, group_size: usize, n0: usize, keep_count: usize) -> Option<FastvMatch> {
    if keep_count > n0 {
        return None;
    }
    let schedule = build_group_schedule(arch.total_layers, group_size).ok()?;
    if schedule.len() < 2 {
        return None;
    }
    let target = fastv_cost(n0, keep_count, HEAD_GROUP_LAYERS, arch);
    let cost = |p: f64| schedule_cost(&schedule, p, n0, arch, Rounding::Off).total;

    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    if cost(hi) < target || cost(lo) > target {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cost(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = if (cost(lo) - target).abs() <= (cost(hi) - target).abs() { lo } else { hi };
    let p = if p > 0.0 { p } else { hi };
    Some(FastvMatch {
        keep_ratio: p,
        visa_cost: cost(p),
        visa_cost_rounded: schedule_cost(&schedule, p, n0, arch, Rounding::On).total,
        fastv_cost: target,
    })
}
