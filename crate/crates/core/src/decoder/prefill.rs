use alloc::vec::Vec;

use super::model::DecoderModel;
use super::state::{forward_layer, DecoderInput, DecoderState};
use crate::aggregator::{compress_step, GraphStats};
use crate::baselines::{average_merge, fastv_prune};
use crate::error::{Error, Result};
use crate::flops::{layer_cost, theoretical_ratio, ArchCost};
use crate::selector::{build_group_schedule, compute_importance, split_tokens, GroupSchedule, HEAD_GROUP_LAYERS};
use crate::types::{AttentionRecord, BoundaryRecord, CompressionReport, TokenSequence, VisaConfig};

/// What happens to visual tokens during prefill.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// No compression.
    Uncompressed,
    /// Graph aggregation at every group boundary.
    Visa(VisaConfig),
    /// Same schedule and split as `Visa`, but removed tokens are averaged into
    /// their most similar kept token.
    AverageMerge(VisaConfig),
    /// Same schedule and split as `Visa`, removed tokens are simply dropped.
    SelectOnly(VisaConfig),
    /// Prune once after the head group, keeping `keep_count` tokens.
    FastV { keep_count: usize },
}

/// Layer-by-layer prefill that compresses the visual segment at group
/// boundaries. [`Prefill::step`] runs one layer (and the boundary after it,
/// if any), so callers can observe the state in between.
#[derive(Debug, Clone)]
pub struct Prefill<'m> {
    model: &'m DecoderModel,
    strategy: Strategy,
    schedule: GroupSchedule,
    state: DecoderState,
    group_records: Vec<AttentionRecord>,
    boundaries: Vec<BoundaryRecord>,
    graph_stats: Vec<GraphStats>,
    cost: ArchCost,
    n_visual_input: usize,
    simulated_cost: f64,
}

impl<'m> Prefill<'m> {
    pub fn new(model: &'m DecoderModel, input: &DecoderInput, strategy: Strategy) -> Result<Self> {
        let arch = model.arch();
        let schedule = match strategy {
            Strategy::Visa(c) | Strategy::AverageMerge(c) | Strategy::SelectOnly(c) => {
                c.validate()?;
                if c.total_layers != arch.total_layers {
                    return Err(Error::InvalidConfig("config layer count differs from the model"));
                }
                build_group_schedule(arch.total_layers, c.group_size_s)?
            }
            Strategy::FastV { keep_count } => {
                if keep_count == 0 || keep_count > input.visual.len() {
                    return Err(Error::BadKeepCount { keep: keep_count, n: input.visual.len() });
                }
                let head = HEAD_GROUP_LAYERS.min(arch.total_layers);
                let mut groups = alloc::vec![0..head];
                if head < arch.total_layers {
                    groups.push(head..arch.total_layers);
                }
                GroupSchedule::from_groups(groups)?
            }
            Strategy::Uncompressed => GroupSchedule::uniform(1, arch.total_layers)?,
        };
        let state = DecoderState::new(model, input)?;
        let mut cost = ArchCost::new(arch.d, arch.ffn_dim, arch.total_layers, state.non_visual_count());
        // Toy FFN: up and down projections only.
        cost.ffn_matrices = 2;
        Ok(Self {
            model,
            strategy,
            schedule,
            state,
            group_records: Vec::new(),
            boundaries: Vec::new(),
            graph_stats: Vec::new(),
            cost,
            n_visual_input: input.visual.len(),
            simulated_cost: 0.0,
        })
    }

    pub fn state(&self) -> &DecoderState {
        &self.state
    }

    pub fn schedule(&self) -> &GroupSchedule {
        &self.schedule
    }

    pub fn boundaries(&self) -> &[BoundaryRecord] {
        &self.boundaries
    }

    pub fn graph_stats(&self) -> &[GraphStats] {
        &self.graph_stats
    }

    pub fn is_done(&self) -> bool {
        self.state.next_layer() == self.model.arch().total_layers
    }

    /// Runs the next layer and, if a group ends there, compresses. Returns the
    /// layer's attention record, or `None` when prefill is complete.
    pub fn step(&mut self) -> Result<Option<AttentionRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let layer = self.state.next_layer();
        self.simulated_cost += layer_cost(self.state.visual_count() as f64, &self.cost);
        let record = forward_layer(self.model, &mut self.state, layer)?;
        self.group_records.push(record.clone());
        if let Some(group) = self.schedule.boundary_after(layer) {
            self.compress(group)?;
            self.group_records.clear();
        }
        Ok(Some(record))
    }

    fn compress(&mut self, group: usize) -> Result<()> {
        let tokens = self.state.visual_tokens();
        let new_tokens: TokenSequence = match self.strategy {
            Strategy::Uncompressed => return Ok(()),
            Strategy::Visa(config) => {
                let step = compress_step(&tokens, &self.group_records, &config)?;
                self.graph_stats.push(step.graph_stats);
                step.new_tokens
            }
            Strategy::AverageMerge(config) => {
                let importance = compute_importance(&self.group_records, config.avg_layers_m)?;
                let split = split_tokens(&importance, config.keep_ratio_p, config.min_keep)?;
                average_merge(&tokens, &split)?
            }
            Strategy::SelectOnly(config) => {
                let importance = compute_importance(&self.group_records, config.avg_layers_m)?;
                let split = split_tokens(&importance, config.keep_ratio_p, config.min_keep)?;
                tokens.gather(&split.kept_local_indices)
            }
            Strategy::FastV { keep_count } => {
                let last = self.group_records.last().ok_or(Error::InvalidInput("no attention record"))?;
                fastv_prune(&tokens, last, keep_count)?
            }
        };

        let kept = new_tokens.origin_indices().to_vec();
        let mut k = kept.iter().peekable();
        let removed = tokens
            .origin_indices()
            .iter()
            .copied()
            .filter(|o| {
                if k.peek() == Some(&o) {
                    k.next();
                    false
                } else {
                    true
                }
            })
            .collect();
        self.boundaries.push(BoundaryRecord {
            group_index: group,
            kept_origin_indices: kept,
            removed_origin_indices: removed,
            token_count_before: tokens.len(),
            token_count_after: new_tokens.len(),
        });
        self.state.replace_visual(&new_tokens)
    }

    pub fn run(mut self) -> Result<(DecoderState, CompressionReport)> {
        while self.step()?.is_some() {}
        let uncompressed = self.cost.total_layers as f64 * layer_cost(self.n_visual_input as f64, &self.cost);
        let theoretical = match self.strategy {
            Strategy::Uncompressed => 1.0,
            Strategy::Visa(c) | Strategy::AverageMerge(c) | Strategy::SelectOnly(c) => theoretical_ratio(c.keep_ratio_p, self.schedule.len()),
            Strategy::FastV { keep_count } => {
                // One-shot pruning under a cost linear in the visual count.
                let l = self.cost.total_layers as f64;
                let head = HEAD_GROUP_LAYERS.min(self.cost.total_layers) as f64;
                (head + (l - head) * keep_count as f64 / self.n_visual_input as f64) / l
            }
        };
        let report = CompressionReport {
            boundaries: self.boundaries,
            theoretical_cost_ratio: theoretical,
            simulated_cost_units: self.simulated_cost,
            uncompressed_cost_units: uncompressed,
        };
        Ok((self.state, report))
    }
}

/// Prefill with graph aggregation at every group boundary.
pub fn prefill_with_visa(
    model: &DecoderModel,
    input: &DecoderInput,
    config: &VisaConfig,
) -> Result<(DecoderState, CompressionReport)> {
    Prefill::new(model, input, Strategy::Visa(*config))?.run()
}

/// Plain prefill over every layer with no compression.
pub fn prefill_plain(model: &DecoderModel, input: &DecoderInput) -> Result<DecoderState> {
    Ok(Prefill::new(model, input, Strategy::Uncompressed)?.run()?.0)
}
