//! Offline compression over a dumped trace, with no decoder in the loop.
//!
//! At each boundary the hidden states recorded at the group's last layer
//! are taken for the tokens still alive, and the group's recorded attention
//! rows are restricted to those tokens. The graph, selector and aggregator
//! then run exactly as in the online pipeline.
//!
//! A trace comes from an uncompressed run, so the states it holds never saw
//! earlier aggregation and attention over a shortened sequence. Replay is
//! therefore an approximation of an online run past the first boundary;
//! the first boundary is exact.

use thiserror::Error;
use visa_core::flops::{layer_cost, theoretical_ratio, ArchCost};
use visa_core::{
    build_group_schedule, compress_step, AttentionRecord, BoundaryRecord, CompressionReport, GraphStats,
    GroupSchedule, Matrix, TokenSequence, VisaConfig,
};

use crate::trace::TraceFile;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("trace has no record for layer {0}, needed by a group boundary")]
    MissingLayer(usize),
    #[error("trace has {trace} layers but the config expects {config}")]
    LayerCount { trace: usize, config: usize },
    #[error(transparent)]
    Core(#[from] visa_core::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub schedule: GroupSchedule,
    pub report: CompressionReport,
    pub graph_stats: Vec<GraphStats>,
    pub final_tokens: TokenSequence,
}

/// `cost` prices the run; its `total_layers` should match the trace.
pub fn replay_trace(trace: &TraceFile, config: &VisaConfig, cost: &ArchCost) -> Result<Replay, ReplayError> {
    config.validate()?;
    let total_layers = trace.total_layers as usize;
    if config.total_layers != total_layers {
        return Err(ReplayError::LayerCount { trace: total_layers, config: config.total_layers });
    }
    let n = trace.n_vis as usize;
    if n == 0 {
        return Err(visa_core::Error::InvalidTokens("trace has no visual tokens").into());
    }
    let schedule = build_group_schedule(total_layers, config.group_size_s)?;

    let mut live: Vec<usize> = (0..n).collect();
    let mut final_tokens = None;
    let mut boundaries = Vec::new();
    let mut graph_stats = Vec::new();
    let mut simulated = 0.0;
    for (g, group) in schedule.groups().iter().enumerate() {
        simulated += group.len() as f64 * layer_cost(live.len() as f64, cost);
        if g + 1 == schedule.len() {
            break;
        }
        let last = group.end - 1;
        let layer = trace.layer(last).ok_or(ReplayError::MissingLayer(last))?;
        let tokens = trace.hidden_tokens(layer)?.gather(&live);
        let mut records = Vec::new();
        for l in group.clone() {
            if let Some(layer) = trace.layer(l) {
                records.push(restrict(&trace.attention_record(layer)?, &live)?);
            }
        }
        let step = compress_step(&tokens, &records, config)?;
        let kept = step.new_tokens.origin_indices().to_vec();
        let mut removed: Vec<usize> = step.split.removed_local_indices.iter().map(|&i| live[i]).collect();
        removed.sort_unstable();
        boundaries.push(BoundaryRecord {
            group_index: g,
            kept_origin_indices: kept.clone(),
            removed_origin_indices: removed,
            token_count_before: live.len(),
            token_count_after: kept.len(),
        });
        graph_stats.push(step.graph_stats);
        live = kept;
        final_tokens = Some(step.new_tokens);
    }

    let final_tokens = match final_tokens {
        Some(t) => t,
        None => {
            let last = total_layers - 1;
            trace.hidden_tokens(trace.layer(last).ok_or(ReplayError::MissingLayer(last))?)?
        }
    };
    let report = CompressionReport {
        boundaries,
        theoretical_cost_ratio: theoretical_ratio(config.keep_ratio_p, schedule.len()),
        simulated_cost_units: simulated,
        uncompressed_cost_units: total_layers as f64 * layer_cost(n as f64, cost),
    };
    Ok(Replay { schedule, report, graph_stats, final_tokens })
}

fn restrict(record: &AttentionRecord, live: &[usize]) -> Result<AttentionRecord, visa_core::Error> {
    let mut rows = Matrix::zeros(record.heads(), live.len());
    for h in 0..record.heads() {
        for (c, &t) in live.iter().enumerate() {
            rows.set(h, c, record.rows.get(h, t));
        }
    }
    AttentionRecord::new(record.layer_index, rows)
}
