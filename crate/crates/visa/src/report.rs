//! JSON report written by `simulate` and `compress-trace`, and the
//! companion mask file. Field meanings are documented in
//! `docs/report-schema.md`.

use serde::{Deserialize, Serialize};
use visa_core::{CompressionReport, GraphStats, GroupSchedule};

pub const SCHEMA: &str = "visa-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    /// `visa`, `fastv`, `tome`, `select` or `none`.
    pub strategy: String,
    pub config: ReportConfig,
    pub boundaries: Vec<BoundaryEntry>,
    pub totals: Totals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<Generation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub total_layers: usize,
    pub group_size: usize,
    pub keep_ratio: f64,
    pub alpha: f64,
    pub avg_layers_m: usize,
    pub min_keep: usize,
    pub n_visual: usize,
    /// Half-open `[start, end)` layer ranges.
    pub schedule: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fastv_keep_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEntry {
    pub group_index: usize,
    /// Last layer of the group; compression runs right after it.
    pub after_layer: usize,
    pub token_count_before: usize,
    pub token_count_after: usize,
    pub kept_origin_indices: Vec<usize>,
    pub removed_origin_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphEntry {
    pub edge_count: usize,
    pub isolated_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub total_removed: usize,
    pub final_visual_count: usize,
    pub theoretical_cost_ratio: f64,
    pub simulated_cost_ratio: f64,
    pub simulated_cost_units: f64,
    pub uncompressed_cost_units: f64,
    /// sha256 of the final visual embeddings as little-endian f64, row-major.
    pub final_visual_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// sha256 of the last step's logits as little-endian f64.
    pub final_logits_sha256: String,
}

pub struct RunSummary<'a> {
    pub config: ReportConfig,
    pub schedule: &'a GroupSchedule,
    pub compression: &'a CompressionReport,
    /// One entry per boundary when the strategy builds a graph, else empty.
    pub graph_stats: &'a [GraphStats],
    pub final_visual_count: usize,
    pub final_visual_sha256: String,
}

impl Report {
    pub fn new(command: &str, strategy: &str, run: RunSummary<'_>) -> Self {
        let mut config = run.config;
        config.schedule = run.schedule.groups().iter().map(|g| [g.start, g.end]).collect();
        let boundaries = run
            .compression
            .boundaries
            .iter()
            .enumerate()
            .map(|(i, b)| BoundaryEntry {
                group_index: b.group_index,
                after_layer: run.schedule.groups()[b.group_index].end - 1,
                token_count_before: b.token_count_before,
                token_count_after: b.token_count_after,
                kept_origin_indices: b.kept_origin_indices.clone(),
                removed_origin_indices: b.removed_origin_indices.clone(),
                graph: run
                    .graph_stats
                    .get(i)
                    .map(|g| GraphEntry { edge_count: g.edge_count, isolated_count: g.isolated_count }),
            })
            .collect();
        let c = run.compression;
        Self {
            schema: SCHEMA.into(),
            command: command.into(),
            strategy: strategy.into(),
            config,
            boundaries,
            totals: Totals {
                total_removed: c.total_removed(),
                final_visual_count: run.final_visual_count,
                theoretical_cost_ratio: c.theoretical_cost_ratio,
                simulated_cost_ratio: c.simulated_ratio(),
                simulated_cost_units: c.simulated_cost_units,
                uncompressed_cost_units: c.uncompressed_cost_units,
                final_visual_sha256: run.final_visual_sha256,
            },
            generation: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One line per boundary: the kept original indices, space-separated.
    pub fn masks(&self) -> String {
        let mut out = String::new();
        for b in &self.boundaries {
            let line: Vec<String> = b.kept_origin_indices.iter().map(usize::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn sha256_f64(values: impl IntoIterator<Item = f64>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
