use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use visa_core::decoder::{generate, ArchParams, DecoderInput, DecoderModel, Prefill, Strategy};
use visa_core::flops::{
    match_fastv, schedule_cost, theoretical_ratio, uncompressed_cost, ArchCost, CostModel, Rounding, LLAVA_13B,
    LLAVA_7B,
};
use visa_core::{build_group_schedule, keep_count, VisaConfig};

use crate::fsutil::write_atomic;
use crate::replay::replay_trace;
use crate::report::{sha256_f64, Generation, Report, ReportConfig, RunSummary};
use crate::trace::{capture_trace, read_trace, write_trace};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "visa", version, about = "Visual token compression: simulation, trace replay and cost analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the toy decoder with compression, then generate.
    Simulate(SimulateArgs),
    /// Replay compression over a dumped trace file.
    CompressTrace(CompressTraceArgs),
    /// Cost of a progressive compression schedule.
    Flops(FlopsArgs),
    /// Write a trace from an uncompressed toy decoder run.
    DumpTrace(DumpTraceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    None,
    Fastv,
    Tome,
    /// Selection without aggregation.
    Select,
}

#[derive(Debug, Args)]
pub struct CompressionArgs {
    #[arg(long, default_value_t = VisaConfig::DEFAULT_GROUP_SIZE)]
    pub group_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub keep_ratio: f64,
    #[arg(long, default_value_t = VisaConfig::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Trailing layers of each group whose attention is averaged.
    #[arg(long, default_value_t = VisaConfig::DEFAULT_AVG_LAYERS)]
    pub m: usize,
    #[arg(long, default_value_t = 1)]
    pub min_keep: usize,
}

impl CompressionArgs {
    fn config(&self, total_layers: usize) -> Result<VisaConfig, CliError> {
        let c = VisaConfig {
            alpha: self.alpha,
            group_size_s: self.group_size,
            avg_layers_m: self.m,
            keep_ratio_p: self.keep_ratio,
            total_layers,
            min_keep: self.min_keep,
        };
        c.validate().map_err(usage)?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 12)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// FFN width; defaults to 4·d.
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long)]
    pub no_norm: bool,
    #[arg(long, default_value_t = 128)]
    pub visual: usize,
    #[arg(long, default_value_t = 8)]
    pub text: usize,
    #[arg(long, default_value_t = 4)]
    pub system: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ModelArgs {
    fn build(&self) -> Result<(DecoderModel, DecoderInput), CliError> {
        let arch = ArchParams {
            total_layers: self.layers,
            d: self.d,
            heads: self.heads,
            ffn_dim: self.ffn_dim.unwrap_or(4 * self.d),
            vocab_size: self.vocab,
            use_norm: !self.no_norm,
        };
        arch.validate().map_err(usage)?;
        if self.visual == 0 {
            return Err(usage("--visual must be >= 1"));
        }
        if self.text == 0 {
            return Err(usage("--text must be >= 1"));
        }
        let model = DecoderModel::init(arch, self.seed).map_err(usage)?;
        let input = DecoderInput::synthetic(&arch, self.system, self.visual, self.text, self.seed)
            .context("building the synthetic prompt")?;
        Ok((model, input))
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub compression: CompressionArgs,
    #[arg(long, value_enum, default_value_t = Baseline::None)]
    pub baseline: Baseline,
    /// Tokens kept by the fastv baseline; defaults to one boundary's worth.
    #[arg(long)]
    pub keep_count: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub gen_steps: usize,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Mask file path; defaults to the report path with a `.masks.txt` extension.
    #[arg(long)]
    pub masks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompressTraceArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub compression: CompressionArgs,
    /// Non-visual tokens priced by the cost model.
    #[arg(long, default_value_t = 0)]
    pub text_len: usize,
    /// FFN width priced by the cost model; defaults to 4·d.
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub masks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpTraceArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Layers to record, comma-separated; all layers when absent.
    #[arg(long, value_delimiter = ',')]
    pub record: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetName {
    Llava7b,
    Llava13b,
    Custom,
}

#[derive(Debug, Args)]
pub struct ArchArgs {
    #[arg(long, value_enum, default_value_t = PresetName::Llava7b)]
    pub preset: PresetName,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Gate/up/down style FFNs use 3, plain up/down use 2.
    #[arg(long)]
    pub ffn_matrices: Option<usize>,
    #[arg(long)]
    pub visual: Option<usize>,
    /// Non-visual tokens (system + text).
    #[arg(long)]
    pub text: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Drop the quadratic attention term.
    #[arg(long)]
    pub linear: bool,
}

#[derive(Debug, Clone, Serialize)]
struct ResolvedArch {
    preset: &'static str,
    total_layers: usize,
    d: usize,
    ffn_dim: usize,
    ffn_matrices: usize,
    text_len: usize,
    n_visual: usize,
    group_size: usize,
    cost_model: &'static str,
    #[serde(skip)]
    cost: ArchCost,
}

impl ArchArgs {
    fn resolve(&self) -> Result<ResolvedArch, CliError> {
        let (name, base) = match self.preset {
            PresetName::Llava7b => ("llava7b", Some(LLAVA_7B)),
            PresetName::Llava13b => ("llava13b", Some(LLAVA_13B)),
            PresetName::Custom => ("custom", None),
        };
        let need = |v: Option<usize>, fallback: Option<usize>, flag: &str| {
            v.or(fallback).ok_or_else(|| usage(format!("--preset custom requires --{flag}")))
        };
        let mut cost = ArchCost::new(
            need(self.d, base.map(|b| b.arch.d), "d")?,
            need(self.ffn_dim, base.map(|b| b.arch.ffn_dim), "ffn-dim")?,
            need(self.layers, base.map(|b| b.arch.total_layers), "layers")?,
            self.text.or(base.map(|b| b.arch.text_len)).unwrap_or(0),
        );
        if let Some(m) = self.ffn_matrices.or(base.map(|b| b.arch.ffn_matrices)) {
            cost.ffn_matrices = m;
        }
        if self.linear {
            cost = cost.linearized();
        }
        let n_visual = need(self.visual, base.map(|b| b.n_visual), "visual")?;
        let group_size = need(self.group_size, base.map(|b| b.group_size), "group-size")?;
        if cost.d == 0 || cost.total_layers < 2 || n_visual == 0 || group_size == 0 {
            return Err(usage("layers must be >= 2 and d, visual, group-size >= 1"));
        }
        Ok(ResolvedArch {
            preset: name,
            total_layers: cost.total_layers,
            d: cost.d,
            ffn_dim: cost.ffn_dim,
            ffn_matrices: cost.ffn_matrices,
            text_len: cost.text_len,
            n_visual,
            group_size,
            cost_model: match cost.model {
                CostModel::Full => "full",
                CostModel::Linear => "linear",
            },
            cost,
        })
    }
}

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true)]
pub struct FlopsArgs {
    #[command(subcommand)]
    pub action: Option<FlopsAction>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 1.0)]
    pub keep_ratio: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum FlopsAction {
    /// Keep ratio whose schedule costs the same as one-shot pruning to
    /// `--keep-count` tokens after layer 2.
    MatchFastv(MatchFastvArgs),
}

#[derive(Debug, Args)]
pub struct MatchFastvArgs {
    #[arg(long)]
    pub keep_count: usize,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct FlopsOutput {
    arch: ResolvedArch,
    keep_ratio: f64,
    schedule: Vec<[usize; 2]>,
    visual_counts: Vec<f64>,
    uncompressed_tflops: f64,
    compressed_tflops: f64,
    compressed_tflops_unrounded: f64,
    cost_ratio: f64,
    theoretical_ratio: f64,
}

#[derive(Serialize)]
struct MatchOutput {
    arch: ResolvedArch,
    keep_count: usize,
    keep_ratio: f64,
    fastv_tflops: f64,
    visa_tflops: f64,
    visa_tflops_rounded: f64,
    relative_error: f64,
    relative_error_rounded: f64,
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => simulate(a, stdout),
        Command::CompressTrace(a) => compress_trace(a, stdout),
        Command::Flops(a) => flops(a, stdout),
        Command::DumpTrace(a) => dump_trace(a),
    }
}

fn emit(path: Option<&Path>, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display()))?,
        None => stdout.write_all(text.as_bytes()).context("writing to stdout")?,
    }
    Ok(())
}

fn emit_report(report: &Report, out: Option<&Path>, masks: Option<&Path>, stdout: &mut dyn Write) -> Result<(), CliError> {
    emit(out, &report.to_json(), stdout)?;
    let masks = masks.map(Path::to_path_buf).or_else(|| out.map(|p| p.with_extension("masks.txt")));
    if let Some(m) = masks {
        write_atomic(&m, report.masks().as_bytes()).with_context(|| format!("writing {}", m.display()))?;
    }
    Ok(())
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("output serializes");
    s.push('\n');
    s
}

fn simulate(a: SimulateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (model, input) = a.model.build()?;
    let config = a.compression.config(a.model.layers)?;
    let n = input.visual.len();
    let fastv_keep = a.keep_count.unwrap_or_else(|| keep_count(n, config.keep_ratio_p, config.min_keep));
    if a.keep_count.is_some() && a.baseline != Baseline::Fastv {
        return Err(usage("--keep-count only applies to --baseline fastv"));
    }
    let (strategy, name) = match a.baseline {
        Baseline::None => (Strategy::Visa(config), "visa"),
        Baseline::Tome => (Strategy::AverageMerge(config), "tome"),
        Baseline::Select => (Strategy::SelectOnly(config), "select"),
        Baseline::Fastv => {
            if fastv_keep == 0 || fastv_keep > n {
                return Err(usage(format!("--keep-count must lie in 1..={n}")));
            }
            (Strategy::FastV { keep_count: fastv_keep }, "fastv")
        }
    };

    let mut prefill = Prefill::new(&model, &input, strategy).context("starting prefill")?;
    while prefill.step().context("prefill")?.is_some() {}
    let schedule = prefill.schedule().clone();
    let graph_stats = prefill.graph_stats().to_vec();
    let (mut state, compression) = prefill.run().context("prefill")?;
    let visual = state.visual_tokens();
    let tokens = generate(&model, &mut state, a.gen_steps).context("generation")?;

    let mut report = Report::new(
        "simulate",
        name,
        RunSummary {
            config: ReportConfig {
                total_layers: config.total_layers,
                group_size: config.group_size_s,
                keep_ratio: config.keep_ratio_p,
                alpha: config.alpha,
                avg_layers_m: config.avg_layers_m,
                min_keep: config.min_keep,
                n_visual: n,
                schedule: Vec::new(),
                fastv_keep_count: (a.baseline == Baseline::Fastv).then_some(fastv_keep),
                seed: Some(a.model.seed),
            },
            schedule: &schedule,
            compression: &compression,
            graph_stats: &graph_stats,
            final_visual_count: visual.len(),
            final_visual_sha256: sha256_f64(visual.data().as_slice().iter().copied()),
        },
    );
    report.generation = Some(Generation { tokens, final_logits_sha256: sha256_f64(state.logits(&model)) });
    emit_report(&report, a.out.as_deref(), a.masks.as_deref(), stdout)
}

fn compress_trace(a: CompressTraceArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let trace = read_trace(&a.trace).with_context(|| format!("reading {}", a.trace.display()))?;
    let config = a.compression.config(trace.total_layers as usize)?;
    let d = trace.d as usize;
    let cost = ArchCost::new(d, a.ffn_dim.unwrap_or(4 * d), trace.total_layers as usize, a.text_len);
    let replay = replay_trace(&trace, &config, &cost).context("replaying trace")?;

    let report = Report::new(
        "compress-trace",
        "visa",
        RunSummary {
            config: ReportConfig {
                total_layers: config.total_layers,
                group_size: config.group_size_s,
                keep_ratio: config.keep_ratio_p,
                alpha: config.alpha,
                avg_layers_m: config.avg_layers_m,
                min_keep: config.min_keep,
                n_visual: trace.n_vis as usize,
                schedule: Vec::new(),
                fastv_keep_count: None,
                seed: None,
            },
            schedule: &replay.schedule,
            compression: &replay.report,
            graph_stats: &replay.graph_stats,
            final_visual_count: replay.final_tokens.len(),
            final_visual_sha256: sha256_f64(replay.final_tokens.data().as_slice().iter().copied()),
        },
    );
    emit_report(&report, a.out.as_deref(), a.masks.as_deref(), stdout)
}

fn flops(a: FlopsArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if let Some(FlopsAction::MatchFastv(m)) = a.action {
        return flops_match(m, stdout);
    }
    let arch = a.arch.resolve()?;
    if !(a.keep_ratio > 0.0 && a.keep_ratio <= 1.0) {
        return Err(usage("--keep-ratio must lie in (0, 1]"));
    }
    let schedule = build_group_schedule(arch.total_layers, arch.group_size).map_err(usage)?;
    let rounded = schedule_cost(&schedule, a.keep_ratio, arch.n_visual, &arch.cost, Rounding::On);
    let smooth = schedule_cost(&schedule, a.keep_ratio, arch.n_visual, &arch.cost, Rounding::Off);
    let full = uncompressed_cost(arch.n_visual, &arch.cost);
    let out = FlopsOutput {
        keep_ratio: a.keep_ratio,
        schedule: schedule.groups().iter().map(|g| [g.start, g.end]).collect(),
        visual_counts: rounded.visual_counts,
        uncompressed_tflops: full / 1e12,
        compressed_tflops: rounded.total / 1e12,
        compressed_tflops_unrounded: smooth.total / 1e12,
        cost_ratio: rounded.total / full,
        theoretical_ratio: theoretical_ratio(a.keep_ratio, schedule.len()),
        arch,
    };
    emit(a.out.as_deref(), &json(&out), stdout)
}

fn flops_match(a: MatchFastvArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let arch = a.arch.resolve()?;
    if a.keep_count == 0 || a.keep_count > arch.n_visual {
        return Err(usage(format!("--keep-count must lie in 1..={}", arch.n_visual)));
    }
    let m = match_fastv(&arch.cost, arch.group_size, arch.n_visual, a.keep_count)
        .ok_or_else(|| anyhow::anyhow!("no keep ratio in (0, 1] matches the pruning cost"))?;
    let out = MatchOutput {
        keep_count: a.keep_count,
        keep_ratio: m.keep_ratio,
        fastv_tflops: m.fastv_cost / 1e12,
        visa_tflops: m.visa_cost / 1e12,
        visa_tflops_rounded: m.visa_cost_rounded / 1e12,
        relative_error: m.relative_error(),
        relative_error_rounded: m.relative_error_rounded(),
        arch,
    };
    emit(a.out.as_deref(), &json(&out), stdout)
}

fn dump_trace(a: DumpTraceArgs) -> Result<(), CliError> {
    let (model, input) = a.model.build()?;
    if let Some(r) = &a.record {
        if r.iter().any(|&l| l >= a.model.layers) {
            return Err(usage("--record lists a layer beyond --layers"));
        }
    }
    let trace = capture_trace(&model, &input, a.record.as_deref()).context("running the decoder")?;
    write_trace(&a.out, &trace).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}
