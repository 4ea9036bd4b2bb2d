//! File formats and command-line driver around `visa-core`.

pub mod cli;
pub mod fsutil;
pub mod replay;
pub mod report;
pub mod trace;

pub use replay::{replay_trace, Replay, ReplayError};
pub use report::Report;
pub use trace::{capture_trace, read_trace, write_trace, TraceError, TraceFile, TraceLayer};
