//! Deterministic toy decoder used to exercise compression end to end.
//!
//! Each layer is pre-normalized causal multi-head attention followed by a SiLU
//! FFN, both with residual connections. Weights come from a seeded ChaCha8
//! stream. Prefill runs layer by layer over `[system | visual | text]` and
//! compresses the visual segment at group boundaries; generation is greedy
//! over the compressed caches.

pub mod attention;
mod model;
mod prefill;
mod state;

pub use model::{ArchParams, DecoderModel, LayerWeights};
pub use prefill::{prefill_plain, prefill_with_visa, Prefill, Strategy};
pub use state::{forward_layer, generate, DecoderInput, DecoderState, Segment};
