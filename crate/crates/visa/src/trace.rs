//! Binary trace files: dumped visual hidden states and last-text-token
//! attention rows, for replaying compression offline.
//!
//! Layout, all integers `u32` little-endian, all reals `f32` little-endian:
//!
//! ```text
//! magic        4 bytes  "VTA1"
//! version      u32      1
//! n_vis        u32
//! d            u32
//! heads        u32
//! total_layers u32
//! n_recorded   u32
//! layers       n_recorded × u32, strictly increasing, each < total_layers
//! per recorded layer, in header order:
//!   hidden     n_vis × d f32, row-major
//!   attention  heads × n_vis f32, row-major
//! ```
//!
//! The file length must equal the length implied by the header exactly.

use std::path::Path;

use thiserror::Error;
use visa_core::decoder::{DecoderInput, DecoderModel, Prefill, Strategy};
use visa_core::{AttentionRecord, Matrix, TokenSequence};

use crate::fsutil::write_atomic;

pub const MAGIC: [u8; 4] = *b"VTA1";
pub const VERSION: u32 = 1;
const HEADER_WORDS: usize = 6;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("corrupt trace: {0}")]
    CorruptTrace(String),
    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceLayer {
    pub layer_index: u32,
    /// `n_vis × d`
    pub hidden: Vec<f32>,
    /// `heads × n_vis`
    pub attention: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub n_vis: u32,
    pub d: u32,
    pub heads: u32,
    pub total_layers: u32,
    pub layers: Vec<TraceLayer>,
}

impl TraceFile {
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.d == 0 || self.heads == 0 {
            return Err(TraceError::Invalid("d and heads must be positive".into()));
        }
        if self.layers.windows(2).any(|w| w[0].layer_index >= w[1].layer_index) {
            return Err(TraceError::Invalid("layer indices must be strictly increasing".into()));
        }
        if self.layers.iter().any(|l| l.layer_index >= self.total_layers) {
            return Err(TraceError::Invalid("layer index beyond total_layers".into()));
        }
        let (hidden, attn) = self.payload_lens()?;
        for l in &self.layers {
            if l.hidden.len() != hidden || l.attention.len() != attn {
                return Err(TraceError::Invalid(format!("layer {} payload has the wrong size", l.layer_index)));
            }
        }
        Ok(())
    }

    fn payload_lens(&self) -> Result<(usize, usize), TraceError> {
        let n = self.n_vis as usize;
        let hidden = n.checked_mul(self.d as usize);
        let attn = n.checked_mul(self.heads as usize);
        hidden.zip(attn).ok_or_else(|| TraceError::CorruptTrace("header sizes overflow".into()))
    }

    pub fn encode(&self) -> Result<Vec<u8>, TraceError> {
        self.validate()?;
        let (hidden, attn) = self.payload_lens()?;
        let mut out = Vec::with_capacity(4 + 4 * (HEADER_WORDS + self.layers.len() * (1 + hidden + attn)));
        out.extend_from_slice(&MAGIC);
        let n_recorded = u32::try_from(self.layers.len()).map_err(|_| TraceError::Invalid("too many layers".into()))?;
        for w in [VERSION, self.n_vis, self.d, self.heads, self.total_layers, n_recorded] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for l in &self.layers {
            out.extend_from_slice(&l.layer_index.to_le_bytes());
        }
        for l in &self.layers {
            for v in l.hidden.iter().chain(&l.attention) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TraceError> {
        let corrupt = |m: &str| TraceError::CorruptTrace(m.to_string());
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let word = |i: usize| -> Result<u32, TraceError> {
            let start = 4 + 4 * i;
            bytes
                .get(start..start + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| corrupt("truncated header"))
        };
        let version = word(0)?;
        if version != VERSION {
            return Err(TraceError::UnsupportedVersion(version));
        }
        let (n_vis, d, heads, total_layers, n_recorded) = (word(1)?, word(2)?, word(3)?, word(4)?, word(5)?);
        let layer_indices = (0..n_recorded as usize)
            .map(|i| word(HEADER_WORDS + i))
            .collect::<Result<Vec<_>, _>>()?;

        let mut trace = TraceFile { n_vis, d, heads, total_layers, layers: Vec::new() };
        let (hidden, attn) = trace.payload_lens()?;
        let header_bytes = 4 + 4 * (HEADER_WORDS + n_recorded as usize);
        let expected = hidden
            .checked_add(attn)
            .and_then(|per| per.checked_mul(4 * n_recorded as usize))
            .and_then(|p| p.checked_add(header_bytes))
            .ok_or_else(|| corrupt("payload size overflows"))?;
        if bytes.len() != expected {
            return Err(TraceError::CorruptTrace(format!(
                "length {} differs from the {} bytes implied by the header",
                bytes.len(),
                expected
            )));
        }

        let mut floats = bytes[header_bytes..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for layer_index in layer_indices {
            let hidden = floats.by_ref().take(hidden).collect();
            let attention = floats.by_ref().take(attn).collect();
            trace.layers.push(TraceLayer { layer_index, hidden, attention });
        }
        trace.validate().map_err(|e| TraceError::CorruptTrace(e.to_string()))?;
        Ok(trace)
    }

    pub fn layer(&self, layer_index: usize) -> Option<&TraceLayer> {
        self.layers.iter().find(|l| l.layer_index as usize == layer_index)
    }

    /// Hidden states of `layer`, widened to `f64`.
    pub fn hidden_tokens(&self, layer: &TraceLayer) -> Result<TokenSequence, visa_core::Error> {
        let data = layer.hidden.iter().map(|&v| v as f64).collect();
        TokenSequence::new(Matrix::from_vec(self.n_vis as usize, self.d as usize, data))
    }

    pub fn attention_record(&self, layer: &TraceLayer) -> Result<AttentionRecord, visa_core::Error> {
        let data = layer.attention.iter().map(|&v| v as f64).collect();
        AttentionRecord::new(
            layer.layer_index as usize,
            Matrix::from_vec(self.heads as usize, self.n_vis as usize, data),
        )
    }
}

pub fn write_trace(path: &Path, trace: &TraceFile) -> Result<(), TraceError> {
    write_atomic(path, &trace.encode()?)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<TraceFile, TraceError> {
    TraceFile::decode(&std::fs::read(path)?)
}

/// Runs an uncompressed prefill and records the visual hidden states and
/// attention rows after each requested layer (all layers when `layers` is
/// `None`).
pub fn capture_trace(
    model: &DecoderModel,
    input: &DecoderInput,
    layers: Option<&[usize]>,
) -> Result<TraceFile, visa_core::Error> {
    let arch = model.arch();
    let mut run = Prefill::new(model, input, Strategy::Uncompressed)?;
    let mut recorded = Vec::new();
    while let Some(record) = run.step()? {
        if layers.is_some_and(|ls| !ls.contains(&record.layer_index)) {
            continue;
        }
        let hidden = run.state().visual_tokens().data().as_slice().iter().map(|&v| v as f32).collect();
        let attention = record.rows.as_slice().iter().map(|&v| v as f32).collect();
        recorded.push(TraceLayer { layer_index: record.layer_index as u32, hidden, attention });
    }
    Ok(TraceFile {
        n_vis: input.visual.len() as u32,
        d: arch.d as u32,
        heads: arch.heads as u32,
        total_layers: arch.total_layers as u32,
        layers: recorded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TraceFile {
        TraceFile {
            n_vis: 2,
            d: 2,
            heads: 1,
            total_layers: 3,
            layers: vec![
                TraceLayer { layer_index: 0, hidden: vec![1.0, 2.0, 3.0, 4.0], attention: vec![0.25, 0.5] },
                TraceLayer { layer_index: 2, hidden: vec![-1.0, 0.5, 0.0, 8.0], attention: vec![0.1, 0.2] },
            ],
        }
    }

    #[test]
    fn header_layout() {
        let bytes = tiny().encode().unwrap();
        assert_eq!(&bytes[..4], &[0x56, 0x54, 0x41, 0x31]);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 4 + 4 * 6 + 4 * 2 + 2 * 4 * (4 + 2));
        assert_eq!(&bytes[28..32], &0u32.to_le_bytes());
        assert_eq!(&bytes[32..36], &2u32.to_le_bytes());
        assert_eq!(&bytes[36..40], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncation_is_corrupt() {
        let bytes = tiny().encode().unwrap();
        assert!(matches!(TraceFile::decode(&bytes[..bytes.len() - 1]), Err(TraceError::CorruptTrace(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(TraceFile::decode(&extra), Err(TraceError::CorruptTrace(_))));
        assert!(matches!(TraceFile::decode(&bytes[..10]), Err(TraceError::CorruptTrace(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = tiny().encode().unwrap();
        bytes[3] = b'2';
        assert!(matches!(TraceFile::decode(&bytes), Err(TraceError::CorruptTrace(_))));
        let mut bytes = tiny().encode().unwrap();
        bytes[4] = 2;
        assert!(matches!(TraceFile::decode(&bytes), Err(TraceError::UnsupportedVersion(2))));
    }

    #[test]
    fn unordered_layers_are_rejected() {
        let mut t = tiny();
        t.layers.swap(0, 1);
        assert!(t.encode().is_err());
        let mut t = tiny();
        t.layers[1].layer_index = 3;
        assert!(t.encode().is_err());
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let mut bytes = MAGIC.to_vec();
        for w in [1u32, u32::MAX, u32::MAX, u32::MAX, 4, 0] {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        assert!(matches!(TraceFile::decode(&bytes), Err(TraceError::CorruptTrace(_))));
    }
}
