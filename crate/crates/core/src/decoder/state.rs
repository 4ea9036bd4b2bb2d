use alloc::vec;
use alloc::vec::Vec;

use super::attention::{attend_last, causal_attention};
use super::model::{unit_stream, ArchParams, DecoderModel, LayerWeights};
use crate::error::{Error, Result};
use crate::matrix::{vec_mat, Matrix};
use crate::types::{AttentionRecord, TokenSequence};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    System,
    Visual,
    Text,
    Generated,
}

/// Prompt for one sequence: `[system | visual | text]`. Visual tokens arrive
/// as embeddings; the others as token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInput {
    pub system: Vec<u32>,
    pub visual: TokenSequence,
    pub text: Vec<u32>,
}

impl DecoderInput {
    /// Deterministic synthetic prompt. Visual embeddings are drawn around
    /// `clusters` random prototypes so that the similarity graph has
    /// structure.
    pub fn synthetic(
        arch: &ArchParams,
        n_system: usize,
        n_visual: usize,
        n_text: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = arch.d;
        let clusters = 8.min(n_visual.max(1));
        let mut ids = unit_stream(seed, 1);
        let mut token = move || ((ids() + 1.0) * 0.5 * arch.vocab_size as f64) as u32 % arch.vocab_size as u32;
        let system = (0..n_system).map(|_| token()).collect();
        let text = (0..n_text).map(|_| token()).collect();

        let mut u = unit_stream(seed, 2);
        let prototypes: Vec<Vec<f64>> = (0..clusters).map(|_| (0..d).map(|_| u()).collect()).collect();
        let mut data = Vec::with_capacity(n_visual * d);
        for i in 0..n_visual {
            // Spatially adjacent patches share a prototype.
            let proto = &prototypes[(i * clusters) / n_visual.max(1)];
            data.extend(proto.iter().map(|&p| p + 0.5 * u()));
        }
        let visual = TokenSequence::new(Matrix::from_vec(n_visual, d, data))?;
        Ok(Self { system, visual, text })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    k: Matrix,
    v: Matrix,
}

/// Live state of one sequence: the residual stream after the last completed
/// layer, per-layer key/value caches over the surviving tokens, and the
/// segment of every live token.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    hidden: Matrix,
    segments: Vec<Segment>,
    /// Position of each live token in the uncompressed prompt.
    positions: Vec<usize>,
    /// Index of each live visual token within the original visual segment.
    visual_origin: Vec<usize>,
    caches: Vec<Option<LayerCache>>,
    visual_start: usize,
    next_layer: usize,
}

impl DecoderState {
    pub fn new(model: &DecoderModel, input: &DecoderInput) -> Result<Self> {
        let arch = model.arch();
        if input.visual.is_empty() {
            return Err(Error::InvalidInput("visual segment must be non-empty"));
        }
        if input.text.is_empty() {
            return Err(Error::InvalidInput("text segment must be non-empty"));
        }
        if input.visual.dim() != arch.d {
            return Err(Error::DimensionMismatch { expected: arch.d, actual: input.visual.dim() });
        }
        if input.system.iter().chain(&input.text).any(|&t| t as usize >= arch.vocab_size) {
            return Err(Error::InvalidInput("token id outside the vocabulary"));
        }

        let n = input.system.len() + input.visual.len() + input.text.len();
        let mut hidden = Matrix::zeros(0, arch.d);
        let mut segments = Vec::with_capacity(n);
        for &t in &input.system {
            hidden.push_row(model.embedding(t));
            segments.push(Segment::System);
        }
        for row in input.visual.data().iter_rows() {
            hidden.push_row(row);
            segments.push(Segment::Visual);
        }
        for &t in &input.text {
            hidden.push_row(model.embedding(t));
            segments.push(Segment::Text);
        }
        Ok(Self {
            hidden,
            segments,
            positions: (0..n).collect(),
            visual_origin: (0..input.visual.len()).collect(),
            caches: vec![None; arch.total_layers],
            visual_start: input.system.len(),
            next_layer: 0,
        })
    }

    /// Residual stream after the last completed layer, one row per live token.
    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Next layer prefill will run.
    pub fn next_layer(&self) -> usize {
        self.next_layer
    }

    /// Live rows holding visual tokens; always contiguous.
    pub fn visual_range(&self) -> core::ops::Range<usize> {
        self.visual_start..self.visual_start + self.visual_origin.len()
    }

    pub fn visual_count(&self) -> usize {
        self.visual_origin.len()
    }

    pub fn non_visual_count(&self) -> usize {
        self.len() - self.visual_count()
    }

    /// Live visual tokens, tagged with their index in the original visual segment.
    pub fn visual_tokens(&self) -> TokenSequence {
        let range = self.visual_range();
        let rows: Vec<usize> = range.collect();
        TokenSequence::from_parts_unchecked(self.hidden.gather_rows(&rows), self.visual_origin.clone())
    }

    /// Live row of the last text token.
    pub fn last_text_row(&self) -> usize {
        self.segments.iter().rposition(|&s| s == Segment::Text).expect("text segment is non-empty")
    }

    /// Rows cached for `layer` (0 until prefill reaches it).
    pub fn cache_len(&self, layer: usize) -> usize {
        self.caches[layer].as_ref().map_or(0, |c| c.k.rows())
    }

    /// Replaces the visual segment by `tokens`, whose origins must be a
    /// subsequence of the live visual origins. Dropped tokens disappear from
    /// the residual stream and from every layer's cache.
    pub(crate) fn replace_visual(&mut self, tokens: &TokenSequence) -> Result<()> {
        let range = self.visual_range();
        let mut keep_rows = Vec::with_capacity(self.len());
        keep_rows.extend(0..range.start);
        let mut cursor = 0;
        for &origin in tokens.origin_indices() {
            while cursor < self.visual_origin.len() && self.visual_origin[cursor] != origin {
                cursor += 1;
            }
            if cursor == self.visual_origin.len() {
                return Err(Error::InvalidInput("replacement tokens are not a subsequence of the live visual tokens"));
            }
            keep_rows.push(range.start + cursor);
            cursor += 1;
        }
        keep_rows.extend(range.end..self.len());

        let mut hidden = self.hidden.gather_rows(&keep_rows);
        for (i, row) in tokens.data().iter_rows().enumerate() {
            hidden.row_mut(range.start + i).copy_from_slice(row);
        }
        self.hidden = hidden;
        self.segments = keep_rows.iter().map(|&r| self.segments[r]).collect();
        self.positions = keep_rows.iter().map(|&r| self.positions[r]).collect();
        self.visual_origin = tokens.origin_indices().to_vec();
        for cache in self.caches.iter_mut().flatten() {
            cache.k = cache.k.gather_rows(&keep_rows);
            cache.v = cache.v.gather_rows(&keep_rows);
        }
        Ok(())
    }

    /// Greedy next-token logits from the last live row.
    pub fn logits(&self, model: &DecoderModel) -> Vec<f64> {
        let mut x = self.hidden.row(self.len() - 1).to_vec();
        if model.arch().use_norm {
            rms_norm(&mut x);
        }
        let mut out = vec![0.0; model.arch().vocab_size];
        vec_mat(&x, model.unembedding(), &mut out);
        out
    }

    /// Runs one new token through every layer, appending its keys and values
    /// to the caches. Prefill must be complete.
    pub fn append_token(&mut self, model: &DecoderModel, token: u32) -> Result<()> {
        let arch = model.arch();
        if self.next_layer != arch.total_layers {
            return Err(Error::InvalidInput("prefill is not complete"));
        }
        if token as usize >= arch.vocab_size {
            return Err(Error::InvalidInput("token id outside the vocabulary"));
        }
        let d = arch.d;
        let mut x = model.embedding(token).to_vec();
        let (mut q, mut k, mut v) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut y = vec![0.0; d];
        let mut proj = vec![0.0; d];
        for (l, cache) in self.caches.iter_mut().enumerate() {
            let w = model.layer(l);
            let cache = cache.as_mut().expect("prefill filled every cache");
            let mut xn = x.clone();
            if arch.use_norm {
                rms_norm(&mut xn);
            }
            vec_mat(&xn, &w.wq, &mut q);
            vec_mat(&xn, &w.wk, &mut k);
            vec_mat(&xn, &w.wv, &mut v);
            cache.k.push_row(&k);
            cache.v.push_row(&v);
            attend_last(&q, &cache.k, &cache.v, arch.heads, &mut y);
            vec_mat(&y, &w.wo, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            ffn_residual(&mut x, w, arch.use_norm);
        }
        self.hidden.push_row(&x);
        self.segments.push(Segment::Generated);
        let next = self.positions.last().map_or(0, |p| p + 1);
        self.positions.push(next);
        Ok(())
    }
}

fn rms_norm(x: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / libm::sqrt(ms + RMS_EPS);
    x.iter_mut().for_each(|v| *v *= inv);
}

#[inline]
fn silu(x: f64) -> f64 {
    x / (1.0 + libm::exp(-x))
}

/// `x += W_down · silu(W_up · norm(x))`
fn ffn_residual(x: &mut [f64], w: &LayerWeights, use_norm: bool) {
    let mut xn = x.to_vec();
    if use_norm {
        rms_norm(&mut xn);
    }
    let mut hidden = vec![0.0; w.w_up.cols()];
    vec_mat(&xn, &w.w_up, &mut hidden);
    hidden.iter_mut().for_each(|h| *h = silu(*h));
    let mut out = vec![0.0; x.len()];
    vec_mat(&hidden, &w.w_down, &mut out);
    x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
}

fn project(x: &Matrix, w: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for i in 0..x.rows() {
        vec_mat(x.row(i), w, out.row_mut(i));
    }
    out
}

/// Runs layer `layer` over every live token: causal multi-head attention with
/// a residual connection, then the FFN with a residual connection. Returns
/// the attention of the last text token onto the live visual tokens, per head.
pub fn forward_layer(model: &DecoderModel, state: &mut DecoderState, layer: usize) -> Result<AttentionRecord> {
    let arch = model.arch();
    if layer != state.next_layer || layer >= arch.total_layers {
        return Err(Error::InvalidInput("layers must run in order"));
    }
    let w = model.layer(layer);
    let mut xn = state.hidden.clone();
    if arch.use_norm {
        for i in 0..xn.rows() {
            rms_norm(xn.row_mut(i));
        }
    }
    let q = project(&xn, &w.wq);
    let k = project(&xn, &w.wk);
    let v = project(&xn, &w.wv);
    let (y, probs) = causal_attention(&q, &k, &v, arch.heads);
    let attn = project(&y, &w.wo);

    let mut hidden = state.hidden.clone();
    for i in 0..hidden.rows() {
        let row = hidden.row_mut(i);
        row.iter_mut().zip(attn.row(i)).for_each(|(a, b)| *a += b);
        ffn_residual(row, w, arch.use_norm);
    }

    let t = state.last_text_row();
    let vis = state.visual_range();
    let mut rows = Matrix::zeros(arch.heads, vis.len());
    for (h, a) in probs.iter().enumerate() {
        rows.row_mut(h).copy_from_slice(&a.row(t)[vis.clone()]);
    }

    state.hidden = hidden;
    state.caches[layer] = Some(LayerCache { k, v });
    state.next_layer += 1;
    AttentionRecord::new(layer, rows)
}

/// Greedy decoding: the argmax token (lowest id on ties) is emitted and fed
/// back until `max_steps` tokens have been produced.
pub fn generate(model: &DecoderModel, state: &mut DecoderState, max_steps: usize) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(max_steps);
    for step in 0..max_steps {
        let logits = state.logits(model);
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        out.push(best as u32);
        if step + 1 < max_steps {
            state.append_token(model, best as u32)?;
        }
    }
    Ok(out)
}
