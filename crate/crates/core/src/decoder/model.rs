use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchParams {
    pub total_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// RMS normalization before attention, before the FFN and before the
    /// unembedding. Without it deep random stacks blow up.
    pub use_norm: bool,
}

impl ArchParams {
    pub fn new(total_layers: usize, d: usize, heads: usize) -> Self {
        Self { total_layers, d, heads, ffn_dim: 4 * d, vocab_size: 256, use_norm: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_layers == 0 || self.d == 0 || self.heads == 0 || self.ffn_dim == 0 || self.vocab_size == 0 {
            return Err(Error::BadArch("all dimensions must be positive"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::BadArch("d must be divisible by the head count"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// `d × ffn_dim`
    pub w_up: Matrix,
    /// `ffn_dim × d`
    pub w_down: Matrix,
}

/// Toy decoder with seeded random weights. Weights are stored `in × out` and
/// applied to row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    arch: ArchParams,
    seed: u64,
    embed: Matrix,
    layers: Vec<LayerWeights>,
    unembed: Matrix,
}

struct WeightRng(ChaCha8Rng);

impl WeightRng {
    /// Uniform on `[-scale, scale)` from the top 53 bits of one draw.
    fn uniform(&mut self, scale: f64) -> f64 {
        let unit = (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (2.0 * unit - 1.0) * scale
    }

    /// Row-major fill; entries have unit output variance for unit inputs.
    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let scale = libm::sqrt(3.0 / rows as f64);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| self.uniform(scale)).collect())
    }
}

/// Uniform `[-1, 1)` stream for synthetic inputs, independent of the weights.
pub(crate) fn unit_stream(seed: u64, stream: u64) -> impl FnMut() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut w = WeightRng(rng);
    move || w.uniform(1.0)
}

impl DecoderModel {
    /// Fill order: embedding table, then per layer `wq, wk, wv, wo, w_up,
    /// w_down`, then the unembedding, all from one ChaCha8 stream.
    pub fn init(arch: ArchParams, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = WeightRng(ChaCha8Rng::seed_from_u64(seed));
        let d = arch.d;
        // Embedding rows get unit-variance entries.
        let embed = Matrix::from_vec(
            arch.vocab_size,
            d,
            (0..arch.vocab_size * d).map(|_| rng.uniform(libm::sqrt(3.0))).collect(),
        );
        let layers = (0..arch.total_layers)
            .map(|_| LayerWeights {
                wq: rng.matrix(d, d),
                wk: rng.matrix(d, d),
                wv: rng.matrix(d, d),
                wo: rng.matrix(d, d),
                w_up: rng.matrix(d, arch.ffn_dim),
                w_down: rng.matrix(arch.ffn_dim, d),
            })
            .collect();
        let unembed = rng.matrix(d, arch.vocab_size);
        Ok(Self { arch, seed, embed, layers, unembed })
    }

    pub fn arch(&self) -> &ArchParams {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer(&self, i: usize) -> &LayerWeights {
        &self.layers[i]
    }

    pub fn embedding(&self, token: u32) -> &[f64] {
        self.embed.row(token as usize)
    }

    pub fn unembedding(&self) -> &Matrix {
        &self.unembed
    }

    /// Every weight, in initialization order.
    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        let layer_params = self.layers.iter().flat_map(|l| {
            [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_up, &l.w_down]
                .into_iter()
                .flat_map(|m| m.as_slice().iter().copied())
        });
        self.embed
            .as_slice()
            .iter()
            .copied()
            .chain(layer_params)
            .chain(self.unembed.as_slice().iter().copied())
    }
}
