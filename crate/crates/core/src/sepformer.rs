//! Dual-path transformer masking network.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{FeatureLayout, FeatureMap};
use crate::nn::attention::TransformerStack;
use crate::nn::layers::{GlobalLayerNorm, Linear, PRelu};
use crate::nn::{ops, Builder};

const GLN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SepformerConfig {
    /// Chunk length K in frames; chunks overlap by half.
    pub chunk_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub repeats: usize,
    /// Width N inside the separator and of the produced mask.
    pub model_dim: usize,
}

impl SepformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size < 2 {
            return Err(Error::config("chunk size must be at least 2"));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "separator width {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.chunk_size / 2
    }
}

/// Overlapping chunks (B, N, K, S) of a (B, N, L) sequence.
#[derive(Debug, Clone)]
pub struct ChunkedFeature {
    data: Tensor,
    chunk_len: usize,
    hop: usize,
    source_len: usize,
}

impl ChunkedFeature {
    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn chunks(&self) -> usize {
        self.data.dims()[3]
    }

    fn with_data(&self, data: Tensor) -> Self {
        Self {
            data,
            ..self.clone()
        }
    }
}

/// Number of chunks covering `len` frames, tail zero-padded.
pub fn chunk_count(len: usize, k: usize, hop: usize) -> usize {
    if len <= k {
        1
    } else {
        (len - k).div_ceil(hop) + 1
    }
}

pub fn segment(x: &Tensor, k: usize, hop: usize) -> Result<ChunkedFeature> {
    if k < 2 {
        return Err(Error::config("chunk size must be at least 2"));
    }
    if hop == 0 || hop > k {
        return Err(Error::config(format!("invalid chunk hop {hop} for size {k}")));
    }
    let (b, n, l) = x.dims3()?;
    let s = chunk_count(l, k, hop);
    let padded = (s - 1) * hop + k;
    let seq = x.transpose(1, 2)?.pad_with_zeros(1, 0, padded - l)?;
    let chunks = ops::frames(&seq, k, hop)?
        .reshape((b, s, k, n))?
        .permute((0, 3, 2, 1))?
        .contiguous()?;
    Ok(ChunkedFeature {
        data: chunks,
        chunk_len: k,
        hop,
        source_len: l,
    })
}

/// Sums chunks back onto the frame axis, divides by the coverage count and
/// drops the padded tail.
pub fn overlap_add_chunks(c: &ChunkedFeature) -> Result<Tensor> {
    let (b, n, k, s) = c.data.dims4()?;
    let flat = c.data.permute((0, 3, 2, 1))?.reshape((b, s, k * n))?;
    let summed = ops::overlap_add(&flat, k, c.hop, n)?;
    let counts = ops::overlap_counts(s, k, c.hop);
    let inv: Vec<f64> = counts.iter().map(|v| 1.0 / v).collect();
    let inv = Tensor::from_vec(inv, (1, counts.len(), 1), &Device::Cpu)?.to_dtype(c.data.dtype())?;
    Ok(summed
        .broadcast_mul(&inv)?
        .narrow(1, 0, c.source_len)?
        .transpose(1, 2)?
        .contiguous()?)
}

struct DualBlock {
    intra: TransformerStack,
    intra_norm: GlobalLayerNorm,
    inter: TransformerStack,
    inter_norm: GlobalLayerNorm,
}

impl DualBlock {
    fn forward(&self, c: &ChunkedFeature) -> Result<ChunkedFeature> {
        let x = c.data();
        let (b, n, k, s) = x.dims4()?;
        let seq = x.permute((0, 3, 2, 1))?.reshape((b * s, k, n))?;
        let y = self
            .intra
            .forward(&seq, None, None)?
            .reshape((b, s, k, n))?
            .permute((0, 3, 2, 1))?;
        let x = (self.intra_norm.forward(&y)? + x)?;
        let seq = x.permute((0, 2, 3, 1))?.reshape((b * k, s, n))?;
        let y = self
            .inter
            .forward(&seq, None, None)?
            .reshape((b, k, s, n))?
            .permute((0, 3, 1, 2))?;
        let x = (self.inter_norm.forward(&y)? + x)?;
        Ok(c.with_data(x))
    }
}

/// Gated output stage turning processed chunks into a rectified mask.
struct MaskHead {
    act: PRelu,
    conv: Linear,
    output: Linear,
    gate: Linear,
    end: Linear,
}

impl MaskHead {
    fn forward(&self, c: &ChunkedFeature) -> Result<Tensor> {
        let x = self.conv.forward_channels(&self.act.forward(c.data())?)?;
        let x = overlap_add_chunks(&c.with_data(x))?;
        let y = (self.output.forward_channels(&x)?.tanh()? * ops::sigmoid(&self.gate.forward_channels(&x)?)?)?;
        Ok(self.end.forward_channels(&y)?.relu()?)
    }
}

pub struct SepformerSeparator {
    cfg: SepformerConfig,
    in_channels: usize,
    norm: GlobalLayerNorm,
    in_proj: Linear,
    blocks: Vec<DualBlock>,
    head: MaskHead,
}

impl SepformerSeparator {
    pub fn new(b: &mut Builder, cfg: SepformerConfig, in_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.model_dim;
        let blocks = (0..cfg.repeats)
            .map(|r| {
                let mut b = b.pp(format!("blocks.{r}"));
                Ok(DualBlock {
                    intra: TransformerStack::new(&mut b.pp("intra"), cfg.layers, n, cfg.heads, cfg.ffn_dim, false, true)?,
                    intra_norm: GlobalLayerNorm::new(&mut b.pp("intra_norm"), n, GLN_EPS)?,
                    inter: TransformerStack::new(&mut b.pp("inter"), cfg.layers, n, cfg.heads, cfg.ffn_dim, false, true)?,
                    inter_norm: GlobalLayerNorm::new(&mut b.pp("inter_norm"), n, GLN_EPS)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            in_channels,
            norm: GlobalLayerNorm::new(&mut b.pp("norm"), in_channels, GLN_EPS)?,
            in_proj: Linear::new(&mut b.pp("in_proj"), in_channels, n, false)?,
            blocks,
            head: MaskHead {
                act: PRelu::new(&mut b.pp("head.act"), 1)?,
                conv: Linear::new(&mut b.pp("head.conv"), n, n, false)?,
                output: Linear::new(&mut b.pp("head.output"), n, n, false)?,
                gate: Linear::new(&mut b.pp("head.gate"), n, n, false)?,
                end: Linear::new(&mut b.pp("head.end"), n, n, false)?,
            },
        })
    }

    pub fn config(&self) -> &SepformerConfig {
        &self.cfg
    }

    /// Normalizes and projects fused features, then chunks them.
    pub fn prepare(&self, e_f: &FeatureMap) -> Result<ChunkedFeature> {
        e_f.expect_layout(FeatureLayout::Time)?;
        if e_f.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "separator expects {} channels, got {}",
                self.in_channels,
                e_f.channels()
            )));
        }
        let x = self.in_proj.forward_channels(&self.norm.forward(e_f.data())?)?;
        segment(&x, self.cfg.chunk_size, self.cfg.hop())
    }

    pub fn dual_path(&self, chunks: &ChunkedFeature) -> Result<ChunkedFeature> {
        let mut c = chunks.clone();
        for block in &self.blocks {
            c = block.forward(&c)?;
        }
        Ok(c)
    }

    pub fn mask_head(&self, chunks: &ChunkedFeature) -> Result<Tensor> {
        self.head.forward(chunks)
    }

    /// Mask (B, N, L) for the mixture encoding.
    pub fn forward(&self, e_f: &FeatureMap) -> Result<FeatureMap> {
        let chunks = self.prepare(e_f)?;
        let mask = self.mask_head(&self.dual_path(&chunks)?)?;
        e_f.with_data(mask)
    }
}
