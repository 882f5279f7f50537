//! Grid blocks over (channel, frequency, frame) features.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{FeatureLayout, FeatureMap};
use crate::nn::attention::FrameAttention;
use crate::nn::layers::Linear;
use crate::nn::lstm::BiLstm;
use crate::nn::{ops, Builder, Init, ParamKind};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridConfig {
    pub blocks: usize,
    /// Unfold kernel along the sequence axis.
    pub kernel: usize,
    /// Unfold stride.
    pub hop: usize,
    /// Hidden units per direction of the recurrent layers.
    pub hidden: usize,
    pub heads: usize,
    /// Per-head query/key size, spread over frequency bins.
    pub qk_budget: usize,
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.hop == 0 || self.hop > self.kernel {
            return Err(Error::config(format!(
                "grid unfold needs 1 <= hop <= kernel, got kernel {} hop {}",
                self.kernel, self.hop
            )));
        }
        if self.hidden == 0 || self.heads == 0 || self.qk_budget == 0 {
            return Err(Error::config("grid hidden size, heads and attention size must be positive"));
        }
        Ok(())
    }
}

/// Smallest length at least `len` that a (ks, hs) unfold covers exactly.
pub fn padded_len(len: usize, ks: usize, hs: usize) -> usize {
    if len <= ks {
        ks
    } else {
        (len - ks).div_ceil(hs) * hs + ks
    }
}

/// A (B, D, F', L') grid zero-padded at the high end of both axes.
#[derive(Debug, Clone)]
pub struct PaddedGrid {
    data: Tensor,
    freqs: usize,
    frames: usize,
}

impl PaddedGrid {
    pub fn pad(x: &Tensor, ks: usize, hs: usize) -> Result<Self> {
        let (_, _, f, l) = x.dims4()?;
        let data = x
            .pad_with_zeros(2, 0, padded_len(f, ks, hs) - f)?
            .pad_with_zeros(3, 0, padded_len(l, ks, hs) - l)?;
        Ok(Self {
            data,
            freqs: f,
            frames: l,
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    /// Original (F, L).
    pub fn source_dims(&self) -> (usize, usize) {
        (self.freqs, self.frames)
    }

    pub fn unpad(&self) -> Result<Tensor> {
        Ok(self.data.narrow(2, 0, self.freqs)?.narrow(3, 0, self.frames)?)
    }

    fn with_data(&self, data: Tensor) -> Self {
        Self {
            data,
            freqs: self.freqs,
            frames: self.frames,
        }
    }
}

/// Channel normalization, unfold, bidirectional recurrence, transposed
/// 1-D convolution and residual, run along one grid axis.
pub struct AxisModule {
    ks: usize,
    hs: usize,
    channels: usize,
    gamma: Tensor,
    beta: Tensor,
    rnn: BiLstm,
    deconv: Linear,
    deconv_bias: Tensor,
}

impl AxisModule {
    pub fn new(b: &mut Builder, channels: usize, cfg: &GridConfig) -> Result<Self> {
        let (ks, d) = (cfg.kernel, channels);
        Ok(Self {
            ks,
            hs: cfg.hop,
            channels,
            gamma: b.param("norm.gamma", &[d], Init::Const(1.0), ParamKind::CustomNorm)?,
            beta: b.param("norm.beta", &[d], Init::Const(0.0), ParamKind::CustomNorm)?,
            rnn: BiLstm::new(&mut b.pp("rnn"), ks * d, cfg.hidden)?,
            deconv: Linear::new(&mut b.pp("deconv"), 2 * cfg.hidden, ks * d, false)?,
            deconv_bias: b.param("deconv.bias", &[d], Init::fan_in(2 * cfg.hidden * ks), ParamKind::Standard)?,
        })
    }

    /// Runs along the frequency axis of a (B, D, F', L') tensor.
    fn along_freq(&self, x: &Tensor) -> Result<Tensor> {
        let (b, d, f, l) = x.dims4()?;
        if d != self.channels {
            return Err(Error::shape(format!("grid module expects {} channels, got {d}", self.channels)));
        }
        let shape = (1, d, 1, 1);
        let y = ops::normalize_over(x, &[1], NORM_EPS)?
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?;
        let seq = y.permute((0, 3, 2, 1))?.reshape((b * l, f, d))?;
        let u = ops::frames(&seq, self.ks, self.hs)?;
        let h = self.deconv.forward(&self.rnn.forward(&u)?)?;
        let back = ops::overlap_add(&h, self.ks, self.hs, d)?;
        if back.dim(1)? != f {
            return Err(Error::shape(format!(
                "axis length {f} is not padded for kernel {} hop {}",
                self.ks, self.hs
            )));
        }
        let back = back
            .broadcast_add(&self.deconv_bias)?
            .reshape((b, l, f, d))?
            .permute((0, 3, 2, 1))?;
        Ok((back + x)?)
    }

    pub fn forward_freq(&self, x: &PaddedGrid) -> Result<PaddedGrid> {
        Ok(x.with_data(self.along_freq(x.data())?))
    }

    pub fn forward_time(&self, x: &PaddedGrid) -> Result<PaddedGrid> {
        let y = self.along_freq(&x.data().transpose(2, 3)?)?.transpose(2, 3)?;
        Ok(x.with_data(y))
    }
}

pub struct GridBlock {
    intra: AxisModule,
    inter: AxisModule,
    attn: FrameAttention,
    ks: usize,
    hs: usize,
}

impl GridBlock {
    pub fn new(b: &mut Builder, channels: usize, freqs: usize, cfg: &GridConfig) -> Result<Self> {
        Ok(Self {
            intra: AxisModule::new(&mut b.pp("intra"), channels, cfg)?,
            inter: AxisModule::new(&mut b.pp("inter"), channels, cfg)?,
            attn: FrameAttention::new(&mut b.pp("attn"), channels, freqs, cfg.heads, cfg.qk_budget)?,
            ks: cfg.kernel,
            hs: cfg.hop,
        })
    }

    pub fn intra_full_band(&self, x: &PaddedGrid) -> Result<PaddedGrid> {
        self.intra.forward_freq(x)
    }

    pub fn sub_band_temporal(&self, x: &PaddedGrid) -> Result<PaddedGrid> {
        self.inter.forward_time(x)
    }

    /// Self-attention across frames with residual; also returns the
    /// attention probabilities (B*heads, L, L).
    pub fn cross_frame_attention(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (y, probs) = self.attn.forward(x, x)?;
        Ok(((y + x)?, probs))
    }

    pub fn forward(&self, x: &Tensor, probe: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
        let grid = PaddedGrid::pad(x, self.ks, self.hs)?;
        let grid = self.sub_band_temporal(&self.intra_full_band(&grid)?)?;
        let (y, probs) = self.cross_frame_attention(&grid.unpad()?)?;
        if let Some(p) = probe {
            p.push(probs);
        }
        Ok(y)
    }
}

/// Mapping separator: a stack of grid blocks, no mask.
pub struct GridSeparator {
    channels: usize,
    freqs: usize,
    blocks: Vec<GridBlock>,
}

impl GridSeparator {
    pub fn new(b: &mut Builder, cfg: GridConfig, channels: usize, freqs: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.kernel > freqs {
            return Err(Error::config(format!(
                "unfold kernel {} exceeds {freqs} frequency bins",
                cfg.kernel
            )));
        }
        let blocks = (0..cfg.blocks)
            .map(|i| GridBlock::new(&mut b.pp(format!("blocks.{i}")), channels, freqs, &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            channels,
            freqs,
            blocks,
        })
    }

    pub fn blocks(&self) -> &[GridBlock] {
        &self.blocks
    }

    pub fn forward(&self, e_f: &FeatureMap, mut probe: Option<&mut Vec<Tensor>>) -> Result<FeatureMap> {
        e_f.expect_layout(FeatureLayout::Tf)?;
        let dims = e_f.dims();
        if dims[1] != self.channels || dims[2] != self.freqs {
            return Err(Error::shape(format!(
                "grid separator expects {} channels and {} bins, got {:?}",
                self.channels, self.freqs, dims
            )));
        }
        let mut x = e_f.data().clone();
        for block in &self.blocks {
            x = block.forward(&x, probe.as_deref_mut())?;
        }
        e_f.with_data(x)
    }
}
