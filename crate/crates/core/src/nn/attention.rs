//! Sequence attention (token layout) and frame attention over T-F grids.

use candle_core::{DType, Device, Tensor};

use super::layers::{FeedForward, LayerNorm, Linear, PRelu};
use super::ops;
use super::params::{Builder, Init, ParamKind};
use crate::error::{Error, Result};

const TOKEN_LN_EPS: f64 = 1e-6;
const GRID_LN_EPS: f64 = 1e-5;

/// Sinusoidal position table (len, dim): sines on even, cosines on odd columns.
pub fn sinusoidal_encoding(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0.0f64; len * dim];
    for p in 0..len {
        for i in (0..dim).step_by(2) {
            let div = (-(i as f64) * (10000f64).ln() / dim as f64).exp();
            v[p * dim + i] = (p as f64 * div).sin();
            if i + 1 < dim {
                v[p * dim + i + 1] = (p as f64 * div).cos();
            }
        }
    }
    Ok(Tensor::from_vec(v, (len, dim), device)?.to_dtype(dtype)?)
}

/// Multi-head attention on (B, L, D) token sequences with a fused input
/// projection.
pub struct MultiHeadAttention {
    heads: usize,
    dim: usize,
    in_w: Tensor,
    in_b: Tensor,
    out: Linear,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        let kind = ParamKind::AttentionProjection;
        let bound = (6.0 / (4 * dim) as f64).sqrt();
        Ok(Self {
            heads,
            dim,
            in_w: b.param("in_proj_weight", &[3 * dim, dim], Init::Uniform(bound), kind)?,
            in_b: b.param("in_proj_bias", &[3 * dim], Init::Const(0.0), kind)?,
            out: Linear::with_kind(&mut b.pp("out_proj"), dim, dim, true, kind)?,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns the attended output and the attention probabilities (B, h, Lq, Lk).
    pub fn forward(&self, q: &Tensor, kv: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.dim;
        let wq = self.in_w.narrow(0, 0, d)?;
        let bq = self.in_b.narrow(0, 0, d)?;
        let wkv = self.in_w.narrow(0, d, 2 * d)?;
        let bkv = self.in_b.narrow(0, d, 2 * d)?;
        let qp = ops::linear(q, &wq, Some(&bq))?;
        let kvp = ops::linear(kv, &wkv, Some(&bkv))?;
        let kp = kvp.narrow(2, 0, d)?;
        let vp = kvp.narrow(2, d, d)?;
        let (qh, kh, vh) = (
            self.split_heads(&qp)?,
            self.split_heads(&kp)?,
            self.split_heads(&vp)?,
        );
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (qh.matmul(&kh.t()?)? * scale)?;
        let probs = ops::softmax_last(&scores)?;
        let ctx = probs.matmul(&vh)?;
        let (b, _, lq, _) = ctx.dims4()?;
        let ctx = ctx.transpose(1, 2)?.reshape((b, lq, d))?;
        Ok((self.out.forward(&ctx)?, probs))
    }
}

/// Pre-norm transformer layer. With a separate key/value stream it performs
/// cross-attention (queries from `x`), otherwise self-attention.
pub struct TransformerLayer {
    norm1: LayerNorm,
    norm_kv: Option<LayerNorm>,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new(b: &mut Builder, dim: usize, heads: usize, ffn: usize, cross: bool) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut b.pp("norm1"), dim, TOKEN_LN_EPS)?,
            norm_kv: if cross {
                Some(LayerNorm::new(&mut b.pp("norm_kv"), dim, TOKEN_LN_EPS)?)
            } else {
                None
            },
            attn: MultiHeadAttention::new(&mut b.pp("attn"), dim, heads)?,
            norm2: LayerNorm::new(&mut b.pp("norm2"), dim, TOKEN_LN_EPS)?,
            ffn: FeedForward::new(&mut b.pp("ffn"), dim, ffn)?,
        })
    }

    pub fn forward(&self, x: &Tensor, kv: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let q = self.norm1.forward(x)?;
        let (a, probs) = match (kv, &self.norm_kv) {
            (Some(kv), Some(norm)) => self.attn.forward(&q, &norm.forward(kv)?)?,
            (None, None) => self.attn.forward(&q, &q)?,
            _ => {
                return Err(Error::config(
                    "cross-attention layer needs a key/value stream and vice versa",
                ))
            }
        };
        let x = (x + a)?;
        let y = self.ffn.forward(&self.norm2.forward(&x)?)?;
        Ok(((x + y)?, probs))
    }
}

/// Stack of transformer layers with a final normalization and optional
/// sinusoidal positions added to the query stream.
pub struct TransformerStack {
    layers: Vec<TransformerLayer>,
    norm: LayerNorm,
    positional: bool,
}

impl TransformerStack {
    pub fn new(
        b: &mut Builder,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn: usize,
        cross: bool,
        positional: bool,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| TransformerLayer::new(&mut b.pp(format!("layers.{i}")), dim, heads, ffn, cross))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(&mut b.pp("norm"), dim, TOKEN_LN_EPS)?,
            positional,
        })
    }

    /// `x` is (B, L, D). Attention maps are appended to `probe` when given.
    pub fn forward(
        &self,
        x: &Tensor,
        kv: Option<&Tensor>,
        mut probe: Option<&mut Vec<Tensor>>,
    ) -> Result<Tensor> {
        let mut x = if self.positional {
            let (_, l, d) = x.dims3()?;
            x.broadcast_add(&sinusoidal_encoding(l, d, x.dtype(), x.device())?)?
        } else {
            x.clone()
        };
        for layer in &self.layers {
            let (y, probs) = layer.forward(&x, kv)?;
            if let Some(p) = probe.as_deref_mut() {
                p.push(probs.detach());
            }
            x = y;
        }
        self.norm.forward(&x)
    }
}

/// Per-head PReLU followed by normalization over (channels, frequency) of
/// each head and frame, on (B, heads*E, F, L).
struct HeadNorm {
    heads: usize,
    act: Tensor,
    gamma: Tensor,
    beta: Tensor,
}

impl HeadNorm {
    fn new(b: &mut Builder, heads: usize, e: usize, freqs: usize) -> Result<Self> {
        Ok(Self {
            heads,
            act: b.param("act.weight", &[heads], Init::Const(0.25), ParamKind::Standard)?,
            gamma: b.param("gamma", &[heads, e, freqs], Init::Const(1.0), ParamKind::CustomNorm)?,
            beta: b.param("beta", &[heads, e, freqs], Init::Const(0.0), ParamKind::CustomNorm)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, f, l) = x.dims4()?;
        let e = c / self.heads;
        let x = x.reshape((b, self.heads, e, f, l))?;
        let a = self.act.reshape((1, self.heads, 1, 1, 1))?;
        let x = x.relu()?.sub(&x.neg()?.relu()?.broadcast_mul(&a)?)?;
        let y = ops::normalize_over(&x, &[2, 3], GRID_LN_EPS)?;
        let g = self.gamma.reshape((1, self.heads, e, f, 1))?;
        let bt = self.beta.reshape((1, self.heads, e, f, 1))?;
        Ok(y.broadcast_mul(&g)?.broadcast_add(&bt)?.reshape((b, c, f, l))?)
    }
}

/// Normalization over (channels, frequency) per frame on (B, C, F, L).
pub struct ChannelFreqNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl ChannelFreqNorm {
    pub fn new(b: &mut Builder, channels: usize, freqs: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[channels, freqs], Init::Const(1.0), ParamKind::CustomNorm)?,
            beta: b.param("beta", &[channels, freqs], Init::Const(0.0), ParamKind::CustomNorm)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, f, _) = x.dims4()?;
        let y = ops::normalize_over(x, &[1, 2], GRID_LN_EPS)?;
        Ok(y
            .broadcast_mul(&self.gamma.reshape((1, c, f, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, f, 1))?)?)
    }
}

/// Multi-head attention across frames of a (B, C, F, L) grid. Each head
/// scores frames with E-channel queries and keys flattened over frequency;
/// values keep C/heads channels so concatenated heads restore C.
pub struct FrameAttention {
    heads: usize,
    qk_channels: usize,
    v_channels: usize,
    q: Linear,
    q_norm: HeadNorm,
    k: Linear,
    k_norm: HeadNorm,
    v: Linear,
    v_norm: HeadNorm,
    proj: Linear,
    proj_act: PRelu,
    proj_norm: ChannelFreqNorm,
}

impl FrameAttention {
    /// `qk_budget` is the approximate per-head query/key size before dividing
    /// by the number of frequency bins.
    pub fn new(
        b: &mut Builder,
        channels: usize,
        freqs: usize,
        heads: usize,
        qk_budget: usize,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(format!(
                "{channels} channels are not divisible by {heads} heads"
            )));
        }
        let e = qk_budget.div_ceil(freqs).max(1);
        let cv = channels / heads;
        Ok(Self {
            heads,
            qk_channels: e,
            v_channels: cv,
            q: Linear::new(&mut b.pp("q"), channels, heads * e, true)?,
            q_norm: HeadNorm::new(&mut b.pp("q_norm"), heads, e, freqs)?,
            k: Linear::new(&mut b.pp("k"), channels, heads * e, true)?,
            k_norm: HeadNorm::new(&mut b.pp("k_norm"), heads, e, freqs)?,
            v: Linear::new(&mut b.pp("v"), channels, heads * cv, true)?,
            v_norm: HeadNorm::new(&mut b.pp("v_norm"), heads, cv, freqs)?,
            proj: Linear::new(&mut b.pp("proj"), channels, channels, true)?,
            proj_act: PRelu::new(&mut b.pp("proj_act"), 1)?,
            proj_norm: ChannelFreqNorm::new(&mut b.pp("proj_norm"), channels, freqs)?,
        })
    }

    pub fn qk_channels(&self) -> usize {
        self.qk_channels
    }

    /// (B, h*W, F, L) -> (B*h, L, W*F)
    fn tokens(&self, x: &Tensor, width: usize) -> Result<Tensor> {
        let (b, _, f, l) = x.dims4()?;
        Ok(x
            .reshape((b * self.heads, width, f, l))?
            .permute((0, 3, 1, 2))?
            .reshape((b * self.heads, l, width * f))?)
    }

    /// Attention of `xq` frames over `xkv` frames. Returns the projected
    /// output without residual, and probabilities (B*heads, Lq, Lk).
    pub fn forward(&self, xq: &Tensor, xkv: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, f, lq) = xq.dims4()?;
        let (b2, c2, f2, _) = xkv.dims4()?;
        if (b, c, f) != (b2, c2, f2) {
            return Err(Error::shape(format!(
                "frame attention streams differ: {:?} vs {:?}",
                xq.dims(),
                xkv.dims()
            )));
        }
        let q = self.tokens(&self.q_norm.forward(&self.q.forward_channels(xq)?)?, self.qk_channels)?;
        let k = self.tokens(&self.k_norm.forward(&self.k.forward_channels(xkv)?)?, self.qk_channels)?;
        let v = self.tokens(&self.v_norm.forward(&self.v.forward_channels(xkv)?)?, self.v_channels)?;
        let scale = 1.0 / ((self.qk_channels * f) as f64).sqrt();
        let probs = ops::softmax_last(&(q.matmul(&k.t()?)? * scale)?)?;
        let ctx = probs
            .matmul(&v)?
            .reshape((b * self.heads, lq, self.v_channels, f))?
            .permute((0, 2, 3, 1))?
            .reshape((b, c, f, lq))?;
        let y = self.proj.forward_channels(&ctx)?;
        let y = self.proj_norm.forward(&self.proj_act.forward(&y)?)?;
        Ok((y, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use rand::{Rng, SeedableRng};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn positional_table_first_rows() {
        let pe = sinusoidal_encoding(3, 4, DType::F64, &Device::Cpu).unwrap();
        let v = pe.to_vec2::<f64>().unwrap();
        assert_eq!(v[0], vec![0.0, 1.0, 0.0, 1.0]);
        assert!((v[1][0] - 1f64.sin()).abs() < 1e-15);
        assert!((v[1][3] - (0.01f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn attention_probabilities_are_normalized() {
        let mut store = ParamStore::new(3, DType::F64);
        let mha = MultiHeadAttention::new(&mut Builder::new(&mut store, false), 8, 2).unwrap();
        let (out, probs) = mha.forward(&randn(&[2, 5, 8], 1), &randn(&[2, 9, 8], 2)).unwrap();
        assert_eq!(out.dims(), &[2, 5, 8]);
        assert_eq!(probs.dims(), &[2, 2, 5, 9]);
        let sums: Vec<f64> = probs.sum(3).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn frame_attention_shapes_and_heads() {
        let mut store = ParamStore::new(3, DType::F64);
        let att = FrameAttention::new(&mut Builder::new(&mut store, false), 8, 5, 2, 12).unwrap();
        assert_eq!(att.qk_channels(), 3);
        let (y, p) = att
            .forward(&randn(&[1, 8, 5, 6], 1), &randn(&[1, 8, 5, 4], 2))
            .unwrap();
        assert_eq!(y.dims(), &[1, 8, 5, 6]);
        assert_eq!(p.dims(), &[2, 6, 4]);
        assert!(FrameAttention::new(&mut Builder::new(&mut store, false), 9, 5, 2, 12).is_err());
    }
}
