//! Parameterized layers.

use candle_core::Tensor;

use super::ops;
use super::params::{Builder, Init, ParamKind};
use crate::error::Result;

/// Dense layer acting on the last axis. Weight is stored (out, in).
pub struct Linear {
    pub(crate) w: Tensor,
    pub(crate) b: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut Builder, input: usize, output: usize, bias: bool) -> Result<Self> {
        Self::with_kind(b, input, output, bias, ParamKind::Standard)
    }

    pub fn with_kind(
        b: &mut Builder,
        input: usize,
        output: usize,
        bias: bool,
        kind: ParamKind,
    ) -> Result<Self> {
        let init = Init::fan_in(input);
        let w = b.param("weight", &[output, input], init, kind)?;
        let bias = if bias {
            Some(b.param("bias", &[output], init, kind)?)
        } else {
            None
        };
        Ok(Self { w, b: bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.w, self.b.as_ref())
    }

    /// Applies the same weights as a 1x1 convolution on a channels-first tensor.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        ops::pointwise(x, &self.w, self.b.as_ref())
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: b.param("weight", &[dim], Init::Const(1.0), ParamKind::Standard)?,
            beta: b.param("bias", &[dim], Init::Const(0.0), ParamKind::Standard)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let y = ops::normalize_over(x, &[last], self.eps)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Normalization over all non-batch axes with a per-channel affine map
/// (group normalization with a single group) on (B, C, ...).
pub struct GlobalLayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl GlobalLayerNorm {
    pub fn new(b: &mut Builder, channels: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: b.param("weight", &[channels], Init::Const(1.0), ParamKind::Standard)?,
            beta: b.param("bias", &[channels], Init::Const(0.0), ParamKind::Standard)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims: Vec<usize> = (1..x.rank()).collect();
        let y = ops::normalize_over(x, &dims, self.eps)?;
        let mut shape = vec![1; x.rank()];
        shape[1] = self.gamma.dim(0)?;
        Ok(y
            .broadcast_mul(&self.gamma.reshape(shape.clone())?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

/// Parametric ReLU with either one shared slope or one slope per group along
/// axis 1.
pub struct PRelu {
    a: Tensor,
}

impl PRelu {
    pub fn new(b: &mut Builder, groups: usize) -> Result<Self> {
        Ok(Self {
            a: b.param("weight", &[groups], Init::Const(0.25), ParamKind::Standard)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.a.dim(0)?;
        let a = if n == 1 {
            self.a.reshape(vec![1; x.rank()])?
        } else {
            let mut shape = vec![1; x.rank()];
            shape[1] = n;
            self.a.reshape(shape)?
        };
        let neg = x.neg()?.relu()?;
        Ok(x.relu()?.sub(&neg.broadcast_mul(&a)?)?)
    }
}

/// Position-wise two-layer network with a ReLU in between.
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            lin1: Linear::new(&mut b.pp("lin1"), dim, hidden, true)?,
            lin2: Linear::new(&mut b.pp("lin2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.lin2.forward(&self.lin1.forward(x)?.relu()?)
    }
}
