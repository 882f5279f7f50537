//! Differentiable building blocks composed from primitive tensor ops.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // Written through tanh so that the gradient stays finite for large |x|.
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Zero-mean, unit-variance normalization over `dims` (biased variance).
pub fn normalize_over(x: &Tensor, dims: &[usize], eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(dims)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(dims)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Affine map over the last dimension: `x W^T + b` with `W` shaped (out, in).
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let din = *dims.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
    let (dout, win) = w.dims2()?;
    if din != win {
        return Err(Error::shape(format!(
            "linear expects last dim {win}, got {din}"
        )));
    }
    let rows = x.elem_count() / din;
    let y = x.reshape((rows, din))?.matmul(&w.t()?)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out = dims;
    *out.last_mut().expect("non-empty") = dout;
    Ok(y.reshape(out)?)
}

/// Channel-mixing map on a channels-first tensor (B, Cin, ...) -> (B, Cout, ...).
pub fn pointwise(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    if dims.len() < 2 {
        return Err(Error::shape("pointwise map needs a channel axis"));
    }
    let (cout, cin) = w.dims2()?;
    if dims[1] != cin {
        return Err(Error::shape(format!(
            "pointwise map expects {cin} channels, got {}",
            dims[1]
        )));
    }
    let rest: usize = dims[2..].iter().product();
    let y = w.broadcast_left(dims[0])?.matmul(&x.reshape((dims[0], cin, rest))?)?;
    let y = match b {
        Some(b) => y.broadcast_add(&b.reshape((1, cout, 1))?)?,
        None => y,
    };
    let mut out = dims;
    out[1] = cout;
    Ok(y.reshape(out)?)
}

fn round_up(ks: usize, hs: usize) -> usize {
    ks.div_ceil(hs) * hs
}

/// Number of windows of length `ks` with hop `hs` that fit in `len` samples.
pub fn window_count(len: usize, ks: usize, hs: usize) -> usize {
    if len < ks {
        0
    } else {
        (len - ks) / hs + 1
    }
}

/// Sliding windows along axis 1 of (N, T, D), flattened to (N, W, ks*D) with
/// the window offset as the slow index.
pub fn frames(x: &Tensor, ks: usize, hs: usize) -> Result<Tensor> {
    let (n, t, d) = x.dims3()?;
    if ks == 0 || hs == 0 {
        return Err(Error::config("window and hop must be positive"));
    }
    let nwin = window_count(t, ks, hs);
    if nwin == 0 {
        return Err(Error::SignalTooShort { needed: ks, got: t });
    }
    let kp = round_up(ks, hs);
    let r = kp / hs;
    let need = (nwin + r - 1) * hs;
    let x = if need > t {
        x.pad_with_zeros(1, 0, need - t)?
    } else {
        x.narrow(1, 0, need)?
    };
    let x = x.reshape((n, nwin + r - 1, hs * d))?;
    let parts = (0..r)
        .map(|j| x.narrow(1, j, nwin))
        .collect::<candle_core::Result<Vec<_>>>()?;
    let out = Tensor::cat(&parts, 2)?;
    Ok(if kp != ks {
        out.narrow(2, 0, ks * d)?
    } else {
        out
    })
}

/// Adjoint of [`frames`]: sums windows (N, W, ks*D) back into (N, (W-1)*hs+ks, D).
pub fn overlap_add(y: &Tensor, ks: usize, hs: usize, d: usize) -> Result<Tensor> {
    let (n, nwin, kd) = y.dims3()?;
    if kd != ks * d {
        return Err(Error::shape(format!(
            "overlap-add expects {} values per window, got {kd}",
            ks * d
        )));
    }
    let kp = round_up(ks, hs);
    let r = kp / hs;
    let y = if kp != ks {
        y.pad_with_zeros(2, 0, (kp - ks) * d)?
    } else {
        y.clone()
    };
    let mut acc: Option<Tensor> = None;
    for j in 0..r {
        let part = y
            .narrow(2, j * hs * d, hs * d)?
            .pad_with_zeros(1, j, r - 1 - j)?;
        acc = Some(match acc {
            Some(a) => (a + part)?,
            None => part,
        });
    }
    let acc = acc.expect("at least one part");
    let total = (nwin + r - 1) * hs;
    Ok(acc
        .reshape((n, total, d))?
        .narrow(1, 0, (nwin - 1) * hs + ks)?)
}

/// How many windows cover each output position of [`overlap_add`].
pub fn overlap_counts(nwin: usize, ks: usize, hs: usize) -> Vec<f64> {
    let len = (nwin - 1) * hs + ks;
    let mut c = vec![0.0; len];
    for w in 0..nwin {
        for v in &mut c[w * hs..w * hs + ks] {
            *v += 1.0;
        }
    }
    c
}

/// 3x3 convolution with zero "same" padding on (B, Cin, H, W); weight (Cout, Cin, 3, 3).
pub fn conv2d_3x3(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if wcin != cin || kh != 3 || kw != 3 {
        return Err(Error::shape(format!(
            "conv2d weight {:?} does not fit input with {cin} channels",
            w.dims()
        )));
    }
    let xp = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut taps = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            taps.push(xp.narrow(2, i, h)?.narrow(3, j, wd)?);
        }
    }
    let cols = Tensor::stack(&taps, 2)?.reshape((b, cin * 9, h * wd))?;
    let y = w
        .reshape((cout, cin * 9))?
        .broadcast_left(b)?
        .matmul(&cols)?;
    Ok(y.reshape((b, cout, h, wd))?)
}
