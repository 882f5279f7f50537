//! Bidirectional LSTM with a fused recurrence kernel.
//!
//! The input projection is an ordinary matmul; only the sequential part runs
//! in a custom op whose backward pass recomputes the gates and performs BPTT.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};
use gemm::Parallelism;
use num_traits::Float;

use super::ops::linear;
use super::params::{Builder, Init, ParamKind};
use crate::error::Result;

trait Real: Float + WithDType + 'static {}
impl Real for f32 {}
impl Real for f64 {}

/// `dst (m x n) (+)= lhs (m x k) * rhs (k x n)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn mm<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    dst_rs: usize,
    lhs: &[T],
    lhs_rs: usize,
    lhs_cs: usize,
    rhs: &[T],
    rhs_rs: usize,
    rhs_cs: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                dst[r * dst_rs..r * dst_rs + n].fill(T::zero());
            }
        }
        return;
    }
    assert!(dst.len() >= (m - 1) * dst_rs + n);
    assert!(lhs.len() > (m - 1) * lhs_rs + (k - 1) * lhs_cs);
    assert!(rhs.len() > (k - 1) * rhs_rs + (n - 1) * rhs_cs);
    // SAFETY: bounds of all three operands are asserted above and the
    // buffers do not alias.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            dst_rs as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            if accumulate { T::one() } else { T::zero() },
            T::one(),
            false,
            false,
            false,
            Parallelism::None,
        );
    }
}

fn sig<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Forward state of one direction, kept time-major.
struct Trajectory<T> {
    /// Activated gates (T, B, 4H) in order i, f, g, o.
    gates: Vec<T>,
    /// Cell states (T, B, H).
    cells: Vec<T>,
    /// Hidden states (T, B, H).
    hidden: Vec<T>,
}

/// `gx` is (B, T, 4H) row-major, `whh` is (4H, H).
fn run_forward<T: Real>(
    gx: &[T],
    whh: &[T],
    b: usize,
    t_len: usize,
    h: usize,
    reverse: bool,
) -> Trajectory<T> {
    let g4 = 4 * h;
    let mut gates = vec![T::zero(); t_len * b * g4];
    let mut cells = vec![T::zero(); t_len * b * h];
    let mut hidden = vec![T::zero(); t_len * b * h];
    let zeros = vec![T::zero(); b * h];
    let mut prev_t: Option<usize> = None;
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let pre = &mut gates[t * b * g4..(t + 1) * b * g4];
        for bi in 0..b {
            pre[bi * g4..(bi + 1) * g4]
                .copy_from_slice(&gx[(bi * t_len + t) * g4..(bi * t_len + t + 1) * g4]);
        }
        let h_prev: &[T] = match prev_t {
            Some(p) => &hidden[p * b * h..(p + 1) * b * h],
            None => &zeros,
        };
        // pre += h_prev (B x H) * whh^T (H x 4H)
        mm(b, g4, h, pre, g4, h_prev, h, 1, whh, 1, h, true);
        for bi in 0..b {
            for j in 0..h {
                let base = bi * g4;
                let i = sig(pre[base + j]);
                let f = sig(pre[base + h + j]);
                let g = pre[base + 2 * h + j].tanh();
                let o = sig(pre[base + 3 * h + j]);
                pre[base + j] = i;
                pre[base + h + j] = f;
                pre[base + 2 * h + j] = g;
                pre[base + 3 * h + j] = o;
                let c_prev = match prev_t {
                    Some(p) => cells[(p * b + bi) * h + j],
                    None => T::zero(),
                };
                let c = f * c_prev + i * g;
                cells[(t * b + bi) * h + j] = c;
                hidden[(t * b + bi) * h + j] = o * c.tanh();
            }
        }
        prev_t = Some(t);
    }
    Trajectory {
        gates,
        cells,
        hidden,
    }
}

fn batch_major<T: Real>(time_major: &[T], b: usize, t_len: usize, width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); time_major.len()];
    for t in 0..t_len {
        for bi in 0..b {
            out[(bi * t_len + t) * width..(bi * t_len + t + 1) * width]
                .copy_from_slice(&time_major[(t * b + bi) * width..(t * b + bi + 1) * width]);
        }
    }
    out
}

/// Returns (d_gx as (B, T, 4H), d_whh as (4H, H)).
fn run_backward<T: Real>(
    gx: &[T],
    whh: &[T],
    grad_out: &[T],
    b: usize,
    t_len: usize,
    h: usize,
    reverse: bool,
) -> (Vec<T>, Vec<T>) {
    let g4 = 4 * h;
    let tr = run_forward(gx, whh, b, t_len, h, reverse);
    let mut dgates = vec![T::zero(); t_len * b * g4];
    let mut dh_next = vec![T::zero(); b * h];
    let mut dc_next = vec![T::zero(); b * h];
    let mut dwhh = vec![T::zero(); g4 * h];
    for step in (0..t_len).rev() {
        let t = if reverse { t_len - 1 - step } else { step };
        let prev_t = if step == 0 {
            None
        } else if reverse {
            Some(t + 1)
        } else {
            Some(t - 1)
        };
        for bi in 0..b {
            for j in 0..h {
                let gb = (t * b + bi) * g4;
                let i = tr.gates[gb + j];
                let f = tr.gates[gb + h + j];
                let g = tr.gates[gb + 2 * h + j];
                let o = tr.gates[gb + 3 * h + j];
                let c = tr.cells[(t * b + bi) * h + j];
                let c_prev = prev_t.map_or(T::zero(), |p| tr.cells[(p * b + bi) * h + j]);
                let tc = c.tanh();
                let dh = grad_out[(bi * t_len + t) * h + j] + dh_next[bi * h + j];
                let dc = dc_next[bi * h + j] + dh * o * (T::one() - tc * tc);
                let d_o = dh * tc;
                let d_i = dc * g;
                let d_g = dc * i;
                let d_f = dc * c_prev;
                dc_next[bi * h + j] = dc * f;
                dgates[gb + j] = d_i * i * (T::one() - i);
                dgates[gb + h + j] = d_f * f * (T::one() - f);
                dgates[gb + 2 * h + j] = d_g * (T::one() - g * g);
                dgates[gb + 3 * h + j] = d_o * o * (T::one() - o);
            }
        }
        let dg = &dgates[t * b * g4..(t + 1) * b * g4];
        // dh_next = dG (B x 4H) * whh (4H x H)
        mm(b, h, g4, &mut dh_next, h, dg, g4, 1, whh, h, 1, false);
        if let Some(p) = prev_t {
            let hp = &tr.hidden[p * b * h..(p + 1) * b * h];
            // dwhh += dG^T (4H x B) * h_prev (B x H)
            mm(g4, h, b, &mut dwhh, h, dg, 1, g4, hp, h, 1, true);
        }
    }
    (batch_major(&dgates, b, t_len, g4), dwhh)
}

/// Recurrent part of one LSTM direction: (B, T, 4H) pre-activations and
/// (4H, H) recurrent weights to (B, T, H) hidden states.
#[derive(Debug, Clone, Copy)]
pub struct LstmRecurrence {
    pub reverse: bool,
}

fn dims(l1: &Layout, l2: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let (b, t, g4) = l1.shape().dims3()?;
    let (r, h) = l2.shape().dims2()?;
    if g4 != 4 * h || r != g4 {
        candle_core::bail!("lstm: gate width {g4} incompatible with recurrent weight ({r}, {h})");
    }
    Ok((b, t, h))
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("lstm: inputs must be contiguous"),
    }
}

impl CustomOp2 for LstmRecurrence {
    fn name(&self) -> &'static str {
        "lstm-recurrence"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, t, h) = dims(l1, l2)?;
        let shape = Shape::from((b, t, h));
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                let tr = run_forward(contiguous(x, l1)?, contiguous(w, l2)?, b, t, h, self.reverse);
                Ok((CpuStorage::F32(batch_major(&tr.hidden, b, t, h)), shape))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                let tr = run_forward(contiguous(x, l1)?, contiguous(w, l2)?, b, t, h, self.reverse);
                Ok((CpuStorage::F64(batch_major(&tr.hidden, b, t, h)), shape))
            }
            _ => candle_core::bail!("lstm: unsupported dtype combination"),
        }
    }

    fn bwd(
        &self,
        arg1: &Tensor,
        arg2: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, t, g4) = arg1.dims3()?;
        let h = g4 / 4;
        let dev = arg1.device();
        let gx = arg1.detach().contiguous()?.flatten_all()?;
        let w = arg2.detach().contiguous()?.flatten_all()?;
        let go = grad_res.detach().contiguous()?.flatten_all()?;
        macro_rules! go {
            ($ty:ty) => {{
                let (dgx, dw) = run_backward(
                    &gx.to_vec1::<$ty>()?,
                    &w.to_vec1::<$ty>()?,
                    &go.to_vec1::<$ty>()?,
                    b,
                    t,
                    h,
                    self.reverse,
                );
                (
                    Tensor::from_vec(dgx, (b, t, g4), dev)?,
                    Tensor::from_vec(dw, (g4, h), dev)?,
                )
            }};
        }
        let (dgx, dw) = match arg1.dtype() {
            candle_core::DType::F32 => go!(f32),
            candle_core::DType::F64 => go!(f64),
            dt => candle_core::bail!("lstm: unsupported dtype {dt:?}"),
        };
        Ok((Some(dgx), Some(dw)))
    }
}

struct Direction {
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
}

/// Single-layer bidirectional LSTM over (N, T, input) -> (N, T, 2H).
/// Parameter layout mirrors the usual framework convention, two biases per
/// direction included.
pub struct BiLstm {
    hidden: usize,
    dirs: [Direction; 2],
}

impl BiLstm {
    pub fn new(b: &mut Builder, input: usize, hidden: usize) -> Result<Self> {
        let init = Init::fan_in(hidden);
        let mut dir = |suffix: &str| -> Result<Direction> {
            let w_ih = b.param(
                &format!("weight_ih{suffix}"),
                &[4 * hidden, input],
                init,
                ParamKind::Standard,
            )?;
            let w_hh = b.param(
                &format!("weight_hh{suffix}"),
                &[4 * hidden, hidden],
                init,
                ParamKind::Standard,
            )?;
            let b_ih = b.param(&format!("bias_ih{suffix}"), &[4 * hidden], init, ParamKind::Standard)?;
            let b_hh = b.param(&format!("bias_hh{suffix}"), &[4 * hidden], init, ParamKind::Standard)?;
            Ok(Direction { w_ih, w_hh, b_ih, b_hh })
        };
        let fwd = dir("")?;
        let bwd = dir("_reverse")?;
        Ok(Self {
            hidden,
            dirs: [fwd, bwd],
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut outs = Vec::with_capacity(2);
        for (k, d) in self.dirs.iter().enumerate() {
            let bias = (&d.b_ih + &d.b_hh)?;
            let gx = linear(x, &d.w_ih, Some(&bias))?.contiguous()?;
            outs.push(gx.apply_op2(&d.w_hh, LstmRecurrence { reverse: k == 1 })?);
        }
        Ok(Tensor::cat(&outs, 2)?)
    }
}
