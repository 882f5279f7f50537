//! Finite-difference gradient checking over a parameter store.

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error between analytic and numeric gradients.
    pub rel_error: f64,
    pub coordinates: usize,
    /// Parameter holding the largest error.
    pub worst: String,
}

fn bump(var: &Var, idx: usize, delta: f64) -> Result<()> {
    let shape = var.dims().to_vec();
    let mut v = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    v[idx] += delta;
    var.set(&Tensor::from_vec(v, shape, var.device())?)?;
    Ok(())
}

/// Compares the backward pass of `loss` with central differences on up to
/// `per_param` random coordinates of every parameter. The network producing
/// `loss` must read its weights from `store` through a tracked builder, and
/// the store must be 64-bit.
///
/// The relative error is `|a - n| / max(|a| + |n|, floor)` on the vectors of
/// sampled coordinates, per parameter. The floor of 1e-3 keeps parameters
/// whose true gradient is zero (a key bias under softmax, say) from turning
/// central-difference round-off, about 1e-9 here, into a large ratio.
pub fn check_gradients<F>(store: &ParamStore, loss: F, per_param: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn() -> Result<Tensor>,
{
    if store.dtype() != DType::F64 {
        return Err(Error::config("gradient checks need a 64-bit parameter store"));
    }
    let eps = 1e-6;
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut coordinates = 0;
    for (name, var) in store.iter() {
        let n = var.elem_count();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        let picks = sample(&mut rng, n, per_param.min(n));
        let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
        for idx in picks.iter() {
            bump(var, idx, eps)?;
            let up = loss()?.to_scalar::<f64>()?;
            bump(var, idx, -2.0 * eps)?;
            let down = loss()?.to_scalar::<f64>()?;
            bump(var, idx, eps)?;
            let numeric = (up - down) / (2.0 * eps);
            diff += (analytic[idx] - numeric).powi(2);
            norm_a += analytic[idx].powi(2);
            norm_n += numeric.powi(2);
            coordinates += 1;
        }
        let rel = diff.sqrt() / (norm_a.sqrt() + norm_n.sqrt()).max(1e-3);
        if rel > worst {
            worst = rel;
            worst_name = name.to_string();
        }
    }
    Ok(GradCheck {
        rel_error: worst,
        coordinates,
        worst: worst_name,
    })
}
