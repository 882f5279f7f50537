//! Named parameter storage with deterministic, order-independent init.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How a parameter is treated by profiler-style counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Standard,
    /// Query/key/value and output projections of a fused multi-head attention.
    AttentionProjection,
    /// Affine terms of hand-rolled normalization layers (not a stock layer type).
    CustomNorm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Const(f64),
}

impl Init {
    /// Fan-in scaled uniform, the default for dense and convolution layers.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    kind: ParamKind,
}

/// All learnable tensors of a model, keyed by dotted path.
#[derive(Debug, Clone)]
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    device: Device,
    entries: BTreeMap<String, Entry>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            device: Device::Cpu,
            entries: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn init_tensor(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(self.seed, name));
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Returns the named parameter, creating it on first request.
    pub fn get_or_init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        kind: ParamKind,
    ) -> Result<Var> {
        if let Some(e) = self.entries.get(name) {
            if e.var.dims() != shape {
                return Err(Error::shape(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    e.var.dims()
                )));
            }
            return Ok(e.var.clone());
        }
        let var = Var::from_tensor(&self.init_tensor(name, shape, init)?)?;
        self.entries.insert(
            name.to_string(),
            Entry {
                var: var.clone(),
                kind,
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.var))
    }

    pub fn count(&self) -> usize {
        self.entries.values().map(|e| e.var.elem_count()).sum()
    }

    pub fn count_kind(&self, kind: ParamKind) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == kind)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Overwrites a parameter in place. Shapes must agree.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::shape(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!(
                "parameter {name} has shape {:?}, value has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, e) in &self.entries {
            if name.starts_with(prefix) {
                e.var.set(&e.var.zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Deep copy with independent storage.
    pub fn duplicate(&self) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (k, e) in &self.entries {
            entries.insert(
                k.clone(),
                Entry {
                    var: Var::from_tensor(&e.var.as_tensor().copy()?)?,
                    kind: e.kind,
                },
            );
        }
        Ok(Self {
            seed: self.seed,
            dtype: self.dtype,
            device: self.device.clone(),
            entries,
        })
    }
}

/// Scoped view used while constructing modules.
///
/// With `tracked` set, the returned tensors are the variables themselves and
/// every forward pass records a graph; otherwise they are detached views of
/// the same storage.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    tracked: bool,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, tracked: bool) -> Self {
        Self {
            store,
            prefix: String::new(),
            tracked,
        }
    }

    pub fn pp(&mut self, name: impl std::fmt::Display) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            prefix,
            tracked: self.tracked,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device().clone()
    }

    pub fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        kind: ParamKind,
    ) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let var = self.store.get_or_init(&full, shape, init, kind)?;
        Ok(if self.tracked {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        })
    }
}
