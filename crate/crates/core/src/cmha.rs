//! Cross multi-head attention: mixture frames query the reference encoding
//! and come back as mixture-aligned speaker features, plus the fusion step.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{FeatureLayout, FeatureMap};
use crate::nn::attention::{FrameAttention, TransformerStack};
use crate::nn::layers::Linear;
use crate::nn::Builder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionStyle {
    /// Transformer encoder blocks with cross-attention over (B, L, N) tokens.
    TimeTransformer,
    /// Frame attention over T-F grids with frequency folded into the features.
    TfGridAttention,
}

impl AttentionStyle {
    pub fn layout(self) -> FeatureLayout {
        match self {
            AttentionStyle::TimeTransformer => FeatureLayout::Time,
            AttentionStyle::TfGridAttention => FeatureLayout::Tf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CmhaConfig {
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width for the time style; approximate per-head
    /// query/key size (before division by the bin count) for the TF style.
    pub ffn_dim: usize,
    pub model_dim: usize,
    pub style: AttentionStyle,
}

impl CmhaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "cross-attention width {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::config("cross-attention ffn_dim must be positive"));
        }
        Ok(())
    }
}

enum Body {
    Time(TransformerStack),
    Tf(Vec<FrameAttention>),
}

pub struct Cmha {
    cfg: CmhaConfig,
    body: Body,
}

impl Cmha {
    /// `freqs` is required for the TF style.
    pub fn new(b: &mut Builder, cfg: CmhaConfig, freqs: Option<usize>) -> Result<Self> {
        cfg.validate()?;
        let body = match cfg.style {
            AttentionStyle::TimeTransformer => Body::Time(TransformerStack::new(
                b,
                cfg.layers,
                cfg.model_dim,
                cfg.heads,
                cfg.ffn_dim,
                true,
                true,
            )?),
            AttentionStyle::TfGridAttention => {
                let f = freqs.ok_or_else(|| Error::config("frame attention needs the bin count"))?;
                Body::Tf(
                    (0..cfg.layers)
                        .map(|i| {
                            FrameAttention::new(
                                &mut b.pp(format!("layers.{i}")),
                                cfg.model_dim,
                                f,
                                cfg.heads,
                                cfg.ffn_dim,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        Ok(Self { cfg, body })
    }

    pub fn config(&self) -> &CmhaConfig {
        &self.cfg
    }

    /// Speaker features with exactly the mixture's shape. The reference may
    /// have any number of frames. Attention maps go to `probe` when given.
    pub fn forward(
        &self,
        e_m: &FeatureMap,
        e_r: &FeatureMap,
        probe: Option<&mut Vec<Tensor>>,
    ) -> Result<FeatureMap> {
        e_m.expect_layout(self.cfg.style.layout())?;
        e_m.same_layout(e_r)?;
        let (dm, dr) = (e_m.dims(), e_r.dims());
        if dm[1] != self.cfg.model_dim || dr[1] != self.cfg.model_dim {
            return Err(Error::shape(format!(
                "cross-attention width is {}, streams have {} and {}",
                self.cfg.model_dim, dm[1], dr[1]
            )));
        }
        if dm[0] != dr[0] || dm[2..dm.len() - 1] != dr[2..dr.len() - 1] {
            return Err(Error::shape(format!(
                "mixture {dm:?} and reference {dr:?} differ outside the frame axis"
            )));
        }
        match &self.body {
            Body::Time(stack) => {
                let q = e_m.data().transpose(1, 2)?;
                let kv = e_r.data().transpose(1, 2)?;
                let y = stack.forward(&q, Some(&kv), probe)?;
                e_m.with_data(y.transpose(1, 2)?.contiguous()?)
            }
            Body::Tf(layers) => {
                let mut probe = probe;
                let mut x = e_m.data().clone();
                for layer in layers {
                    let (y, p) = layer.forward(&x, e_r.data())?;
                    if let Some(v) = probe.as_deref_mut() {
                        v.push(p.detach());
                    }
                    x = (x + y)?;
                }
                e_m.with_data(x)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Film,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub dim: usize,
}

impl FusionConfig {
    pub fn output_dim(&self) -> usize {
        match self.method {
            FusionMethod::Film => self.dim,
            FusionMethod::Concat => 2 * self.dim,
        }
    }
}

pub enum Fusion {
    /// Scale and shift predicted from the speaker features by two affine maps.
    Film { gamma: Linear, beta: Linear },
    Concat,
}

impl Fusion {
    pub fn new(b: &mut Builder, cfg: FusionConfig) -> Result<Self> {
        Ok(match cfg.method {
            FusionMethod::Film => Fusion::Film {
                gamma: Linear::new(&mut b.pp("gamma"), cfg.dim, cfg.dim, true)?,
                beta: Linear::new(&mut b.pp("beta"), cfg.dim, cfg.dim, true)?,
            },
            FusionMethod::Concat => Fusion::Concat,
        })
    }

    pub fn forward(&self, e_m: &FeatureMap, e_spk: &FeatureMap) -> Result<FeatureMap> {
        e_m.same_layout(e_spk)?;
        if e_m.dims() != e_spk.dims() {
            return Err(Error::shape(format!(
                "fusion inputs differ: {:?} vs {:?}",
                e_m.dims(),
                e_spk.dims()
            )));
        }
        let out = match self {
            Fusion::Film { gamma, beta } => {
                let g = gamma.forward_channels(e_spk.data())?;
                let bt = beta.forward_channels(e_spk.data())?;
                ((g * e_m.data())? + bt)?
            }
            Fusion::Concat => Tensor::cat(&[e_m.data(), e_spk.data()], 1)?,
        };
        e_m.with_data(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use rand::{Rng, SeedableRng};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn fm(t: Tensor) -> FeatureMap {
        let layout = if t.rank() == 3 { FeatureLayout::Time } else { FeatureLayout::Tf };
        FeatureMap::new(t, layout, 100.0).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    fn time_cfg() -> CmhaConfig {
        CmhaConfig {
            layers: 2,
            heads: 2,
            ffn_dim: 16,
            model_dim: 8,
            style: AttentionStyle::TimeTransformer,
        }
    }

    #[test]
    fn output_follows_mixture_length() {
        let mut store = ParamStore::new(1, DType::F64);
        let cmha = Cmha::new(&mut Builder::new(&mut store, false), time_cfg(), None).unwrap();
        let e_m = fm(randn(&[1, 8, 100], 1));
        for l2 in [1, 37, 200] {
            let out = cmha.forward(&e_m, &fm(randn(&[1, 8, l2], l2 as u64)), None).unwrap();
            assert_eq!(out.dims(), &[1, 8, 100]);
        }
    }

    #[test]
    fn tf_style_output_follows_mixture_length() {
        let cfg = CmhaConfig {
            layers: 1,
            heads: 2,
            ffn_dim: 10,
            model_dim: 4,
            style: AttentionStyle::TfGridAttention,
        };
        let mut store = ParamStore::new(1, DType::F64);
        let cmha = Cmha::new(&mut Builder::new(&mut store, false), cfg, Some(5)).unwrap();
        let e_m = fm(randn(&[1, 4, 5, 9], 1));
        let mut probe = Vec::new();
        let out = cmha
            .forward(&e_m, &fm(randn(&[1, 4, 5, 3], 2)), Some(&mut probe))
            .unwrap();
        assert_eq!(out.dims(), &[1, 4, 5, 9]);
        assert_eq!(probe[0].dims(), &[2, 9, 3]);
    }

    #[test]
    fn reference_frame_order_does_not_matter() {
        let mut store = ParamStore::new(2, DType::F64);
        let cmha = Cmha::new(&mut Builder::new(&mut store, false), time_cfg(), None).unwrap();
        let e_m = fm(randn(&[1, 8, 12], 3));
        let r = randn(&[1, 8, 8], 4);
        let perm = Tensor::new(&[3u32, 7, 0, 5, 1, 6, 2, 4], &Device::Cpu).unwrap();
        let rp = r.index_select(&perm, 2).unwrap();
        let a = flat(cmha.forward(&e_m, &fm(r), None).unwrap().data());
        let b = flat(cmha.forward(&e_m, &fm(rp), None).unwrap().data());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_reference_frame_gives_the_same_context_everywhere() {
        let cfg = CmhaConfig {
            layers: 1,
            ..time_cfg()
        };
        let mut store = ParamStore::new(5, DType::F64);
        let cmha = Cmha::new(&mut Builder::new(&mut store, false), cfg, None).unwrap();
        store.zero_prefix("layers.0.ffn").unwrap();
        let e_m = randn(&[1, 8, 6], 6);
        let mut probe = Vec::new();
        cmha.forward(&fm(e_m.clone()), &fm(randn(&[1, 8, 1], 7)), Some(&mut probe))
            .unwrap();
        assert!(flat(&probe[0]).iter().all(|&p| (p - 1.0).abs() < 1e-15));
        // Without the final norm, each query frame receives the identical
        // attended vector: layer(x) - (x + pe) is constant over frames.
        let mut b = Builder::new(&mut store, false);
        let layer = crate::nn::attention::TransformerLayer::new(&mut b.pp("layers.0"), 8, 2, 16, true)
            .unwrap();
        let x = e_m.transpose(1, 2).unwrap().contiguous().unwrap();
        let (y, _) = layer.forward(&x, Some(&randn(&[1, 1, 8], 7))).unwrap();
        let d = (y - &x).unwrap().get(0).unwrap().to_vec2::<f64>().unwrap();
        for row in &d[1..] {
            for (a, b) in row.iter().zip(&d[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut store = ParamStore::new(1, DType::F64);
        let cmha = Cmha::new(&mut Builder::new(&mut store, false), time_cfg(), None).unwrap();
        assert!(cmha
            .forward(&fm(randn(&[1, 8, 5], 1)), &fm(randn(&[1, 6, 5], 2)), None)
            .is_err());
        let bad = CmhaConfig {
            heads: 3,
            ..time_cfg()
        };
        assert!(Cmha::new(&mut Builder::new(&mut store, false), bad, None).is_err());
    }

    #[test]
    fn film_identity_and_zero_scale() {
        let mut store = ParamStore::new(1, DType::F64);
        let cfg = FusionConfig {
            method: FusionMethod::Film,
            dim: 4,
        };
        let fusion = Fusion::new(&mut Builder::new(&mut store, false), cfg).unwrap();
        store.zero_prefix("").unwrap();
        store
            .assign("gamma.bias", &Tensor::ones(4, DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let e_m = fm(randn(&[2, 4, 7], 1));
        let e_s = fm(randn(&[2, 4, 7], 2));
        let out = fusion.forward(&e_m, &e_s).unwrap();
        assert_eq!(flat(out.data()), flat(e_m.data()));

        let mut store = ParamStore::new(3, DType::F64);
        let fusion = Fusion::new(&mut Builder::new(&mut store, false), cfg).unwrap();
        store.zero_prefix("gamma").unwrap();
        let out = fusion.forward(&e_m, &e_s).unwrap();
        let w = store.get("beta.weight").unwrap().as_tensor().clone();
        let bias = store.get("beta.bias").unwrap().as_tensor().clone();
        let want = crate::nn::ops::pointwise(e_s.data(), &w, Some(&bias)).unwrap();
        assert_eq!(flat(out.data()), flat(&want));
    }

    #[test]
    fn concat_doubles_channels() {
        let mut store = ParamStore::new(1, DType::F32);
        let cfg = FusionConfig {
            method: FusionMethod::Concat,
            dim: 128,
        };
        let fusion = Fusion::new(&mut Builder::new(&mut store, false), cfg).unwrap();
        let z = Tensor::zeros((1, 128, 65, 3), DType::F32, &Device::Cpu).unwrap();
        let out = fusion.forward(&fm(z.clone()), &fm(z)).unwrap();
        assert_eq!(out.dims(), &[1, 256, 65, 3]);
        assert_eq!(cfg.output_dim(), 256);
        assert_eq!(store.count(), 0);
    }
}
