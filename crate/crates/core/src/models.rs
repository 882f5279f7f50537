//! End-to-end extraction models, their configuration and checkpoints.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView, View};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::AudioSignal;
use crate::cmha::{AttentionStyle, Cmha, CmhaConfig, Fusion, FusionConfig, FusionMethod};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::feature::{FeatureLayout, FeatureMap};
use crate::frontends::{signal_tensor, tensor_signal, TfFrontend, TfFrontendConfig, TimeFrontend, TimeFrontendConfig};
use crate::gridnet::{GridConfig, GridSeparator};
use crate::nn::layers::Linear;
use crate::nn::{Builder, ParamKind, ParamStore};
use crate::sepformer::{SepformerConfig, SepformerSeparator};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Waveform RMS floor used when normalizing spectral-model inputs.
const RMS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    UsefSepformer,
    UsefTfgridnet,
    /// Mean-pooled reference embedding in place of cross-attention.
    EmbBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrontendConfig {
    Time(TimeFrontendConfig),
    Tf(TfFrontendConfig),
}

impl FrontendConfig {
    pub fn channels(&self) -> usize {
        match self {
            FrontendConfig::Time(c) => c.channels,
            FrontendConfig::Tf(c) => c.channels,
        }
    }

    pub fn layout(&self) -> FeatureLayout {
        match self {
            FrontendConfig::Time(_) => FeatureLayout::Time,
            FrontendConfig::Tf(_) => FeatureLayout::Tf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeparatorConfig {
    Sepformer(SepformerConfig),
    Grid(GridConfig),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub sample_rate: u32,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub frontend: FrontendConfig,
    /// Absent for the embedding baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmha: Option<CmhaConfig>,
    pub fusion: FusionConfig,
    pub separator: SeparatorConfig,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(format!("bad model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot encode model config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config encodes as JSON");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        let c = self.frontend.channels();
        match (&self.frontend, &self.separator) {
            (FrontendConfig::Time(f), SeparatorConfig::Sepformer(s)) => {
                f.validate()?;
                s.validate()?;
                if s.model_dim != c {
                    return Err(Error::config(format!(
                        "mask width {} must equal encoder width {c}",
                        s.model_dim
                    )));
                }
            }
            (FrontendConfig::Tf(f), SeparatorConfig::Grid(g)) => {
                f.validate()?;
                g.validate()?;
            }
            (FrontendConfig::Time(_), SeparatorConfig::Grid(_)) => {
                return Err(Error::config("a grid separator needs the tf frontend"));
            }
            (FrontendConfig::Tf(_), SeparatorConfig::Sepformer(_)) => {
                return Err(Error::config("the dual-path separator needs the time frontend"));
            }
        }
        let want_style = match self.frontend {
            FrontendConfig::Time(_) => AttentionStyle::TimeTransformer,
            FrontendConfig::Tf(_) => AttentionStyle::TfGridAttention,
        };
        match (self.family, &self.cmha) {
            (ModelFamily::EmbBaseline, Some(_)) => {
                return Err(Error::config("the embedding baseline has no cross-attention block"));
            }
            (ModelFamily::EmbBaseline, None) => {}
            (_, None) => return Err(Error::config("cross-attention settings are missing")),
            (family, Some(a)) => {
                a.validate()?;
                let want_family = match self.frontend {
                    FrontendConfig::Time(_) => ModelFamily::UsefSepformer,
                    FrontendConfig::Tf(_) => ModelFamily::UsefTfgridnet,
                };
                if family != want_family {
                    return Err(Error::config(format!("{family:?} does not fit the chosen frontend")));
                }
                if a.style != want_style {
                    return Err(Error::config("attention style does not fit the frontend"));
                }
                if a.model_dim != c {
                    return Err(Error::config(format!(
                        "cross-attention width {} must equal encoder width {c}",
                        a.model_dim
                    )));
                }
            }
        }
        if self.fusion.dim != c {
            return Err(Error::config(format!(
                "fusion width {} must equal encoder width {c}",
                self.fusion.dim
            )));
        }
        Ok(())
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_fusion(mut self, method: FusionMethod) -> Self {
        self.fusion.method = method;
        self
    }

    /// Published dual-path configuration with the given cross-attention
    /// (layers, heads, ffn) and separator (layers, heads, ffn) settings.
    pub fn sepformer(cmha: (usize, usize, usize), sep: (usize, usize, usize)) -> Self {
        let n = 256;
        Self {
            family: ModelFamily::UsefSepformer,
            sample_rate: 8000,
            seed: 0,
            precision: Precision::F32,
            frontend: FrontendConfig::Time(TimeFrontendConfig {
                kernel: 16,
                stride: 8,
                channels: n,
            }),
            cmha: Some(CmhaConfig {
                layers: cmha.0,
                heads: cmha.1,
                ffn_dim: cmha.2,
                model_dim: n,
                style: AttentionStyle::TimeTransformer,
            }),
            fusion: FusionConfig {
                method: FusionMethod::Film,
                dim: n,
            },
            separator: SeparatorConfig::Sepformer(SepformerConfig {
                chunk_size: 250,
                layers: sep.0,
                heads: sep.1,
                ffn_dim: sep.2,
                repeats: 2,
                model_dim: n,
            }),
        }
    }

    /// Published grid configuration with cross-attention (heads, ffn), unfold
    /// kernel and encoder width.
    pub fn tfgridnet(cmha_heads: usize, cmha_ffn: usize, kernel: usize, channels: usize) -> Self {
        Self {
            family: ModelFamily::UsefTfgridnet,
            sample_rate: 8000,
            seed: 0,
            precision: Precision::F32,
            frontend: FrontendConfig::Tf(TfFrontendConfig {
                stft: StftConfig::narrowband(),
                conv_kernel: [3, 3],
                channels,
            }),
            cmha: Some(CmhaConfig {
                layers: 1,
                heads: cmha_heads,
                ffn_dim: cmha_ffn,
                model_dim: channels,
                style: AttentionStyle::TfGridAttention,
            }),
            fusion: FusionConfig {
                method: FusionMethod::Concat,
                dim: channels,
            },
            separator: SeparatorConfig::Grid(GridConfig {
                blocks: 6,
                kernel,
                hop: 1,
                hidden: 256,
                heads: 4,
                qk_budget: 512,
            }),
        }
    }

    /// Best published dual-path model.
    pub fn usef_sepformer_best() -> Self {
        Self::sepformer((4, 8, 1024), (8, 8, 1024))
    }

    /// Best published grid model.
    pub fn usef_tfgridnet_best() -> Self {
        Self::tfgridnet(4, 512, 1, 128)
    }

    /// Reduced dual-path model of width `n` for desk-scale runs: one layer per
    /// transformer, two dual-path repeats.
    pub fn small_sepformer(n: usize, chunk_size: usize) -> Self {
        let mut c = Self::sepformer((1, 4, 2 * n), (1, 4, 2 * n));
        c.frontend = FrontendConfig::Time(TimeFrontendConfig {
            kernel: 16,
            stride: 8,
            channels: n,
        });
        c.cmha.as_mut().expect("preset has cross attention").model_dim = n;
        c.fusion.dim = n;
        if let SeparatorConfig::Sepformer(s) = &mut c.separator {
            s.model_dim = n;
            s.chunk_size = chunk_size;
        }
        c
    }

    /// Reduced grid model with `channels` encoder channels, two blocks and
    /// `hidden` LSTM units.
    pub fn small_tfgridnet(channels: usize, hidden: usize) -> Self {
        let mut c = Self::tfgridnet(4, 2 * channels, 1, channels);
        if let SeparatorConfig::Grid(g) = &mut c.separator {
            g.blocks = 2;
            g.hidden = hidden;
            g.qk_budget = 256;
        }
        c
    }

    /// Dual-path backbone with the pooled-embedding speaker branch.
    pub fn emb_baseline_sepformer() -> Self {
        Self {
            family: ModelFamily::EmbBaseline,
            cmha: None,
            ..Self::usef_sepformer_best()
        }
    }
}

enum Frontend {
    Time(TimeFrontend),
    Tf(TfFrontend),
}

impl Frontend {
    fn encode(&self, x: &Tensor) -> Result<FeatureMap> {
        match self {
            Frontend::Time(f) => f.encode(x),
            Frontend::Tf(f) => f.encode(x),
        }
    }

    fn decode(&self, fm: &FeatureMap, length: usize) -> Result<Tensor> {
        match self {
            Frontend::Time(f) => f.decode(fm, length),
            Frontend::Tf(f) => f.decode(fm, length),
        }
    }

    fn min_samples(&self) -> usize {
        match self {
            Frontend::Time(f) => f.config().kernel,
            Frontend::Tf(f) => {
                let s = &f.config().stft;
                if s.center {
                    s.fft_size / 2 + 1
                } else {
                    s.fft_size
                }
            }
        }
    }
}

enum SpeakerBranch {
    Cross(Cmha),
    /// Temporal mean of the reference encoding through one affine map.
    Pooled(Linear),
}

enum Separator {
    Sepformer(SepformerSeparator),
    Grid(GridSeparator),
}

/// Intermediate tensors of one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    pub mixture_encoding: Option<Tensor>,
    pub speaker_features: Option<Tensor>,
    pub fused: Option<Tensor>,
    /// Mask produced by a masking separator.
    pub mask: Option<Tensor>,
    /// Encoding handed to the decoder.
    pub decoder_input: Option<Tensor>,
    pub cmha_attention: Vec<Tensor>,
    pub separator_attention: Vec<Tensor>,
}

/// Module graph reading its weights from a [`ParamStore`].
pub struct Network {
    config: ModelConfig,
    frontend: Frontend,
    speaker: SpeakerBranch,
    fusion: Fusion,
    separator: Separator,
}

impl Network {
    /// With `tracked` set, forward passes record gradients to the store's
    /// variables. Both kinds share the store's storage.
    pub fn new(config: &ModelConfig, store: &mut ParamStore, tracked: bool) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(store, tracked);
        let c = config.frontend.channels();
        let fused = config.fusion.output_dim();
        let (frontend, freqs) = match config.frontend {
            FrontendConfig::Time(f) => (Frontend::Time(TimeFrontend::new(&mut b.pp("frontend"), f, config.sample_rate)?), None),
            FrontendConfig::Tf(f) => {
                let decoder_in = match config.separator {
                    SeparatorConfig::Grid(_) => fused,
                    SeparatorConfig::Sepformer(_) => c,
                };
                (
                    Frontend::Tf(TfFrontend::new(&mut b.pp("frontend"), f, config.sample_rate, decoder_in)?),
                    Some(f.n_freqs()),
                )
            }
        };
        let speaker = match config.cmha {
            Some(a) => SpeakerBranch::Cross(Cmha::new(&mut b.pp("cmha"), a, freqs)?),
            None => SpeakerBranch::Pooled(Linear::new(&mut b.pp("speaker"), c, c, true)?),
        };
        let fusion = Fusion::new(&mut b.pp("fusion"), config.fusion)?;
        let separator = match config.separator {
            SeparatorConfig::Sepformer(s) => Separator::Sepformer(SepformerSeparator::new(&mut b.pp("separator"), s, fused)?),
            SeparatorConfig::Grid(g) => Separator::Grid(GridSeparator::new(
                &mut b.pp("separator"),
                g,
                fused,
                freqs.expect("tf frontend"),
            )?),
        };
        Ok(Self {
            config: config.clone(),
            frontend,
            speaker,
            fusion,
            separator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn min_samples(&self) -> usize {
        self.frontend.min_samples()
    }

    /// (B, T1) mixtures and (B, T2) references to (B, T1) estimates.
    pub fn forward(&self, mixture: &Tensor, reference: &Tensor, mut trace: Option<&mut Trace>) -> Result<Tensor> {
        let (bm, t1) = mixture.dims2()?;
        let (br, t2) = reference.dims2()?;
        if bm != br {
            return Err(Error::shape(format!("batch sizes differ: {bm} vs {br}")));
        }
        let need = self.min_samples();
        for t in [t1, t2] {
            if t < need {
                return Err(Error::SignalTooShort { needed: need, got: t });
            }
        }
        let spectral = matches!(self.separator, Separator::Grid(_));
        let (mix, reference, scale) = if spectral {
            let sm = rms(mixture)?;
            let sr = rms(reference)?;
            (mixture.broadcast_div(&sm)?, reference.broadcast_div(&sr)?, Some(sm))
        } else {
            (mixture.clone(), reference.clone(), None)
        };
        let e_m = self.frontend.encode(&mix)?;
        let e_r = self.frontend.encode(&reference)?;
        let e_spk = match &self.speaker {
            SpeakerBranch::Cross(cmha) => {
                let probe = trace.as_deref_mut().map(|t| &mut t.cmha_attention);
                cmha.forward(&e_m, &e_r, probe)?
            }
            SpeakerBranch::Pooled(lin) => {
                let last = e_r.data().rank() - 1;
                let pooled = e_r.data().mean_keepdim(last)?;
                e_m.with_data(lin.forward_channels(&pooled)?.broadcast_as(e_m.dims())?.contiguous()?)?
            }
        };
        let e_f = self.fusion.forward(&e_m, &e_spk)?;
        let decoder_input = match &self.separator {
            Separator::Sepformer(sep) => {
                let mask = sep.forward(&e_f)?;
                let masked = e_m.with_data((e_m.data() * mask.data())?)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.mask = Some(mask.data().detach());
                }
                masked
            }
            Separator::Grid(sep) => {
                let probe = trace.as_deref_mut().map(|t| &mut t.separator_attention);
                sep.forward(&e_f, probe)?
            }
        };
        if let Some(t) = trace {
            t.mixture_encoding = Some(e_m.data().detach());
            t.speaker_features = Some(e_spk.data().detach());
            t.fused = Some(e_f.data().detach());
            t.decoder_input = Some(decoder_input.data().detach());
        }
        let y = self.frontend.decode(&decoder_input, t1)?;
        Ok(match scale {
            Some(s) => y.broadcast_mul(&s)?,
            None => y,
        })
    }
}

/// Per-row RMS of (B, T), floored, shaped (B, 1).
fn rms(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.mean_keepdim(1)?.sqrt()?.maximum(RMS_FLOOR)?)
}

/// Weights plus the inference graph built on them.
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    network: Network,
}

impl Model {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new(config.seed, config.precision.dtype());
        let network = Network::new(config, &mut store, false)?;
        Ok(Self {
            config: config.clone(),
            store,
            network,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// A graph over the same weights that records gradients.
    pub fn tracked_network(&mut self) -> Result<Network> {
        Network::new(&self.config, &mut self.store, true)
    }

    /// Exact number of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.store.count()
    }

    /// Count as reported by layer-hook profilers: fused attention projections
    /// and hand-written normalization affines are not seen by such tools.
    pub fn count_parameters_profiled(&self) -> usize {
        self.store.count()
            - self.store.count_kind(ParamKind::AttentionProjection)
            - self.store.count_kind(ParamKind::CustomNorm)
    }

    pub fn extract(&self, mixture: &AudioSignal, reference: &AudioSignal) -> Result<AudioSignal> {
        self.extract_traced(mixture, reference, None)
    }

    pub fn extract_traced(
        &self,
        mixture: &AudioSignal,
        reference: &AudioSignal,
        trace: Option<&mut Trace>,
    ) -> Result<AudioSignal> {
        // Signals are never empty by construction.
        for s in [mixture, reference] {
            if s.sample_rate() != self.config.sample_rate {
                return Err(Error::SampleRateMismatch(self.config.sample_rate, s.sample_rate()));
            }
        }
        let dtype = self.store.dtype();
        let y = self.network.forward(
            &signal_tensor(mixture, dtype)?,
            &signal_tensor(reference, dtype)?,
            trace,
        )?;
        let out = tensor_signal(&y, self.config.sample_rate)?;
        if out.samples().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("estimate"));
        }
        Ok(out)
    }

    pub fn checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let params = self
            .store
            .iter()
            .map(|(k, v)| Ok((k.to_string(), v.as_tensor().copy()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Checkpoint {
            config: self.config.clone(),
            step,
            params,
            optimizer: BTreeMap::new(),
            state: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, step: u64) -> Result<()> {
        self.checkpoint(step)?.write(path)
    }

    /// Loads weights, insisting that the checkpoint was written for `expected`
    /// when given.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        if let Some(cfg) = expected {
            if cfg.digest() != ckpt.config.digest() {
                return Err(Error::DigestMismatch {
                    expected: cfg.digest(),
                    found: ckpt.config.digest(),
                });
            }
        }
        let model = Self::build(&ckpt.config)?;
        model.load_params(&ckpt.params)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?, expected)
    }

    /// Overwrites every weight. Names and shapes must match exactly.
    pub fn load_params(&self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        if params.len() != self.store.len() {
            return Err(Error::shape(format!(
                "checkpoint holds {} arrays, model has {}",
                params.len(),
                self.store.len()
            )));
        }
        for (name, value) in params {
            self.store.assign(name, value)?;
        }
        Ok(())
    }
}

/// Named arrays, the config they belong to, and optional training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub params: BTreeMap<String, Tensor>,
    /// Optimizer moments and similar arrays.
    pub optimizer: BTreeMap<String, Tensor>,
    /// Free-form JSON state owned by the caller.
    pub state: Option<String>,
}

struct Blob {
    dtype: StDtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Blob {
    fn dtype(&self) -> StDtype {
        self.dtype
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_blob(t: &Tensor) -> Result<Blob> {
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F32 => (StDtype::F32, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (StDtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        dt => return Err(Error::shape(format!("cannot store {dt:?} arrays"))),
    };
    Ok(Blob {
        dtype,
        shape: t.dims().to_vec(),
        bytes,
    })
}

fn from_view(view: &TensorView<'_>) -> std::result::Result<Tensor, String> {
    let data = view.data();
    let shape = view.shape().to_vec();
    let t = match view.dtype() {
        StDtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)
        }
        StDtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::from_vec(v, shape, &Device::Cpu)
        }
        dt => return Err(format!("unsupported array type {dt:?}")),
    };
    t.map_err(|e| e.to_string())
}

const OPTIM_PREFIX: &str = "__optim__.";

impl Checkpoint {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut blobs = Vec::with_capacity(self.params.len() + self.optimizer.len());
        for (k, t) in &self.params {
            blobs.push((k.clone(), to_blob(t)?));
        }
        for (k, t) in &self.optimizer {
            blobs.push((format!("{OPTIM_PREFIX}{k}"), to_blob(t)?));
        }
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("config_digest".to_string(), self.config.digest());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("step".to_string(), self.step.to_string());
        if let Some(s) = &self.state {
            meta.insert("state".to_string(), s.clone());
        }
        let bytes = safetensors::serialize(blobs.iter().map(|(k, b)| (k.as_str(), b)), Some(meta))
            .map_err(|e| Error::CorruptCheckpoint {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        // Write then rename so a crash never leaves a half-written file in place.
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| corrupt("missing header metadata".into()))?;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| corrupt(format!("missing {k}")));
        let version: u32 = field("format_version")?.parse().map_err(|_| corrupt("bad format version".into()))?;
        if version != CHECKPOINT_FORMAT {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let config: ModelConfig = serde_json::from_str(&field("config")?).map_err(|e| corrupt(e.to_string()))?;
        let digest = field("config_digest")?;
        if digest != config.digest() {
            return Err(Error::DigestMismatch {
                expected: digest,
                found: config.digest(),
            });
        }
        let step = field("step")?.parse().map_err(|_| corrupt("bad step".into()))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let mut params = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (name, view) in st.tensors() {
            let t = from_view(&view).map_err(&corrupt)?;
            match name.strip_prefix(OPTIM_PREFIX) {
                Some(rest) => optimizer.insert(rest.to_string(), t),
                None => params.insert(name, t),
            };
        }
        Ok(Self {
            config,
            step,
            params,
            optimizer,
            state: meta.get("state").cloned(),
        })
    }
}
