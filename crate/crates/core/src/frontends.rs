//! Encoder/decoder pairs. One instance serves both the mixture and the
//! reference stream, so the two paths always share weights.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::audio::AudioSignal;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::feature::{FeatureLayout, FeatureMap};
use crate::nn::ops;
use crate::nn::{Builder, Init, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeFrontendConfig {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl TimeFrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.channels == 0 {
            return Err(Error::config("time frontend sizes must be positive"));
        }
        if self.stride > self.kernel {
            return Err(Error::config("time frontend stride exceeds kernel"));
        }
        Ok(())
    }

    pub fn frames_for(&self, samples: usize) -> Result<usize> {
        if samples < self.kernel {
            return Err(Error::SignalTooShort {
                needed: self.kernel,
                got: samples,
            });
        }
        Ok((samples - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TfFrontendConfig {
    pub stft: StftConfig,
    pub conv_kernel: [usize; 2],
    pub channels: usize,
}

impl TfFrontendConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.conv_kernel != [3, 3] {
            return Err(Error::config(format!(
                "only 3x3 channel-lift kernels are supported, got {:?}",
                self.conv_kernel
            )));
        }
        if self.channels == 0 {
            return Err(Error::config("tf frontend needs at least one channel"));
        }
        Ok(())
    }

    pub fn n_freqs(&self) -> usize {
        self.stft.n_bins()
    }
}

/// Converts a signal into a (1, T) tensor of the given dtype.
pub fn signal_tensor(signal: &AudioSignal, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(signal.samples(), (1, signal.len()), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Converts the first row of a (B, T) tensor back to a signal.
pub fn tensor_signal(x: &Tensor, sample_rate: u32) -> Result<AudioSignal> {
    let row = x.get(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    AudioSignal::new(row, sample_rate)
}

/// Zero-pads or trims the trailing end of (B, T) to `length` samples.
pub(crate) fn fit_length(x: &Tensor, length: usize) -> Result<Tensor> {
    let t = x.dim(1)?;
    Ok(if t >= length {
        x.narrow(1, 0, length)?
    } else {
        x.pad_with_zeros(1, 0, length - t)?
    })
}

/// Learned 1-D filterbank with rectified output and its transposed decoder.
pub struct TimeFrontend {
    cfg: TimeFrontendConfig,
    sample_rate: u32,
    enc_w: Tensor,
    enc_b: Tensor,
    dec_w: Tensor,
}

impl TimeFrontend {
    pub fn new(b: &mut Builder, cfg: TimeFrontendConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let (n, k) = (cfg.channels, cfg.kernel);
        let init = Init::fan_in(k);
        let enc_w = b.param("encoder.weight", &[n, 1, k], init, ParamKind::Standard)?;
        let enc_b = b.param("encoder.bias", &[n], init, ParamKind::Standard)?;
        let dec_w = b.param("decoder.weight", &[n, 1, k], Init::fan_in(n), ParamKind::Standard)?;
        Ok(Self {
            cfg,
            sample_rate,
            enc_w: enc_w.reshape((n, k))?,
            enc_b,
            dec_w: dec_w.reshape((n, k))?,
        })
    }

    pub fn config(&self) -> &TimeFrontendConfig {
        &self.cfg
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.cfg.stride as f64
    }

    /// (B, T) waveform batch to (B, N, L) rectified features.
    pub fn encode(&self, x: &Tensor) -> Result<FeatureMap> {
        let (_, t) = x.dims2()?;
        self.cfg.frames_for(t)?;
        let fr = ops::frames(&x.unsqueeze(2)?, self.cfg.kernel, self.cfg.stride)?;
        let y = ops::linear(&fr, &self.enc_w, Some(&self.enc_b))?.relu()?;
        FeatureMap::from_parts(y.transpose(1, 2)?, FeatureLayout::Time, self.frame_rate())
    }

    pub fn encode_signal(&self, signal: &AudioSignal) -> Result<FeatureMap> {
        self.encode(&signal_tensor(signal, self.enc_w.dtype())?)
    }

    /// Transposed convolution back to (B, length), trimming or padding the tail.
    pub fn decode(&self, masked: &FeatureMap, length: usize) -> Result<Tensor> {
        masked.expect_layout(FeatureLayout::Time)?;
        let x = masked.data();
        let (_, n, _) = x.dims3()?;
        if n != self.cfg.channels {
            return Err(Error::shape(format!(
                "decoder expects {} channels, got {n}",
                self.cfg.channels
            )));
        }
        let fr = x.transpose(1, 2)?.matmul(&self.dec_w.broadcast_left(x.dim(0)?)?)?;
        let y = ops::overlap_add(&fr, self.cfg.kernel, self.cfg.stride, 1)?.squeeze(2)?;
        fit_length(&y, length)
    }

    /// Output length of the transposed convolution before trimming.
    pub fn natural_length(&self, frames: usize) -> usize {
        (frames - 1) * self.cfg.stride + self.cfg.kernel
    }
}

/// Constant tensors of the differentiable STFT pair.
struct SpectralBasis {
    window: Tensor,
    forward: Tensor,
    inverse: Tensor,
}

impl SpectralBasis {
    fn new(cfg: &StftConfig, dtype: DType) -> Result<Self> {
        let n = cfg.fft_size;
        let f = cfg.n_bins();
        let w = cfg.padded_window();
        let mut fwd = vec![0.0; n * 2 * f];
        let mut inv = vec![0.0; 2 * f * n];
        for t in 0..n {
            for k in 0..f {
                let ang = 2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                fwd[t * 2 * f + k] = ang.cos();
                fwd[t * 2 * f + f + k] = -ang.sin();
                let c = if k == 0 || 2 * k == n { 1.0 } else { 2.0 } / n as f64;
                inv[k * n + t] = c * ang.cos();
                inv[(f + k) * n + t] = -c * ang.sin();
            }
        }
        let dev = Device::Cpu;
        Ok(Self {
            window: Tensor::from_vec(w, n, &dev)?.to_dtype(dtype)?,
            forward: Tensor::from_vec(fwd, (n, 2 * f), &dev)?.to_dtype(dtype)?,
            inverse: Tensor::from_vec(inv, (2 * f, n), &dev)?.to_dtype(dtype)?,
        })
    }
}

/// STFT with real/imaginary channel stacking, a 3x3 channel lift, and the
/// mirrored decoder. Convolutions carry no bias.
pub struct TfFrontend {
    cfg: TfFrontendConfig,
    sample_rate: u32,
    enc_w: Tensor,
    dec_w: Tensor,
    decoder_in: usize,
    basis: SpectralBasis,
}

impl TfFrontend {
    /// `decoder_in` is the channel width handed to the decoder (2C after
    /// concatenation fusion, C otherwise).
    pub fn new(
        b: &mut Builder,
        cfg: TfFrontendConfig,
        sample_rate: u32,
        decoder_in: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let enc_w = b.param("encoder.weight", &[c, 2, 3, 3], Init::fan_in(18), ParamKind::Standard)?;
        let dec = b.param(
            "decoder.weight",
            &[decoder_in, 2, 3, 3],
            Init::fan_in(2 * 9),
            ParamKind::Standard,
        )?;
        Ok(Self {
            cfg,
            sample_rate,
            enc_w,
            dec_w: dec,
            decoder_in,
            basis: SpectralBasis::new(&cfg.stft, b.dtype())?,
        })
    }

    pub fn config(&self) -> &TfFrontendConfig {
        &self.cfg
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.cfg.stft.hop_length as f64
    }

    /// (B, T) to the stacked spectrum (B, 2, F, L).
    pub fn analysis(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.cfg.stft;
        let (b, t) = x.dims2()?;
        let l = s.frame_count(t)?;
        let x = if s.center {
            let pad = s.fft_size / 2;
            let idx: Vec<u32> = (0..pad)
                .map(|i| pad - i)
                .chain(0..t)
                .chain((0..pad).map(|i| t - 2 - i))
                .map(|i| i as u32)
                .collect();
            let idx = Tensor::from_vec(idx, t + 2 * pad, &Device::Cpu)?;
            x.contiguous()?.index_select(&idx, 1)?
        } else {
            x.clone()
        };
        let fr = ops::frames(&x.unsqueeze(2)?, s.fft_size, s.hop_length)?.narrow(1, 0, l)?;
        let fr = fr.broadcast_mul(&self.basis.window)?;
        let f = s.n_bins();
        let spec = ops::linear(&fr, &self.basis.forward.t()?, None)?;
        Ok(spec.reshape((b, l, 2, f))?.permute((0, 2, 3, 1))?.contiguous()?)
    }

    /// Inverse of [`analysis`](Self::analysis) for (B, 2, F, L), trimmed to `length`.
    pub fn synthesis(&self, spec: &Tensor, length: usize) -> Result<Tensor> {
        let s = &self.cfg.stft;
        let (b, two, f, l) = spec.dims4()?;
        if two != 2 || f != s.n_bins() {
            return Err(Error::shape(format!(
                "synthesis expects (B, 2, {}, L), got {:?}",
                s.n_bins(),
                spec.dims()
            )));
        }
        let x = spec.permute((0, 3, 1, 2))?.reshape((b, l, 2 * f))?;
        let fr = ops::linear(&x, &self.basis.inverse.t()?, None)?.broadcast_mul(&self.basis.window)?;
        let y = ops::overlap_add(&fr, s.fft_size, s.hop_length, 1)?.squeeze(2)?;
        let w = s.padded_window();
        let mut env = vec![0.0; (l - 1) * s.hop_length + s.fft_size];
        for frame in 0..l {
            for (i, v) in w.iter().enumerate() {
                env[frame * s.hop_length + i] += v * v;
            }
        }
        let inv: Vec<f64> = env.iter().map(|&e| if e > 1e-11 { 1.0 / e } else { 0.0 }).collect();
        let inv = Tensor::from_vec(inv, env.len(), &Device::Cpu)?.to_dtype(spec.dtype())?;
        let y = y.broadcast_mul(&inv)?;
        let offset = if s.center { s.fft_size / 2 } else { 0 };
        let y = y.narrow(1, offset, y.dim(1)? - offset)?;
        fit_length(&y, length)
    }

    pub fn encode(&self, x: &Tensor) -> Result<FeatureMap> {
        let y = ops::conv2d_3x3(&self.analysis(x)?, &self.enc_w)?;
        FeatureMap::from_parts(y, FeatureLayout::Tf, self.frame_rate())
    }

    pub fn encode_signal(&self, signal: &AudioSignal) -> Result<FeatureMap> {
        self.encode(&signal_tensor(signal, self.enc_w.dtype())?)
    }

    /// Projects the features back to real/imaginary planes and inverts.
    pub fn decode(&self, features: &FeatureMap, length: usize) -> Result<Tensor> {
        features.expect_layout(FeatureLayout::Tf)?;
        let c = features.channels();
        if c != self.decoder_in {
            return Err(Error::shape(format!(
                "decoder expects {} channels, got {c}",
                self.decoder_in
            )));
        }
        // A stride-1 transposed convolution equals a convolution with the
        // kernel flipped and its in/out axes swapped. Done per call so the
        // kernel tracks parameter updates.
        let flip = Tensor::new(&[2u32, 1, 0], &Device::Cpu)?;
        let w = self
            .dec_w
            .transpose(0, 1)?
            .contiguous()?
            .index_select(&flip, 2)?
            .contiguous()?
            .index_select(&flip, 3)?
            .contiguous()?;
        let ri = ops::conv2d_3x3(features.data(), &w)?;
        self.synthesis(&ri, length)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::stft;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};

    fn noise(len: usize, seed: u64) -> AudioSignal {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        AudioSignal::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    fn tf_cfg(c: usize) -> TfFrontendConfig {
        TfFrontendConfig {
            stft: StftConfig::narrowband(),
            conv_kernel: [3, 3],
            channels: c,
        }
    }

    #[test]
    fn time_frame_counts() {
        let cfg = TimeFrontendConfig {
            kernel: 16,
            stride: 8,
            channels: 4,
        };
        let mut store = ParamStore::new(0, DType::F64);
        let fe = TimeFrontend::new(&mut Builder::new(&mut store, false), cfg, 8000).unwrap();
        assert_eq!(fe.encode_signal(&noise(16, 1)).unwrap().frames(), 1);
        let fm = fe.encode_signal(&noise(8000, 1)).unwrap();
        assert_eq!(fm.dims(), &[1, 4, 999]);
        assert_eq!(fe.natural_length(999), 8000);
        assert!(matches!(
            fe.encode_signal(&noise(15, 1)),
            Err(Error::SignalTooShort { .. })
        ));
    }

    #[test]
    fn time_encoder_matches_direct_convolution() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for trial in 0..200 {
            let kernel = rng.gen_range(1..12);
            let stride = rng.gen_range(1..=kernel);
            let t = rng.gen_range(kernel..kernel + 60);
            let cfg = TimeFrontendConfig {
                kernel,
                stride,
                channels: 2,
            };
            let mut store = ParamStore::new(trial, DType::F64);
            let fe = TimeFrontend::new(&mut Builder::new(&mut store, false), cfg, 8000).unwrap();
            let sig = noise(t, trial);
            let out = fe.encode_signal(&sig).unwrap();
            let l = (t - kernel) / stride + 1;
            assert_eq!(out.frames(), l);
            let w: Vec<f64> = store.get("encoder.weight").unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let bias: Vec<f64> = store.get("encoder.bias").unwrap().to_vec1().unwrap();
            let got = out.data().get(0).unwrap().to_vec2::<f64>().unwrap();
            for c in 0..2 {
                for j in 0..l {
                    let s: f64 = (0..kernel)
                        .map(|k| w[c * kernel + k] * sig.samples()[j * stride + k])
                        .sum::<f64>()
                        + bias[c];
                    assert!((got[c][j] - s.max(0.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn time_decoder_zero_and_length() {
        let cfg = TimeFrontendConfig {
            kernel: 16,
            stride: 8,
            channels: 3,
        };
        let mut store = ParamStore::new(0, DType::F64);
        let fe = TimeFrontend::new(&mut Builder::new(&mut store, false), cfg, 8000).unwrap();
        let zero = FeatureMap::new(
            Tensor::zeros((1, 3, 999), DType::F64, &Device::Cpu).unwrap(),
            FeatureLayout::Time,
            1000.0,
        )
        .unwrap();
        let y = fe.decode(&zero, 8000).unwrap();
        assert_eq!(y.dims(), &[1, 8000]);
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
        let tf = FeatureMap::new(
            Tensor::zeros((1, 3, 4, 5), DType::F64, &Device::Cpu).unwrap(),
            FeatureLayout::Tf,
            125.0,
        )
        .unwrap();
        assert!(matches!(fe.decode(&tf, 10), Err(Error::Layout { .. })));
        let round = fe.decode(&fe.encode_signal(&noise(1000, 2)).unwrap(), 1000).unwrap();
        let e = round.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(e.is_finite());
    }

    #[test]
    fn tensor_stft_matches_reference() {
        let mut store = ParamStore::new(0, DType::F64);
        let fe = TfFrontend::new(&mut Builder::new(&mut store, false), tf_cfg(4), 8000, 8).unwrap();
        let sig = noise(1000, 4);
        let spec = stft(&sig, &StftConfig::narrowband()).unwrap();
        let got = fe
            .analysis(&signal_tensor(&sig, DType::F64).unwrap())
            .unwrap()
            .get(0)
            .unwrap();
        assert_eq!(got.dims(), &[2, 65, spec.frames()]);
        let re = got.get(0).unwrap().to_vec2::<f64>().unwrap();
        let im = got.get(1).unwrap().to_vec2::<f64>().unwrap();
        for t in 0..spec.frames() {
            for k in 0..65 {
                let c = spec.get(t, k);
                assert!((re[k][t] - c.re).abs() < 1e-9 && (im[k][t] - c.im).abs() < 1e-9);
            }
        }
        let back = fe.synthesis(&got.unsqueeze(0).unwrap(), 1000).unwrap();
        let back = tensor_signal(&back, 8000).unwrap();
        for (a, b) in back.samples().iter().zip(sig.samples()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn tf_shapes_zero_and_sharing() {
        let mut store = ParamStore::new(0, DType::F32);
        let fe = TfFrontend::new(&mut Builder::new(&mut store, false), tf_cfg(6), 8000, 12).unwrap();
        let fm = fe.encode_signal(&AudioSignal::zeros(8000, 8000).unwrap()).unwrap();
        assert_eq!(fm.dims(), &[1, 6, 65, 126]);
        assert_eq!(fm.data().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        let m = noise(3000, 1);
        let r = noise(2000, 2);
        let a1 = fe.encode_signal(&m).unwrap().into_data().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b1 = fe.encode_signal(&r).unwrap().into_data().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b2 = fe.encode_signal(&r).unwrap().into_data().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let a2 = fe.encode_signal(&m).unwrap().into_data().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let zero = FeatureMap::new(
            Tensor::zeros((1, 12, 65, 126), DType::F32, &Device::Cpu).unwrap(),
            FeatureLayout::Tf,
            125.0,
        )
        .unwrap();
        let y = fe.decode(&zero, 8000).unwrap();
        assert_eq!(y.dims(), &[1, 8000]);
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        for len in [7000, 8000, 8050] {
            assert_eq!(fe.decode(&zero, len).unwrap().dim(1).unwrap(), len);
        }
        let wrong = FeatureMap::new(
            Tensor::zeros((1, 6, 65, 126), DType::F32, &Device::Cpu).unwrap(),
            FeatureLayout::Tf,
            125.0,
        )
        .unwrap();
        assert!(fe.decode(&wrong, 8000).is_err());
    }
}
