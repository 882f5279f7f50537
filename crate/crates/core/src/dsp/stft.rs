//! Short-time Fourier analysis and overlap-add resynthesis.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioSignal;
use crate::error::{Error, Result};

/// Analysis/synthesis window shape. The same window is used on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Square root of the periodic Hann window.
    SqrtHann,
    /// Periodic Hann window.
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| {
                let hann = 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos();
                match self {
                    Window::SqrtHann => hann.sqrt(),
                    Window::Hann => hann,
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StftConfig {
    pub win_length: usize,
    pub hop_length: usize,
    pub fft_size: usize,
    pub window: Window,
    /// Reflect-pad `fft_size / 2` samples on both sides before framing.
    pub center: bool,
}

impl StftConfig {
    /// 16 ms window, 8 ms hop and 128-point FFT at 8 kHz.
    pub fn narrowband() -> Self {
        Self {
            win_length: 128,
            hop_length: 64,
            fft_size: 128,
            window: Window::SqrtHann,
            center: true,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// The window zero-padded (centered) to `fft_size`.
    pub fn padded_window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.fft_size];
        let offset = (self.fft_size - self.win_length) / 2;
        for (dst, c) in w[offset..]
            .iter_mut()
            .zip(self.window.coefficients(self.win_length))
        {
            *dst = c;
        }
        w
    }

    /// Steady-state sum of squared windows at each phase of the hop.
    pub fn overlap_envelope(&self) -> Vec<f64> {
        let w = self.padded_window();
        let mut env = vec![0.0; self.hop_length];
        for (i, v) in w.iter().enumerate() {
            env[i % self.hop_length] += v * v;
        }
        env
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 {
            return Err(Error::config("hop_length must be positive"));
        }
        if !(self.hop_length <= self.win_length && self.win_length <= self.fft_size) {
            return Err(Error::config(format!(
                "need hop <= win <= fft, got hop={} win={} fft={}",
                self.hop_length, self.win_length, self.fft_size
            )));
        }
        if self.fft_size % 2 != 0 {
            return Err(Error::config("fft_size must be even"));
        }
        let env = self.overlap_envelope();
        let (lo, hi) = env
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo <= 0.0 || (hi - lo) > 1e-9 * hi {
            return Err(Error::config(format!(
                "window {:?} with win={} hop={} violates constant overlap-add",
                self.window, self.win_length, self.hop_length
            )));
        }
        Ok(())
    }

    /// Frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> Result<usize> {
        if self.center {
            let pad = self.fft_size / 2;
            if len <= pad {
                return Err(Error::SignalTooShort {
                    needed: pad + 1,
                    got: len,
                });
            }
            Ok(1 + len / self.hop_length)
        } else {
            if len < self.fft_size {
                return Err(Error::SignalTooShort {
                    needed: self.fft_size,
                    got: len,
                });
            }
            Ok(1 + (len - self.fft_size) / self.hop_length)
        }
    }

    /// Signal length the frame grid covers before trimming.
    pub fn natural_length(&self, frames: usize) -> usize {
        let span = (frames.saturating_sub(1)) * self.hop_length;
        if self.center {
            span
        } else {
            span + self.fft_size
        }
    }
}

/// One-sided complex spectrogram, row-major `frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    data: Vec<Complex64>,
    frames: usize,
    bins: usize,
    config: StftConfig,
    sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn new(
        data: Vec<Complex64>,
        frames: usize,
        config: StftConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        let bins = config.n_bins();
        if data.len() != frames * bins {
            return Err(Error::shape(format!(
                "spectrogram data has {} values, expected {frames}x{bins}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            frames,
            bins,
            config,
            sample_rate,
        })
    }

    pub fn zeros(frames: usize, config: StftConfig, sample_rate: u32) -> Self {
        Self {
            data: vec![Complex64::new(0.0, 0.0); frames * config.n_bins()],
            frames,
            bins: config.n_bins(),
            config,
            sample_rate,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, frame: usize, bin: usize) -> Complex64 {
        self.data[frame * self.bins + bin]
    }
}

/// Reflect padding without repeating the edge sample.
pub(crate) fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((0..pad).map(|i| x[pad - i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

pub fn stft(signal: &AudioSignal, config: &StftConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    let frames = config.frame_count(signal.len())?;
    let padded;
    let x: &[f64] = if config.center {
        padded = reflect_pad(signal.samples(), config.fft_size / 2);
        &padded
    } else {
        signal.samples()
    };
    let window = config.padded_window();
    let n = config.fft_size;
    let bins = config.n_bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = t * config.hop_length;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(x[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    ComplexSpectrogram::new(data, frames, *config, signal.sample_rate())
}

/// Inverse STFT by windowed overlap-add, normalized by the summed squared
/// window. `length` may differ from the natural length by at most one hop.
pub fn istft(spec: &ComplexSpectrogram, length: usize) -> Result<AudioSignal> {
    let config = spec.config();
    config.validate()?;
    let natural = config.natural_length(spec.frames());
    if length == 0 || length.abs_diff(natural) > config.hop_length {
        return Err(Error::LengthMismatch(length, natural));
    }
    let n = config.fft_size;
    let hop = config.hop_length;
    let window = config.padded_window();
    let total = (spec.frames() - 1) * hop + n;
    let mut out = vec![0.0; total];
    let mut env = vec![0.0; total];
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..spec.frames() {
        let frame = spec.frame(t);
        buf[..frame.len()].copy_from_slice(frame);
        // irfft semantics: DC and Nyquist are taken as real.
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        for k in 1..n / 2 {
            buf[n - k] = frame[k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for i in 0..n {
            out[start + i] += buf[i].re / n as f64 * window[i];
            env[start + i] += window[i] * window[i];
        }
    }
    let offset = if config.center { n / 2 } else { 0 };
    let samples = (0..length)
        .map(|i| {
            let j = offset + i;
            if j < total && env[j] > 1e-11 {
                out[j] / env[j]
            } else {
                0.0
            }
        })
        .collect();
    AudioSignal::new(samples, spec.sample_rate())
}
