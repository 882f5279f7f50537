//! Mono waveform container and WAV IO.

use std::path::Path;

use crate::error::{Error, Result};

/// Mono waveform with its sample rate.
///
/// Samples are kept in 64-bit float. A signal always has at least one sample
/// and every sample is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("audio signal"));
        }
        if sample_rate == 0 {
            return Err(Error::config("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio signal"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn from_f32(samples: &[f32], sample_rate: u32) -> Result<Self> {
        Self::new(samples.iter().map(|&s| s as f64).collect(), sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false; kept for API symmetry with slices.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::new(
            self.samples.iter().map(|s| s * gain).collect(),
            self.sample_rate,
        )
    }

    /// Zero-pads or truncates at the end to exactly `len` samples.
    pub fn with_len(&self, len: usize) -> Result<Self> {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self::new(samples, self.sample_rate)
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.samples.len())
            .ok_or(Error::LengthMismatch(start + len, self.samples.len()))?;
        Self::new(self.samples[start..end].to_vec(), self.sample_rate)
    }

    /// Rounds every sample through 32-bit float, i.e. what a float32 WAV stores.
    pub fn quantized_f32(&self) -> Self {
        Self {
            samples: self.samples.iter().map(|&s| s as f32 as f64).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.samples.iter().map(|&s| s as f32).collect()
    }

    pub fn ensure_same_rate(&self, other: &AudioSignal) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::SampleRateMismatch(
                self.sample_rate,
                other.sample_rate,
            ));
        }
        Ok(())
    }
}

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioSignal> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::WavFormat {
            path: path.to_path_buf(),
            reason: format!("expected mono, found {} channels", spec.channels),
        });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (format, bits) => {
            return Err(Error::WavFormat {
                path: path.to_path_buf(),
                reason: format!("unsupported sample format {format:?} with {bits} bits"),
            })
        }
    };
    AudioSignal::new(samples, spec.sample_rate)
}

pub fn write_wav(
    path: impl AsRef<Path>,
    signal: &AudioSignal,
    encoding: WavEncoding,
) -> Result<()> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = match encoding {
        WavEncoding::Pcm16 => hound::WavSpec {
            channels: 1,
            sample_rate: signal.sample_rate(),
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        },
        WavEncoding::Float32 => hound::WavSpec {
            channels: 1,
            sample_rate: signal.sample_rate(),
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in signal.samples() {
        match encoding {
            WavEncoding::Pcm16 => {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v).map_err(wav_err)?;
            }
            WavEncoding::Float32 => writer.write_sample(s as f32).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(matches!(
            AudioSignal::new(vec![], 8000),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            AudioSignal::new(vec![0.0, f64::NAN], 8000),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn float32_wav_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let sig = AudioSignal::new(vec![0.25, -0.5, 0.123456789, 1.5], 8000)
            .unwrap()
            .quantized_f32();
        write_wav(&path, &sig, WavEncoding::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back, sig);
    }

    #[test]
    fn pcm16_wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let sig = AudioSignal::new(vec![0.25, -0.5, 0.1, -0.999], 16000).unwrap();
        write_wav(&path, &sig, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 16000);
        for (a, b) in back.samples().iter().zip(sig.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::WavFormat { .. })));
    }
}
