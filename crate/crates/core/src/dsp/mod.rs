//! Signal primitives and separation metrics. Everything here runs in 64-bit
//! float and is free of shared state.

mod metrics;
mod stft;

pub use metrics::{
    improvement, sdr, sdr_slices, si_sdr, si_sdr_slices, SeparationScore, CLAMP_DB,
};
pub use stft::{istft, stft, ComplexSpectrogram, StftConfig, Window};
