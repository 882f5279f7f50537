//! Separation metrics in dB.

use serde::{Deserialize, Serialize};

use crate::audio::AudioSignal;
use crate::error::{Error, Result};

/// Ratios that under- or overflow this many dB are clamped.
pub const CLAMP_DB: f64 = 80.0;

fn check_pair(estimate: &[f64], target: &[f64]) -> Result<f64> {
    if estimate.len() != target.len() {
        return Err(Error::LengthMismatch(estimate.len(), target.len()));
    }
    let target_energy: f64 = target.iter().map(|s| s * s).sum();
    if target_energy == 0.0 {
        return Err(Error::ZeroEnergy("target"));
    }
    Ok(target_energy)
}

fn ratio_db(signal_energy: f64, noise_energy: f64) -> f64 {
    if signal_energy == 0.0 {
        return -CLAMP_DB;
    }
    if noise_energy == 0.0 {
        return CLAMP_DB;
    }
    (10.0 * (signal_energy / noise_energy).log10()).clamp(-CLAMP_DB, CLAMP_DB)
}

/// Scale-invariant SDR of `estimate` against `target` over raw sample slices.
pub fn si_sdr_slices(estimate: &[f64], target: &[f64]) -> Result<f64> {
    let target_energy = check_pair(estimate, target)?;
    let dot: f64 = estimate.iter().zip(target).map(|(e, s)| e * s).sum();
    let alpha = dot / target_energy;
    let (proj, resid) = estimate
        .iter()
        .zip(target)
        .fold((0.0, 0.0), |(p, r), (&e, &s)| {
            let st = alpha * s;
            let se = e - st;
            (p + st * st, r + se * se)
        });
    Ok(ratio_db(proj, resid))
}

/// Plain energy-ratio SDR, `10 log10(|s|^2 / |s - est|^2)`.
pub fn sdr_slices(estimate: &[f64], target: &[f64]) -> Result<f64> {
    let target_energy = check_pair(estimate, target)?;
    let err: f64 = estimate
        .iter()
        .zip(target)
        .map(|(e, s)| (s - e) * (s - e))
        .sum();
    Ok(ratio_db(target_energy, err))
}

pub fn si_sdr(estimate: &AudioSignal, target: &AudioSignal) -> Result<f64> {
    estimate.ensure_same_rate(target)?;
    si_sdr_slices(estimate.samples(), target.samples())
}

pub fn sdr(estimate: &AudioSignal, target: &AudioSignal) -> Result<f64> {
    estimate.ensure_same_rate(target)?;
    sdr_slices(estimate.samples(), target.samples())
}

pub fn improvement(metric_estimate: f64, metric_mixture: f64) -> f64 {
    metric_estimate - metric_mixture
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationScore {
    pub si_sdr: f64,
    pub sdr: f64,
    pub si_sdri: f64,
    pub sdri: f64,
}

impl SeparationScore {
    /// Scores `estimate` and the unprocessed `mixture` against the same target.
    pub fn evaluate(
        estimate: &AudioSignal,
        mixture: &AudioSignal,
        target: &AudioSignal,
    ) -> Result<Self> {
        let si_est = si_sdr(estimate, target)?;
        let si_mix = si_sdr(mixture, target)?;
        let sdr_est = sdr(estimate, target)?;
        let sdr_mix = sdr(mixture, target)?;
        Ok(Self {
            si_sdr: si_est,
            sdr: sdr_est,
            si_sdri: improvement(si_est, si_mix),
            sdri: improvement(sdr_est, sdr_mix),
        })
    }
}
