//! Batch scoring of an extractor over a corpus split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::AudioSignal;
use crate::datagen::{Manifest, Split};
use crate::dsp::SeparationScore;
use crate::error::{Error, Result};
use crate::models::Model;

/// What an extractor sees for one record. `target` is there for oracle
/// baselines only.
pub struct EvalInput<'a> {
    pub mixture: &'a AudioSignal,
    pub reference: &'a AudioSignal,
    pub target: &'a AudioSignal,
}

pub trait Extractor {
    fn extract(&self, input: &EvalInput) -> Result<AudioSignal>;
}

impl Extractor for Model {
    fn extract(&self, input: &EvalInput) -> Result<AudioSignal> {
        Model::extract(self, input.mixture, input.reference)
    }
}

/// Returns the mixture unchanged.
pub struct Identity;

impl Extractor for Identity {
    fn extract(&self, input: &EvalInput) -> Result<AudioSignal> {
        Ok(input.mixture.clone())
    }
}

/// Returns the clean target.
pub struct Oracle;

impl Extractor for Oracle {
    fn extract(&self, input: &EvalInput) -> Result<AudioSignal> {
        Ok(input.target.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Target,
    Interferer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub role: Role,
    /// Speaker being extracted.
    pub speaker: u32,
    pub other_speaker: u32,
    #[serde(flatten)]
    pub score: SeparationScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub si_sdr: f64,
    pub sdr: f64,
    pub si_sdri: f64,
    pub sdri: f64,
    pub count: usize,
}

impl MeanScores {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Option<Self> {
        let mut m = Self {
            si_sdr: 0.0,
            sdr: 0.0,
            si_sdri: 0.0,
            sdri: 0.0,
            count: 0,
        };
        for r in records {
            m.si_sdr += r.score.si_sdr;
            m.sdr += r.score.sdr;
            m.si_sdri += r.score.si_sdri;
            m.sdri += r.score.sdri;
            m.count += 1;
        }
        if m.count == 0 {
            return None;
        }
        let n = m.count as f64;
        m.si_sdr /= n;
        m.sdr /= n;
        m.si_sdri /= n;
        m.sdri /= n;
        Some(m)
    }
}

/// Inner edges of the SI-SDRi histogram in dB; the outer bins are open.
pub const BIN_EDGES: [f64; 6] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    /// Inclusive lower edge; open for the first bin.
    pub lo: Option<f64>,
    /// Exclusive upper edge; open for the last bin.
    pub hi: Option<f64>,
    pub count: usize,
}

impl Bin {
    pub fn contains(&self, v: f64) -> bool {
        self.lo.is_none_or(|lo| v >= lo) && self.hi.is_none_or(|hi| v < hi)
    }

    pub fn label(&self) -> String {
        let lo = self.lo.map_or("-Inf".to_string(), |v| v.to_string());
        let hi = self.hi.map_or("Inf".to_string(), |v| v.to_string());
        format!("{lo}~{hi}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<Bin>,
}

impl Histogram {
    pub fn of(values: &[f64]) -> Self {
        let mut bins: Vec<Bin> = Vec::with_capacity(BIN_EDGES.len() + 1);
        let mut lo = None;
        for hi in BIN_EDGES.iter().map(|&e| Some(e)).chain([None]) {
            bins.push(Bin { lo, hi, count: 0 });
            lo = hi;
        }
        for &v in values {
            let k = BIN_EDGES.iter().take_while(|&&e| v >= e).count();
            bins[k].count += 1;
        }
        Self { bins }
    }

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,lower_db,upper_db,count\n");
        for b in &self.bins {
            let lo = b.lo.unwrap_or(f64::NEG_INFINITY);
            let hi = b.hi.unwrap_or(f64::INFINITY);
            let _ = writeln!(out, "{},{lo},{hi},{}", b.label(), b.count);
        }
        out
    }
}

/// Results grouped by whether both speakers share a pitch register.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSplit {
    pub same_register: Option<MeanScores>,
    pub different_register: Option<MeanScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub both_speakers: bool,
    pub records: Vec<EvalRecord>,
    pub mean: MeanScores,
    pub histogram: Histogram,
    #[serde(default)]
    pub pair_split: Option<PairSplit>,
}

impl EvalReport {
    pub fn from_records(split: Split, both_speakers: bool, records: Vec<EvalRecord>) -> Result<Self> {
        let mean = MeanScores::of(&records).ok_or(Error::EmptyInput("evaluation records"))?;
        let values: Vec<f64> = records.iter().map(|r| r.score.si_sdri).collect();
        Ok(Self {
            split,
            both_speakers,
            histogram: Histogram::of(&values),
            mean,
            records,
            pair_split: None,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Per-record scores as CSV.
    pub fn records_csv(&self) -> String {
        let mut out = String::from("id,role,speaker,other_speaker,si_sdr,sdr,si_sdri,sdri\n");
        for r in &self.records {
            let role = match r.role {
                Role::Target => "target",
                Role::Interferer => "interferer",
            };
            let s = &r.score;
            let _ = writeln!(
                out,
                "{},{role},{},{},{},{},{},{}",
                r.id, r.speaker, r.other_speaker, s.si_sdr, s.sdr, s.si_sdri, s.sdri
            );
        }
        out
    }
}

/// Writes the SI-SDRi histogram of `report` as CSV.
pub fn export_histogram(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    if report.records.is_empty() {
        return Err(Error::EmptyInput("evaluation report"));
    }
    let path = path.as_ref();
    fs::write(path, report.histogram.to_csv()).map_err(|e| Error::io(path, e))
}

/// Scores every mixture of `split`. With `both_speakers`, each mixture is
/// scored twice, once per speaker with that speaker's own reference.
pub fn evaluate<E: Extractor + ?Sized>(
    extractor: &E,
    manifest: &Manifest,
    split: Split,
    both_speakers: bool,
) -> Result<EvalReport> {
    let mut records = Vec::new();
    for e in manifest.split(split) {
        let mixture = manifest.read_audio(&e.mixture_path)?;
        let mut roles = vec![(Role::Target, &e.target_path, &e.reference_path, e.target_speaker, e.interferer_speaker)];
        if both_speakers {
            roles.push((
                Role::Interferer,
                &e.interferer_path,
                &e.interferer_reference_path,
                e.interferer_speaker,
                e.target_speaker,
            ));
        }
        for (role, target_path, reference_path, speaker, other) in roles {
            let target = manifest.read_audio(target_path)?;
            let reference = manifest.read_audio(reference_path)?;
            let estimate = extractor.extract(&EvalInput {
                mixture: &mixture,
                reference: &reference,
                target: &target,
            })?;
            records.push(EvalRecord {
                id: e.id.clone(),
                role,
                speaker,
                other_speaker: other,
                score: SeparationScore::evaluate(&estimate, &mixture, &target)?,
            });
        }
    }
    let mut report = EvalReport::from_records(split, both_speakers, records)?;
    if !manifest.speakers.is_empty() {
        let register = |id: u32| manifest.speaker(id).map(|s| s.register());
        let same = |r: &&EvalRecord| register(r.speaker).is_some() && register(r.speaker) == register(r.other_speaker);
        report.pair_split = Some(PairSplit {
            same_register: MeanScores::of(report.records.iter().filter(same)),
            different_register: MeanScores::of(report.records.iter().filter(|r| !same(r))),
        });
    }
    Ok(report)
}
