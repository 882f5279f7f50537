//! Synthetic voices, two-speaker mixing and on-disk corpora.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{read_wav, write_wav, AudioSignal, WavEncoding};
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 8000;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const UTTERANCE_FILE: &str = "utterances.jsonl";
pub const SPEAKER_FILE: &str = "speakers.jsonl";

/// Independent stream seed for `(seed, tag, index)`.
pub fn sub_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng_for(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, tag, index))
}

/// Vowel formants (Hz) of an average adult voice.
const VOWELS: [[f64; 4]; 5] = [
    [730.0, 1090.0, 2440.0, 3400.0],
    [270.0, 2290.0, 3010.0, 3700.0],
    [300.0, 870.0, 2240.0, 3300.0],
    [530.0, 1840.0, 2480.0, 3500.0],
    [570.0, 840.0, 2410.0, 3300.0],
];
const FORMANT_GAINS: [f64; 4] = [1.0, 0.6, 0.3, 0.15];
const BANDWIDTHS: [f64; 4] = [60.0, 90.0, 120.0, 150.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub speaker_id: u32,
    /// Lowest and highest fundamental frequency in Hz.
    pub f0_range: (f64, f64),
    pub envelope_seed: u64,
    pub timing_seed: u64,
    /// Position in a unit cube of vocal-tract traits: size (formant scale and
    /// pitch together), spectral tilt, extra resonance centre, its gain and
    /// breathiness.
    pub timbre: [f64; 5],
}

/// Radical inverse of `i` in `base`.
fn halton(mut i: u64, base: u64) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

struct Voice {
    vowels: Vec<[(f64, f64); 4]>,
    gains: [f64; 4],
    /// Fixed resonance shared by all vowels: centre, bandwidth, gain.
    extra: (f64, f64, f64),
    tilt: f64,
    breath: f64,
}

impl SyntheticSpeaker {
    /// Pitch register, `"low"` or `"high"` around 150 Hz; a stand-in for the
    /// speaker's sex when grouping results.
    pub fn register(&self) -> &'static str {
        if (self.f0_range.0 * self.f0_range.1).sqrt() < 150.0 {
            "low"
        } else {
            "high"
        }
    }

    /// Speakers of one corpus sit on a shifted Halton sequence so that nearby
    /// ids still get well separated voices.
    pub fn new(corpus_seed: u64, speaker_id: u32) -> Self {
        let mut shift = rng_for(corpus_seed, "timbre", 0);
        let point: Vec<f64> = [2, 3, 5, 7, 11]
            .iter()
            .map(|&b| (halton(speaker_id as u64 + 1, b) + shift.gen::<f64>()).fract())
            .collect();
        let mut rng = rng_for(corpus_seed, "speaker", speaker_id as u64);
        let size = (point[0] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
        let center = (85.0f64.ln() + size * (260.0f64 / 85.0).ln()).exp();
        Self {
            speaker_id,
            f0_range: (center * 0.9, center * 1.1),
            envelope_seed: rng.gen(),
            timing_seed: rng.gen(),
            timbre: [point[0], point[1], point[2], point[3], point[4]],
        }
    }

    fn voice(&self) -> Voice {
        let mut rng = ChaCha8Rng::seed_from_u64(self.envelope_seed);
        let [a, b, c, d, e] = self.timbre;
        let scale = 0.65 + 0.8 * a;
        let tilt = 0.9 - 0.7 * b;
        let gains = FORMANT_GAINS;
        let extra = (2000.0 + 1900.0 * c, rng.gen_range(100.0..300.0), 0.2 + 1.8 * d);
        let vowels = VOWELS
            .iter()
            .map(|f| {
                let mut v = [(0.0, 0.0); 4];
                for i in 0..4 {
                    v[i] = (
                        f[i] * scale * rng.gen_range(0.95..1.05),
                        BANDWIDTHS[i] * rng.gen_range(0.8..1.2),
                    );
                }
                v
            })
            .collect();
        Voice {
            vowels,
            gains,
            extra,
            tilt,
            breath: 0.05 * e,
        }
    }
}

/// Renders `duration` seconds of a voiced babble for `speaker`. The result
/// depends only on `(speaker, duration, utterance_seed)`.
pub fn synth_voice(speaker: &SyntheticSpeaker, duration: f64, utterance_seed: u64) -> Result<AudioSignal> {
    if !(0.5..=30.0).contains(&duration) {
        return Err(Error::config(format!("utterance duration {duration} s is outside [0.5, 30]")));
    }
    let sr = SAMPLE_RATE as f64;
    let n = (duration * sr).round() as usize;
    let voice = speaker.voice();
    let mut rng = rng_for(speaker.timing_seed, "utterance", utterance_seed);
    let mut noise = rng_for(speaker.timing_seed, "breath", utterance_seed);
    let (lo, hi) = speaker.f0_range;
    let mut out = vec![0.0; n];
    let mut phases = Vec::<f64>::new();
    let mut t = (rng.gen_range(0.02..0.15) * sr) as usize;
    while t < n {
        let len = ((rng.gen_range(0.12..0.35) * sr) as usize).min(n - t);
        let vowel = &voice.vowels[rng.gen_range(0..voice.vowels.len())];
        let (f_start, f_end) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        let level = rng.gen_range(0.6..1.0);
        let attack = (0.02 * sr) as usize;
        let decay = (0.04 * sr) as usize;
        for i in 0..len {
            let u = i as f64 / len as f64;
            let time = (t + i) as f64 / sr;
            let f0 = (f_start + (f_end - f_start) * u) * (1.0 + 0.01 * (2.0 * PI * 5.5 * time).sin());
            let harmonics = ((sr / 2.0 - 50.0) / f0) as usize;
            phases.resize(harmonics.max(phases.len()), 0.0);
            let env = if i < attack {
                (0.5 * PI * i as f64 / attack as f64).sin().powi(2)
            } else if len - i < decay {
                (0.5 * PI * (len - i) as f64 / decay as f64).sin().powi(2)
            } else {
                1.0
            };
            let mut s = 0.0;
            for (k, phase) in phases.iter_mut().enumerate().take(harmonics) {
                let f = (k + 1) as f64 * f0;
                *phase = (*phase + 2.0 * PI * f / sr) % (2.0 * PI);
                let (fx, bx, gx) = voice.extra;
                let mut a = gx / (1.0 + ((f - fx) / bx).powi(2));
                for (j, &(fc, bw)) in vowel.iter().enumerate() {
                    let d = (f - fc) / bw;
                    a += voice.gains[j] / (1.0 + d * d);
                }
                s += a * ((k + 1) as f64).powf(-voice.tilt) * phase.sin();
            }
            s += voice.breath * noise.sample::<f64, _>(StandardNormal);
            out[t + i] = s * env * level * (1.0 + 0.2 * (2.0 * PI * 3.5 * time).sin());
        }
        t += len + (rng.gen_range(0.03..0.15) * sr) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let gain = 0.9 * rng.gen_range(0.5..1.0) / peak;
        out.iter_mut().for_each(|v| *v *= gain);
    }
    AudioSignal::new(out, SAMPLE_RATE)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    /// Zero-pad the shorter signal.
    #[default]
    Max,
    /// Truncate to the shorter signal.
    Min,
}

/// A target plus one rescaled interferer.
#[derive(Debug, Clone)]
pub struct Mixture {
    pub mixture: AudioSignal,
    pub target: AudioSignal,
    pub interferer: AudioSignal,
    pub snr_db: f64,
}

/// 10 log10 of the energy ratio.
pub fn snr_db(target: &AudioSignal, interferer: &AudioSignal) -> f64 {
    10.0 * (target.energy() / interferer.energy()).log10()
}

pub fn mix(target: &AudioSignal, interferer: &AudioSignal, snr: f64, mode: MixMode) -> Result<Mixture> {
    target.ensure_same_rate(interferer)?;
    let len = match mode {
        MixMode::Max => target.len().max(interferer.len()),
        MixMode::Min => target.len().min(interferer.len()),
    };
    let t = target.with_len(len)?;
    let i = interferer.with_len(len)?;
    if t.energy() == 0.0 {
        return Err(Error::ZeroEnergy("target"));
    }
    if i.energy() == 0.0 {
        return Err(Error::ZeroEnergy("interferer"));
    }
    let gain = (t.energy() / (i.energy() * 10f64.powf(snr / 10.0))).sqrt();
    let i = i.scaled(gain)?;
    let m: Vec<f64> = t.samples().iter().zip(i.samples()).map(|(a, b)| a + b).collect();
    Ok(Mixture {
        mixture: AudioSignal::new(m, t.sample_rate())?,
        snr_db: snr_db(&t, &i),
        target: t,
        interferer: i,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Speakers shared by the train and dev splits.
    pub train_speakers: usize,
    pub test_speakers: usize,
    pub utterances_per_speaker: usize,
    pub min_duration: f64,
    pub max_duration: f64,
    pub snr_range: (f64, f64),
    #[serde(default)]
    pub mix_mode: MixMode,
    pub seed: u64,
}

impl CorpusSpec {
    /// Small corpus with two-second utterances.
    pub fn desk(train: usize, dev: usize, test: usize, seed: u64) -> Self {
        Self {
            train,
            dev,
            test,
            train_speakers: 12,
            test_speakers: 4,
            utterances_per_speaker: 4,
            min_duration: 1.5,
            max_duration: 2.5,
            snr_range: (0.0, 5.0),
            mix_mode: MixMode::Max,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_speakers < 2 || self.test_speakers < 2 {
            return Err(Error::config("each speaker group needs at least two speakers"));
        }
        if self.utterances_per_speaker < 2 {
            return Err(Error::config("each speaker needs at least two utterances"));
        }
        if !(0.5 <= self.min_duration && self.min_duration <= self.max_duration && self.max_duration <= 30.0) {
            return Err(Error::config("utterance durations must satisfy 0.5 <= min <= max <= 30"));
        }
        if self.snr_range.0 > self.snr_range.1 {
            return Err(Error::config("snr range is reversed"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: u32,
    pub index: usize,
    pub path: String,
}

/// One mixture with everything needed to score either speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub split: Split,
    pub mixture_path: String,
    pub target_path: String,
    pub reference_path: String,
    pub target_speaker: u32,
    pub interferer_speaker: u32,
    /// Realized level of the stored target over the stored interferer.
    pub snr_db: f64,
    pub requested_snr_db: f64,
    pub interferer_path: String,
    pub interferer_reference_path: String,
    pub target_utterance: usize,
    pub interferer_utterance: usize,
}

/// Corpus index: example records plus the utterance pool they draw from.
/// Paths are relative to `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub examples: Vec<ExampleRecord>,
    pub utterances: Vec<Utterance>,
    /// Voice descriptions, when the corpus is synthetic.
    pub speakers: Vec<SyntheticSpeaker>,
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

impl Manifest {
    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        write_jsonl(&self.root.join(MANIFEST_FILE), &self.examples)?;
        write_jsonl(&self.root.join(UTTERANCE_FILE), &self.utterances)?;
        if !self.speakers.is_empty() {
            write_jsonl(&self.root.join(SPEAKER_FILE), &self.speakers)?;
        }
        Ok(())
    }

    /// Reads a corpus from its directory or from its manifest file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent().map(Path::to_path_buf).unwrap_or_default()
        };
        let manifest = Self {
            examples: read_jsonl(&root.join(MANIFEST_FILE))?,
            utterances: read_jsonl(&root.join(UTTERANCE_FILE))?,
            speakers: if root.join(SPEAKER_FILE).exists() {
                read_jsonl(&root.join(SPEAKER_FILE))?
            } else {
                Vec::new()
            },
            root,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn read_audio(&self, rel: &str) -> Result<AudioSignal> {
        read_wav(self.resolve(rel))
    }

    pub fn speaker(&self, id: u32) -> Option<&SyntheticSpeaker> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }

    pub fn split(&self, split: Split) -> Vec<&ExampleRecord> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    pub fn speakers(&self, split: Split) -> BTreeSet<u32> {
        self.split(split)
            .iter()
            .flat_map(|e| [e.target_speaker, e.interferer_speaker])
            .collect()
    }

    fn pool(&self) -> BTreeMap<u32, Vec<&Utterance>> {
        let mut pool: BTreeMap<u32, Vec<&Utterance>> = BTreeMap::new();
        for u in &self.utterances {
            pool.entry(u.speaker).or_default().push(u);
        }
        pool
    }

    /// Structural checks that need no audio.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for e in &self.examples {
            if !ids.insert(&e.id) {
                return Err(Error::Manifest(format!("duplicate example id {}", e.id)));
            }
            if e.target_speaker == e.interferer_speaker {
                return Err(Error::Manifest(format!("{}: both speakers are {}", e.id, e.target_speaker)));
            }
            if e.reference_path == e.target_path || e.interferer_reference_path == e.interferer_path {
                return Err(Error::Manifest(format!("{}: reference repeats the mixed utterance", e.id)));
            }
        }
        let seen: BTreeSet<u32> = self
            .speakers(Split::Train)
            .union(&self.speakers(Split::Dev))
            .copied()
            .collect();
        let overlap: Vec<u32> = seen.intersection(&self.speakers(Split::Test)).copied().collect();
        if !overlap.is_empty() {
            return Err(Error::Manifest(format!("test speakers {overlap:?} also appear in train/dev")));
        }
        Ok(())
    }

    /// Re-reads every example and checks additivity and the recorded level.
    pub fn verify_audio(&self) -> Result<()> {
        for e in &self.examples {
            let m = read_wav(self.resolve(&e.mixture_path))?;
            let t = read_wav(self.resolve(&e.target_path))?;
            let i = read_wav(self.resolve(&e.interferer_path))?;
            if m.len() != t.len() || m.len() != i.len() {
                return Err(Error::Manifest(format!("{}: stored lengths differ", e.id)));
            }
            let exact = m
                .samples()
                .iter()
                .zip(t.samples().iter().zip(i.samples()))
                .all(|(&m, (&t, &i))| (t as f32 + i as f32) as f64 == m);
            if !exact {
                return Err(Error::Manifest(format!("{}: mixture is not target + interferer", e.id)));
            }
            if (snr_db(&t, &i) - e.snr_db).abs() > 1e-9 {
                return Err(Error::Manifest(format!("{}: level differs from the record", e.id)));
            }
        }
        Ok(())
    }

    /// Fresh reference utterances for every example, never the mixed one.
    pub fn resample_references(&self, epoch_seed: u64) -> Result<Vec<ReferenceAssignment>> {
        let pool = self.pool();
        let pick = |speaker: u32, avoid: usize, rng: &mut ChaCha8Rng| -> Result<String> {
            let options: Vec<&&Utterance> = pool
                .get(&speaker)
                .map(|v| v.iter().filter(|u| u.index != avoid).collect())
                .unwrap_or_default();
            options
                .choose(rng)
                .map(|u| u.path.clone())
                .ok_or_else(|| Error::Manifest(format!("speaker {speaker} has a single utterance")))
        };
        self.examples
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let mut rng = rng_for(epoch_seed, "reference", k as u64);
                Ok(ReferenceAssignment {
                    target: pick(e.target_speaker, e.target_utterance, &mut rng)?,
                    interferer: pick(e.interferer_speaker, e.interferer_utterance, &mut rng)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceAssignment {
    pub target: String,
    pub interferer: String,
}

fn utterance_path(speaker: u32, index: usize) -> String {
    format!("utterances/spk{speaker:03}_{index:02}.wav")
}

/// Writes a complete corpus under `root` and returns its manifest.
pub fn build_corpus(spec: &CorpusSpec, root: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let root = root.as_ref().to_path_buf();
    for dir in ["utterances", "train", "dev", "test"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let train_ids: Vec<u32> = (0..spec.train_speakers as u32).collect();
    let test_ids: Vec<u32> = (0..spec.test_speakers as u32).map(|i| i + spec.train_speakers as u32).collect();

    let mut audio: BTreeMap<(u32, usize), AudioSignal> = BTreeMap::new();
    let mut utterances = Vec::new();
    let mut speakers = Vec::new();
    for &id in train_ids.iter().chain(&test_ids) {
        let speaker = SyntheticSpeaker::new(spec.seed, id);
        speakers.push(speaker.clone());
        let mut rng = rng_for(spec.seed, "durations", id as u64);
        for index in 0..spec.utterances_per_speaker {
            let duration = rng.gen_range(spec.min_duration..=spec.max_duration);
            let sig = synth_voice(&speaker, duration, index as u64)?.quantized_f32();
            let path = utterance_path(id, index);
            write_wav(root.join(&path), &sig, WavEncoding::Float32)?;
            audio.insert((id, index), sig);
            utterances.push(Utterance {
                speaker: id,
                index,
                path,
            });
        }
    }

    let mut examples = Vec::new();
    for (split, count) in [(Split::Train, spec.train), (Split::Dev, spec.dev), (Split::Test, spec.test)] {
        let ids = if split == Split::Test { &test_ids } else { &train_ids };
        for k in 0..count {
            let mut rng = rng_for(spec.seed, split.name(), k as u64);
            let pair: Vec<u32> = ids.choose_multiple(&mut rng, 2).copied().collect();
            let (ts, is) = (pair[0], pair[1]);
            let n = spec.utterances_per_speaker;
            let tu = rng.gen_range(0..n);
            let iu = rng.gen_range(0..n);
            let tr = (tu + rng.gen_range(1..n)) % n;
            let ir = (iu + rng.gen_range(1..n)) % n;
            let requested = rng.gen_range(spec.snr_range.0..=spec.snr_range.1);
            let m = mix(&audio[&(ts, tu)], &audio[&(is, iu)], requested, spec.mix_mode)?;
            // Store float32 values whose float32 sum is the stored mixture.
            let t32 = m.target.quantized_f32();
            let i32 = m.interferer.quantized_f32();
            let mix32: Vec<f64> = t32
                .samples()
                .iter()
                .zip(i32.samples())
                .map(|(&a, &b)| (a as f32 + b as f32) as f64)
                .collect();
            let mix32 = AudioSignal::new(mix32, SAMPLE_RATE)?;
            let id = format!("{}_{k:05}", split.name());
            let rel = |what: &str| format!("{}/{id}_{what}.wav", split.name());
            write_wav(root.join(rel("mix")), &mix32, WavEncoding::Float32)?;
            write_wav(root.join(rel("target")), &t32, WavEncoding::Float32)?;
            write_wav(root.join(rel("interf")), &i32, WavEncoding::Float32)?;
            examples.push(ExampleRecord {
                id: id.clone(),
                split,
                mixture_path: rel("mix"),
                target_path: rel("target"),
                reference_path: utterance_path(ts, tr),
                target_speaker: ts,
                interferer_speaker: is,
                snr_db: snr_db(&t32, &i32),
                requested_snr_db: requested,
                interferer_path: rel("interf"),
                interferer_reference_path: utterance_path(is, ir),
                target_utterance: tu,
                interferer_utterance: iu,
            });
        }
    }
    let manifest = Manifest {
        root,
        examples,
        utterances,
        speakers,
    };
    manifest.validate()?;
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, StftConfig};

    fn corr(a: &AudioSignal, b: &AudioSignal) -> f64 {
        let n = a.len().min(b.len());
        let (x, y) = (&a.samples()[..n], &b.samples()[..n]);
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx: f64 = x.iter().map(|v| v * v).sum();
        let ny: f64 = y.iter().map(|v| v * v).sum();
        dot / (nx * ny).sqrt()
    }

    /// Level-free long-term spectrum: mean log power per bin, centred.
    fn avg_log_spectrum(s: &AudioSignal) -> Vec<f64> {
        let spec = stft(s, &StftConfig::narrowband()).unwrap();
        let mut acc = vec![0.0; spec.bins()];
        for t in 0..spec.frames() {
            for (k, v) in acc.iter_mut().enumerate() {
                *v += spec.get(t, k).norm_sqr();
            }
        }
        let log: Vec<f64> = acc.iter().map(|p| (p / spec.frames() as f64 + 1e-10).log10()).collect();
        let mean = log.iter().sum::<f64>() / log.len() as f64;
        log.iter().map(|v| v - mean).collect()
    }

    #[test]
    fn voices_are_deterministic_and_bounded() {
        let spk = SyntheticSpeaker::new(1, 3);
        let a = synth_voice(&spk, 4.0, 7).unwrap();
        let b = synth_voice(&spk, 4.0, 7).unwrap();
        assert_eq!(a.len(), 32000);
        assert_eq!(a.samples(), b.samples());
        assert!(a.peak() <= 0.9 && a.peak() > 0.1);
        assert!(synth_voice(&spk, 0.4, 0).is_err());
        assert!(synth_voice(&spk, 31.0, 0).is_err());
    }

    fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        1.0 - dot / (na * nb)
    }

    #[test]
    fn speakers_differ() {
        let voices: Vec<AudioSignal> = (0..16)
            .map(|id| synth_voice(&SyntheticSpeaker::new(0, id), 6.0, 1).unwrap())
            .collect();
        let spectra: Vec<Vec<f64>> = voices.iter().map(avg_log_spectrum).collect();
        for i in 0..voices.len() {
            for j in i + 1..voices.len() {
                assert!(corr(&voices[i], &voices[j]).abs() < 0.5);
                let dist = cosine_distance(&spectra[i], &spectra[j]);
                assert!(dist > 0.1, "speakers {i} and {j}: cosine distance {dist}");
            }
        }
    }

    #[test]
    fn mixing_hits_the_level_and_adds_up() {
        let t = synth_voice(&SyntheticSpeaker::new(2, 0), 2.0, 0).unwrap();
        let i = synth_voice(&SyntheticSpeaker::new(2, 1), 3.0, 0).unwrap();
        for snr in [0.0, 2.5, 5.0] {
            let m = mix(&t, &i, snr, MixMode::Max).unwrap();
            assert_eq!(m.mixture.len(), 24000);
            assert!((snr_db(&m.target, &m.interferer) - snr).abs() < 1e-9);
            for k in 0..m.mixture.len() {
                assert_eq!(m.mixture.samples()[k], m.target.samples()[k] + m.interferer.samples()[k]);
            }
        }
        let m = mix(&t, &i, 5.0, MixMode::Min).unwrap();
        assert_eq!(m.mixture.len(), 16000);
        let ratio = m.target.energy() / m.interferer.energy();
        assert!((ratio - 10f64.powf(0.5)).abs() < 1e-9);
        let silent = AudioSignal::zeros(100, 8000).unwrap();
        assert!(matches!(mix(&silent, &i, 0.0, MixMode::Max), Err(Error::ZeroEnergy(_))));
    }

    #[test]
    fn corpus_structure_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = CorpusSpec::desk(6, 2, 2, 11);
        spec.min_duration = 0.6;
        spec.max_duration = 0.8;
        let m = build_corpus(&spec, dir.path().join("a")).unwrap();
        assert_eq!(m.examples.len(), 10);
        m.verify_audio().unwrap();
        let again = Manifest::load(dir.path().join("a")).unwrap();
        assert_eq!(again.examples, m.examples);
        build_corpus(&spec, dir.path().join("b")).unwrap();
        let a = fs::read(dir.path().join("a").join(MANIFEST_FILE)).unwrap();
        let b = fs::read(dir.path().join("b").join(MANIFEST_FILE)).unwrap();
        assert_eq!(a, b);

        let r1 = m.resample_references(1).unwrap();
        assert_eq!(r1, m.resample_references(1).unwrap());
        let r2 = m.resample_references(2).unwrap();
        assert_ne!(r1, r2);
        for (e, r) in m.examples.iter().zip(&r1) {
            assert_ne!(r.target, utterance_path(e.target_speaker, e.target_utterance));
            assert!(r.target.contains(&format!("spk{:03}", e.target_speaker)));
        }

        let mut bad = m.clone();
        bad.examples[0].split = Split::Test;
        assert!(matches!(bad.validate(), Err(Error::Manifest(_))));
    }
}
