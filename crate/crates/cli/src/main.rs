use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tse_core::cmha::FusionMethod;
use tse_core::datagen::{build_corpus, CorpusSpec, Manifest, MixMode, Split};
use tse_core::eval::{evaluate, export_histogram, EvalReport};
use tse_core::models::{Model, ModelConfig};
use tse_core::training::{TrainConfig, Trainer};
use tse_core::{read_wav, write_wav, Error, Result, WavEncoding};

/// Speaker-embedding-free target speaker extraction.
#[derive(Parser)]
#[command(name = "tse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-speaker corpus.
    Synth(SynthArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a corpus.
    Eval(EvalArgs),
    /// Extract the reference speaker from one mixture.
    Infer(InferArgs),
    /// Print the parameter count of a model config.
    Params(ParamsArgs),
    /// Write the SI-SDRi histogram of an evaluation report as CSV.
    Hist(HistArgs),
    /// Print a built-in model config as TOML.
    Preset(PresetArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML corpus description; the flags below are ignored when given.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    train: usize,
    #[arg(long, default_value_t = 8)]
    dev: usize,
    #[arg(long, default_value_t = 8)]
    test: usize,
    #[arg(long, default_value_t = 12)]
    train_speakers: usize,
    #[arg(long, default_value_t = 4)]
    test_speakers: usize,
    #[arg(long, default_value_t = 4)]
    utterances: usize,
    #[arg(long, default_value_t = 1.5)]
    min_duration: f64,
    #[arg(long, default_value_t = 2.5)]
    max_duration: f64,
    /// Truncate to the shorter utterance instead of zero-padding.
    #[arg(long)]
    truncate: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Model config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Training config (TOML); defaults apply otherwise.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Score each mixture once per speaker.
    #[arg(long)]
    both_speakers: bool,
    /// Refuse checkpoints written for a different config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-record CSV path.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Histogram CSV path.
    #[arg(long)]
    hist: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    checkpoint: PathBuf,
    mixture: PathBuf,
    reference: PathBuf,
    output: PathBuf,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct HistArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PresetArgs {
    /// One of: usef-sepformer, usef-tfgridnet, emb-baseline-sepformer,
    /// small-sepformer, small-tfgridnet.
    name: String,
    /// Fusion override (film or concat).
    #[arg(long)]
    fusion: Option<String>,
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = match a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        }
        None => CorpusSpec {
            train: a.train,
            dev: a.dev,
            test: a.test,
            train_speakers: a.train_speakers,
            test_speakers: a.test_speakers,
            utterances_per_speaker: a.utterances,
            min_duration: a.min_duration,
            max_duration: a.max_duration,
            snr_range: (0.0, 5.0),
            mix_mode: if a.truncate { MixMode::Min } else { MixMode::Max },
            seed: a.seed,
        },
    };
    let m = build_corpus(&spec, &a.out)?;
    m.verify_audio()?;
    println!("wrote {} examples to {}", m.examples.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let model_cfg = ModelConfig::load(&a.config)?;
    let mut cfg = match &a.train_config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::new(100, model_cfg.seed),
    };
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let manifest = Manifest::load(&a.corpus)?;
    let trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(ckpt, &manifest, &cfg, &a.out)?,
        None => Trainer::new(Model::build(&model_cfg)?, &manifest, &cfg, &a.out)?,
    };
    let out = trainer.run()?;
    for m in &out.history {
        println!(
            "epoch {:>3}  train {:>8.3}  val {:>8.3}  lr {:.2e}  {:.1}s",
            m.epoch, m.train_loss, m.val_loss, m.lr, m.wall_s
        );
    }
    println!("best checkpoint: {}", out.best_checkpoint.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let expected = a.config.as_ref().map(ModelConfig::load).transpose()?;
    let model = Model::load(&a.checkpoint, expected.as_ref())?;
    let manifest = Manifest::load(&a.corpus)?;
    let report = evaluate(&model, &manifest, a.split, a.both_speakers)?;
    if let Some(p) = &a.report {
        report.write_json(p)?;
    }
    if let Some(p) = &a.records {
        std::fs::write(p, report.records_csv()).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = &a.hist {
        export_histogram(&report, p)?;
    }
    let m = report.mean;
    println!("records: {}", m.count);
    println!("SI-SDR {:.3} dB  SI-SDRi {:.3} dB  SDR {:.3} dB  SDRi {:.3} dB", m.si_sdr, m.si_sdri, m.sdr, m.sdri);
    print!("{}", report.histogram.to_csv());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint, None)?;
    let mixture = read_wav(&a.mixture)?;
    let reference = read_wav(&a.reference)?;
    if mixture.sample_rate() != reference.sample_rate() {
        return Err(Error::SampleRateMismatch(mixture.sample_rate(), reference.sample_rate()));
    }
    let estimate = model.extract(&mixture, &reference)?;
    write_wav(&a.output, &estimate, WavEncoding::Float32)?;
    println!("wrote {} samples to {}", estimate.len(), a.output.display());
    Ok(())
}

fn params(a: ParamsArgs) -> Result<()> {
    let model = Model::build(&ModelConfig::load(&a.config)?)?;
    let profiled = model.count_parameters_profiled();
    println!("{profiled} ({:.2}M)", profiled as f64 / 1e6);
    println!("exact: {}", model.count_parameters());
    Ok(())
}

fn hist(a: HistArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.report).map_err(|e| Error::io(&a.report, e))?;
    let report: EvalReport = serde_json::from_str(&text)?;
    export_histogram(&report, &a.out)?;
    print!("{}", report.histogram.to_csv());
    Ok(())
}

fn preset(a: PresetArgs) -> Result<()> {
    let cfg = match a.name.as_str() {
        "usef-sepformer" => ModelConfig::usef_sepformer_best(),
        "usef-tfgridnet" => ModelConfig::usef_tfgridnet_best(),
        "emb-baseline-sepformer" => ModelConfig::emb_baseline_sepformer(),
        "small-sepformer" => ModelConfig::small_sepformer(64, 100),
        "small-tfgridnet" => ModelConfig::small_tfgridnet(16, 32),
        other => return Err(Error::config(format!("unknown preset {other:?}"))),
    };
    let cfg = match a.fusion.as_deref() {
        None => cfg,
        Some("film") => cfg.with_fusion(FusionMethod::Film),
        Some("concat") => cfg.with_fusion(FusionMethod::Concat),
        Some(other) => return Err(Error::config(format!("unknown fusion {other:?}"))),
    };
    print!("{}", cfg.to_toml()?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Params(a) => params(a),
        Command::Hist(a) => hist(a),
        Command::Preset(a) => preset(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
