//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line and
//! the process exits non-zero if any criterion fails. Criteria run one after
//! another so their wall-clock budgets are measured without interference.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tse_core::cmha::{AttentionStyle, Cmha, CmhaConfig, Fusion, FusionConfig, FusionMethod};
use tse_core::datagen::{build_corpus, snr_db, CorpusSpec, Manifest, Split};
use tse_core::dsp::{istft, si_sdr, stft, StftConfig};
use tse_core::eval::evaluate;
use tse_core::gridnet::{GridBlock, GridConfig};
use tse_core::models::{Model, ModelConfig};
use tse_core::nn::gradcheck::check_gradients;
use tse_core::nn::{Builder, ParamStore};
use tse_core::training::{si_sdr_loss, train, TrainConfig, Trainer, LAST_CHECKPOINT};
use tse_core::{AudioSignal, FeatureLayout, FeatureMap};

const PARAM_TOL: f64 = 0.05;
const STFT_TOL: f64 = 1e-6;
const DB_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const OVERFIT_DB: f64 = 5.0;
const OVERFIT_MAX_STEPS: usize = 500;
const DESK_DB: f64 = 3.0;
const RESUME_TOL: f64 = 1e-6;

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, n: usize, name: &str, ok: bool, detail: String) {
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("criterion {n} {tag} {name}: {detail}");
        self.lines.push((n, ok, name.to_string()));
    }
}

fn noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(noise(n, seed), shape, &Device::Cpu).unwrap()
}

fn signal(v: Vec<f64>) -> AudioSignal {
    AudioSignal::new(v, 8000).unwrap()
}

fn tone(secs: f64, hz: f64) -> AudioSignal {
    let n = (secs * 8000.0).round() as usize;
    signal((0..n).map(|i| 0.5 * (2.0 * PI * hz * i as f64 / 8000.0).sin() + 0.01 * ((i * 7919) % 13) as f64).collect())
}

fn parameter_counts(r: &mut Report) {
    let start = Instant::now();
    let cases = [
        ("sepformer 4-layer cmha", ModelConfig::sepformer((4, 8, 1024), (8, 8, 1024)), 19.7e6),
        ("sepformer 1-layer cmha", ModelConfig::sepformer((1, 8, 1024), (8, 8, 1024)), 18.2e6),
        ("tfgridnet E=128", ModelConfig::tfgridnet(4, 512, 1, 128), 15.2e6),
        ("tfgridnet E=32 4 heads", ModelConfig::tfgridnet(4, 512, 4, 32), 14.3e6),
        ("tfgridnet E=32 8 heads", ModelConfig::tfgridnet(8, 512, 4, 32), 14.3e6),
        ("tfgridnet E=32 8 heads ffn 1024", ModelConfig::tfgridnet(8, 1024, 4, 32), 14.3e6),
    ];
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, cfg, expected) in cases {
        let n = Model::build(&cfg).unwrap().count_parameters_profiled() as f64;
        let rel = (n - expected).abs() / expected;
        ok &= rel <= PARAM_TOL;
        detail.push(format!("{name} {:.2}M vs {:.1}M", n / 1e6, expected / 1e6));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    r.record(1, "parameter counts", ok, format!("{} ({secs:.1}s)", detail.join(", ")));
}

fn length_decoupling(r: &mut Report) {
    let start = Instant::now();
    let mixture = tone(4.0, 220.0);
    let mut ok = true;
    let mut detail = Vec::new();
    for cfg in [ModelConfig::small_sepformer(64, 100), ModelConfig::small_tfgridnet(16, 32)] {
        let model = Model::build(&cfg).unwrap();
        let mut lens = BTreeSet::new();
        for secs in [0.5, 7.3, 20.0] {
            match model.extract(&mixture, &tone(secs, 150.0)) {
                Ok(out) => {
                    lens.insert(out.len());
                }
                Err(e) => {
                    ok = false;
                    detail.push(format!("{secs}s reference failed: {e}"));
                }
            }
        }
        ok &= lens.len() == 1 && lens.contains(&mixture.len());
        detail.push(format!("{:?} output lengths {lens:?}", cfg.family));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    r.record(2, "length decoupling", ok, format!("{} ({secs:.1}s)", detail.join(", ")));
}

fn dsp_suite(r: &mut Report) {
    let start = Instant::now();
    let cfg = StftConfig::narrowband();
    let x = signal(noise(32000, 3));
    let back = istft(&stft(&x, &cfg).unwrap(), x.len()).unwrap();
    let err = back.samples().iter().zip(x.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let s = signal(noise(4000, 4));
    let e = signal(s.samples().iter().zip(noise(4000, 5)).map(|(a, n)| a + 0.3 * n).collect());
    let base = si_sdr(&e, &s).unwrap();
    let scale_dev = [1e-3, 0.5, 7.0, 1e3]
        .iter()
        .map(|&g| (si_sdr(&e.scaled(g).unwrap(), &s).unwrap() - base).abs())
        .fold(0.0, f64::max);

    // Target (1, 0), estimate (1, 0.1): projection energy 1, residual 0.01.
    let hand = si_sdr(&signal(vec![1.0, 0.1]), &signal(vec![1.0, 0.0])).unwrap();

    let secs = start.elapsed().as_secs_f64();
    let ok = err < STFT_TOL && scale_dev < DB_TOL && (hand - 20.0).abs() < DB_TOL && secs < 30.0;
    r.record(
        3,
        "dsp suite",
        ok,
        format!("round trip {err:.2e}, scale deviation {scale_dev:.2e} dB, hand case {hand:.12} dB ({secs:.1}s)"),
    );
}

fn gradient_suite(r: &mut Report) {
    let start = Instant::now();
    let mut detail = Vec::new();
    let mut ok = true;

    let mut store = ParamStore::new(1, DType::F64);
    let film = Fusion::new(&mut Builder::new(&mut store, true), FusionConfig { method: FusionMethod::Film, dim: 4 }).unwrap();
    let e_m = FeatureMap::new(randn(&[1, 4, 6], 1), FeatureLayout::Time, 100.0).unwrap();
    let e_s = FeatureMap::new(randn(&[1, 4, 6], 2), FeatureLayout::Time, 100.0).unwrap();
    let target = randn(&[1, 4, 6], 3);
    let g = check_gradients(
        &store,
        || Ok((film.forward(&e_m, &e_s)?.into_data() - &target)?.sqr()?.sum_all()?),
        8,
        0,
    )
    .unwrap();
    ok &= g.rel_error < GRAD_TOL;
    detail.push(format!("film {:.1e}", g.rel_error));

    let mut store = ParamStore::new(2, DType::F64);
    let cfg = CmhaConfig { layers: 1, heads: 2, ffn_dim: 8, model_dim: 4, style: AttentionStyle::TimeTransformer };
    let cmha = Cmha::new(&mut Builder::new(&mut store, true), cfg, None).unwrap();
    let e_m = FeatureMap::new(randn(&[1, 4, 5], 4), FeatureLayout::Time, 100.0).unwrap();
    let e_r = FeatureMap::new(randn(&[1, 4, 7], 5), FeatureLayout::Time, 100.0).unwrap();
    let target = randn(&[1, 4, 5], 6);
    let g = check_gradients(
        &store,
        || Ok((cmha.forward(&e_m, &e_r, None)?.into_data() - &target)?.sqr()?.sum_all()?),
        6,
        1,
    )
    .unwrap();
    ok &= g.rel_error < GRAD_TOL;
    detail.push(format!("cmha {:.1e}", g.rel_error));

    let mut store = ParamStore::new(3, DType::F64);
    let grid = GridConfig { blocks: 1, kernel: 2, hop: 1, hidden: 3, heads: 2, qk_budget: 8 };
    let block = GridBlock::new(&mut Builder::new(&mut store, true), 2, 3, &grid).unwrap();
    let x = randn(&[1, 2, 3, 4], 7);
    let target = randn(&[1, 2, 3, 4], 8);
    let g = check_gradients(&store, || Ok((block.forward(&x, None)? - &target)?.sqr()?.sum_all()?), 6, 2).unwrap();
    ok &= g.rel_error < GRAD_TOL;
    detail.push(format!("grid block {:.1e}", g.rel_error));

    let s = Tensor::from_vec(noise(64, 9), (1, 64), &Device::Cpu).unwrap();
    let e0 = noise(64, 10);
    let var = Var::from_tensor(&Tensor::from_vec(e0.clone(), (1, 64), &Device::Cpu).unwrap()).unwrap();
    let grads = si_sdr_loss(var.as_tensor(), &s).unwrap().backward().unwrap();
    let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let loss_at = |v: Vec<f64>| {
        let t = Tensor::from_vec(v, (1, 64), &Device::Cpu).unwrap();
        si_sdr_loss(&t, &s).unwrap().to_scalar::<f64>().unwrap()
    };
    let (mut diff, mut norm) = (0.0, 0.0);
    for i in 0..64 {
        let (mut up, mut down) = (e0.clone(), e0.clone());
        up[i] += 1e-6;
        down[i] -= 1e-6;
        let num = (loss_at(up) - loss_at(down)) / 2e-6;
        diff += (num - analytic[i]).powi(2);
        norm += num.powi(2);
    }
    let rel = (diff / norm).sqrt();
    ok &= rel < GRAD_TOL;
    detail.push(format!("si-sdr loss {rel:.1e}"));

    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 300.0;
    r.record(4, "gradient suite", ok, format!("{} ({secs:.1}s)", detail.join(", ")));
}

/// Trains on four mixtures until the train-set SI-SDRi reaches the goal or
/// the step budget runs out. Returns (best SI-SDRi, steps).
fn overfit(cfg: &ModelConfig, manifest: &Manifest, out: &Path) -> (f64, usize) {
    let mut tc = TrainConfig::new(usize::MAX, 0);
    tc.lr = 3e-3;
    tc.batch_size = 4;
    tc.both_speakers = false;
    tc.patience = 10_000;
    tc.max_steps = Some(OVERFIT_MAX_STEPS);
    let mut t = Trainer::new(Model::build(cfg).unwrap(), manifest, &tc, out).unwrap();
    let mut best = f64::NEG_INFINITY;
    while t.state().step < OVERFIT_MAX_STEPS {
        t.run_epoch().unwrap();
        if t.state().step % 25 == 0 {
            best = best.max(evaluate(t.model(), manifest, Split::Train, false).unwrap().mean.si_sdri);
            if best >= OVERFIT_DB {
                break;
            }
        }
    }
    (best, t.state().step)
}

fn overfit_runs(r: &mut Report, dir: &Path) {
    let start = Instant::now();
    let mut spec = CorpusSpec::desk(4, 1, 0, 1);
    spec.min_duration = 0.5;
    spec.max_duration = 0.5;
    let manifest = build_corpus(&spec, dir.join("overfit_corpus")).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, base) in [
        ("sepformer", ModelConfig::small_sepformer(64, 100)),
        ("tfgridnet", ModelConfig::small_tfgridnet(16, 32)),
    ] {
        for fusion in [FusionMethod::Film, FusionMethod::Concat] {
            let cfg = base.clone().with_fusion(fusion);
            let (db, steps) = overfit(&cfg, &manifest, &dir.join(format!("overfit_{name}_{fusion:?}")));
            ok &= db >= OVERFIT_DB;
            detail.push(format!("{name}/{fusion:?} {db:.2} dB after {steps} steps"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 1800.0;
    r.record(5, "overfit", ok, format!("{} ({secs:.0}s)", detail.join(", ")));
}

fn desk_generalization(r: &mut Report, dir: &Path) {
    let start = Instant::now();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let spec: CorpusSpec = toml::from_str(&fs::read_to_string(root.join("corpus_desk.toml")).unwrap()).unwrap();
    let manifest = build_corpus(&spec, dir.join("desk_corpus")).unwrap();
    let tc = TrainConfig::load(root.join("train_desk.toml")).unwrap();
    let mut scores = Vec::new();
    for name in ["desk_sepformer", "desk_tfgridnet"] {
        let cfg = ModelConfig::load(root.join(format!("{name}.toml"))).unwrap();
        let out = train(Model::build(&cfg).unwrap(), &manifest, &tc, dir.join(name)).unwrap();
        let best = Model::load(&out.best_checkpoint, Some(&cfg)).unwrap();
        scores.push(evaluate(&best, &manifest, Split::Test, false).unwrap().mean.si_sdri);
    }
    let (sep, tf) = (scores[0], scores[1]);
    let secs = start.elapsed().as_secs_f64();
    let ok = tf > DESK_DB && tf >= sep && secs < 7200.0;
    r.record(
        6,
        "desk generalization",
        ok,
        format!("test SI-SDRi tfgridnet {tf:.2} dB, sepformer {sep:.2} dB ({secs:.0}s)"),
    );
}

fn protocol_fidelity(r: &mut Report, dir: &Path) {
    let start = Instant::now();
    let spec = CorpusSpec::desk(32, 8, 8, 0);
    let m = build_corpus(&spec, dir.join("corpus48_a")).unwrap();
    let mut worst_snr = 0.0f64;
    let mut additive = true;
    for e in &m.examples {
        let mix = m.read_audio(&e.mixture_path).unwrap();
        let t = m.read_audio(&e.target_path).unwrap();
        let i = m.read_audio(&e.interferer_path).unwrap();
        worst_snr = worst_snr.max((snr_db(&t, &i) - e.snr_db).abs());
        additive &= mix
            .samples()
            .iter()
            .zip(t.samples().iter().zip(i.samples()))
            .all(|(&x, (&a, &b))| x as f32 == (a as f32 + b as f32));
    }
    let train: BTreeSet<u32> = m.speakers(Split::Train).union(&m.speakers(Split::Dev)).copied().collect();
    let test = m.speakers(Split::Test);
    let disjoint = train.is_disjoint(&test) && train.len() == 12 && test.len() == 4;
    let counts = [Split::Train, Split::Dev, Split::Test].map(|s| m.split(s).len());
    build_corpus(&spec, dir.join("corpus48_b")).unwrap();
    let files = |d: &str| {
        let mut v = Vec::new();
        for sub in ["", "train", "dev", "test", "utterances"] {
            let mut names: Vec<_> = fs::read_dir(dir.join(d).join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.is_file())
                .collect();
            names.sort();
            v.extend(names.into_iter().map(|p| (p.file_name().unwrap().to_owned(), fs::read(p).unwrap())));
        }
        v
    };
    let deterministic = files("corpus48_a") == files("corpus48_b");
    let secs = start.elapsed().as_secs_f64();
    let ok = worst_snr < DB_TOL
        && additive
        && disjoint
        && counts == [32, 8, 8]
        && deterministic
        && m.validate().is_ok()
        && secs < 60.0;
    r.record(
        7,
        "protocol fidelity",
        ok,
        format!(
            "snr error {worst_snr:.1e} dB, additive {additive}, disjoint {disjoint}, splits {counts:?}, deterministic {deterministic} ({secs:.1}s)"
        ),
    );
}

fn reproducibility(r: &mut Report, dir: &Path) {
    let start = Instant::now();
    let mut spec = CorpusSpec::desk(4, 2, 2, 5);
    spec.min_duration = 0.5;
    spec.max_duration = 0.7;
    let manifest = build_corpus(&spec, dir.join("repro_corpus")).unwrap();
    let cfg = ModelConfig::small_sepformer(16, 20);
    let mut tc = TrainConfig::new(4, 21);
    tc.lr = 1e-3;
    tc.segment_seconds = 0.25;

    let a = train(Model::build(&cfg).unwrap(), &manifest, &tc, dir.join("repro_a")).unwrap();
    let b = train(Model::build(&cfg).unwrap(), &manifest, &tc, dir.join("repro_b")).unwrap();
    let log = |h: &[tse_core::training::EpochMetrics]| h.iter().map(|m| (m.train_loss, m.val_loss, m.lr)).collect::<Vec<_>>();
    let identical = log(&a.history) == log(&b.history);

    let path = dir.join("roundtrip.safetensors");
    a.model.save(&path, 7).unwrap();
    let loaded = Model::load(&path, Some(&cfg)).unwrap();
    let params = |m: &Model| {
        m.store()
            .iter()
            .map(|(n, v)| (n.to_string(), v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()))
            .collect::<Vec<_>>()
    };
    let bit_exact = params(&a.model)
        .iter()
        .zip(params(&loaded))
        .all(|((n1, v1), (n2, v2))| {
            n1 == &n2 && v1.len() == v2.len() && v1.iter().zip(&v2).all(|(x, y)| x.to_bits() == y.to_bits())
        });

    let mut half = tc.clone();
    half.max_epochs = 2;
    train(Model::build(&cfg).unwrap(), &manifest, &half, dir.join("repro_c")).unwrap();
    let resumed = Trainer::resume(dir.join("repro_c").join(LAST_CHECKPOINT), &manifest, &tc, dir.join("repro_c"))
        .unwrap()
        .run()
        .unwrap();
    let mut gap = 0.0f64;
    for (x, y) in a.history.iter().zip(&resumed.history) {
        gap = gap.max((x.train_loss - y.train_loss).abs()).max((x.val_loss - y.val_loss).abs());
    }
    for ((_, x), (_, y)) in params(&a.model).iter().zip(params(&resumed.model)) {
        for (p, q) in x.iter().zip(&y) {
            gap = gap.max((p - q).abs() as f64);
        }
    }
    let ok = identical && bit_exact && gap < RESUME_TOL && resumed.history.len() == a.history.len();
    let secs = start.elapsed().as_secs_f64();
    r.record(
        8,
        "reproducibility",
        ok,
        format!("identical logs {identical}, bit-exact checkpoint {bit_exact}, resume gap {gap:.1e} ({secs:.1}s)"),
    );
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Report { lines: Vec::new() };
    parameter_counts(&mut r);
    length_decoupling(&mut r);
    dsp_suite(&mut r);
    gradient_suite(&mut r);
    overfit_runs(&mut r, dir.path());
    desk_generalization(&mut r, dir.path());
    protocol_fidelity(&mut r, dir.path());
    reproducibility(&mut r, dir.path());
    let failed: Vec<_> = r.lines.iter().filter(|l| !l.1).map(|l| format!("{} ({})", l.0, l.2)).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
    println!("acceptance: {} of {} criteria passed", r.lines.len(), r.lines.len());
}
