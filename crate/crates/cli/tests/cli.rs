use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tse_core::models::{Model, ModelConfig};
use tse_core::{write_wav, AudioSignal, WavEncoding};

fn tse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tse")).args(args).output().expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = ModelConfig::small_sepformer(8, 20);
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn params_prints_published_scale_count() {
    let o = tse(&["params", "--config", configs().join("usef_tfgridnet_paper.toml").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first: usize = stdout(&o).split_whitespace().next().unwrap().parse().unwrap();
    assert!((first as f64 - 15.2e6).abs() <= 0.05 * 15.2e6, "{first}");
}

#[test]
fn shipped_configs_parse() {
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("train_") || name.starts_with("corpus_") {
            continue;
        }
        ModelConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn bad_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "family = \"nope\"\n").unwrap();
    let o = tse(&["params", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn infer_rejects_mismatched_rates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::load(tiny_config(dir.path())).unwrap();
    let ckpt = dir.path().join("m.safetensors");
    Model::build(&cfg).unwrap().save(&ckpt, 0).unwrap();
    let mix = dir.path().join("mix.wav");
    let reference = dir.path().join("ref.wav");
    write_wav(&mix, &AudioSignal::new(vec![0.1; 4000], 8000).unwrap(), WavEncoding::Float32).unwrap();
    write_wav(&reference, &AudioSignal::new(vec![0.1; 4000], 16000).unwrap(), WavEncoding::Float32).unwrap();
    let out = dir.path().join("out.wav");
    let args = [ckpt.to_str().unwrap(), mix.to_str().unwrap(), reference.to_str().unwrap(), out.to_str().unwrap()];
    let o = tse(&[&["infer"], &args[..]].concat());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("8000") && err.contains("16000"), "{err}");
    assert!(!out.exists());

    write_wav(&reference, &AudioSignal::new(vec![0.1; 3000], 8000).unwrap(), WavEncoding::Float32).unwrap();
    let o = tse(&[&["infer"], &args[..]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(tse_core::read_wav(&out).unwrap().len(), 4000);
}

#[test]
fn synth_train_eval_hist_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let o = tse(&[
        "synth", "--out", &d("corpus"), "--train", "2", "--dev", "1", "--test", "8",
        "--min-duration", "0.5", "--max-duration", "0.6", "--seed", "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let train_cfg = dir.path().join("train.toml");
    std::fs::write(&train_cfg, "max_epochs = 1\nseed = 3\nsegment_seconds = 0.25\nlr = 0.001\n").unwrap();
    let model_cfg = tiny_config(dir.path());
    let o = tse(&[
        "train", "--config", model_cfg.to_str().unwrap(), "--corpus", &d("corpus"), "--out", &d("run"),
        "--train-config", train_cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("run/metrics.jsonl").exists());

    let o = tse(&[
        "eval", "--checkpoint", &d("run/best.safetensors"), "--corpus", &d("corpus"), "--split", "test",
        "--both-speakers", "--report", &d("report.json"), "--hist", &d("hist.csv"),
        "--config", model_cfg.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("records: 16"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d("report.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 16);

    let o = tse(&["hist", "--report", &d("report.json"), "--out", &d("hist2.csv")]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(d("hist.csv")).unwrap(), std::fs::read(d("hist2.csv")).unwrap());

    // A checkpoint checked against the wrong config is refused.
    let other = dir.path().join("other.toml");
    std::fs::write(&other, ModelConfig::small_sepformer(16, 20).to_toml().unwrap()).unwrap();
    let o = tse(&[
        "eval", "--checkpoint", &d("run/best.safetensors"), "--corpus", &d("corpus"),
        "--config", other.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("digest"));
}

#[test]
fn shipped_configs_match_presets() {
    for (preset, file) in [
        ("usef-sepformer", "usef_sepformer_paper.toml"),
        ("usef-tfgridnet", "usef_tfgridnet_paper.toml"),
        ("emb-baseline-sepformer", "emb_baseline_sepformer.toml"),
        ("small-sepformer", "desk_sepformer.toml"),
        ("small-tfgridnet", "desk_tfgridnet.toml"),
    ] {
        let o = tse(&["preset", preset]);
        assert!(o.status.success());
        assert_eq!(stdout(&o), std::fs::read_to_string(configs().join(file)).unwrap(), "{preset}");
    }
    assert!(!tse(&["preset", "nope"]).status.success());
}
