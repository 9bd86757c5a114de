use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stftcodec::audio::{read_wav, write_wav, Audio, WavEncoding};
use stftcodec::codec::{CodecConfig, CodecModel};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stftcodec"));
    c.env_remove("STFTCODEC_CONFIG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn stftcodec")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tone(n: usize) -> Audio {
    Audio {
        samples: (0..n)
            .map(|i| 0.3 * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 48_000.0).sin())
            .collect(),
        sample_rate: 48_000,
    }
}

fn toy_model(dir: &Path) -> PathBuf {
    let path = dir.join("model.safetensors");
    CodecModel::new(CodecConfig::toy(), 7).unwrap().save(&path).unwrap();
    path
}

#[test]
fn inspect_reports_12_kbps_for_one_second() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let wav = dir.path().join("in.wav");
    let stfc = dir.path().join("in.stfc");
    write_wav(&wav, &tone(48_000), WavEncoding::Float32).unwrap();
    let out = run(&["encode", "--model", s(&model), "--in", s(&wav), "--out", s(&stfc)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["inspect", "--in", s(&stfc)]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("bitrate: 12000 bps"), "{text}");
    assert!(text.contains("codebooks: 8"), "{text}");
}

#[test]
fn encode_decode_restores_sample_count() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    for n in [1, 12_345, 15_960] {
        let wav = dir.path().join(format!("{n}.wav"));
        let stfc = dir.path().join(format!("{n}.stfc"));
        let back = dir.path().join(format!("{n}.out.wav"));
        write_wav(&wav, &tone(n), WavEncoding::Pcm16).unwrap();
        let enc = run(&["encode", "--model", s(&model), "--in", s(&wav), "--out", s(&stfc), "--codebooks", "2"]);
        assert!(enc.status.success(), "{}", String::from_utf8_lossy(&enc.stderr));
        let dec = run(&["decode", "--model", s(&model), "--in", s(&stfc), "--out", s(&back)]);
        assert!(dec.status.success(), "{}", String::from_utf8_lossy(&dec.stderr));
        let audio = read_wav(&back).unwrap();
        assert_eq!(audio.samples.len(), n);
        assert_eq!(audio.sample_rate, 48_000);
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["inspect", "--in", "x.stfc", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_override_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--data",
        s(dir.path()),
        "--out",
        s(&dir.path().join("run")),
        "--set",
        "train.no_such_key=3",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.no_such_key"));
}

#[test]
fn corrupt_stream_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.stfc");
    std::fs::write(&bad, b"not a bitstream").unwrap();
    let out = run(&["inspect", "--in", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let missing = run(&["inspect", "--in", s(&dir.path().join("missing.stfc"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn hash_mismatch_needs_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let other = dir.path().join("other.safetensors");
    CodecModel::new(CodecConfig::toy(), 8).unwrap().save(&other).unwrap();
    let wav = dir.path().join("in.wav");
    let stfc = dir.path().join("in.stfc");
    let back = dir.path().join("out.wav");
    write_wav(&wav, &tone(4_000), WavEncoding::Float32).unwrap();
    assert!(run(&["encode", "--model", s(&model), "--in", s(&wav), "--out", s(&stfc)]).status.success());
    let out = run(&["decode", "--model", s(&other), "--in", s(&stfc), "--out", s(&back)]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["decode", "--model", s(&other), "--in", s(&stfc), "--out", s(&back), "--allow-hash-mismatch"]);
    assert!(out.status.success());
}

#[test]
fn config_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nbogus = 1\n").unwrap();
    let out = bin()
        .env("STFTCODEC_CONFIG", &cfg)
        .args(["ablate", "--variants", "full", "--steps", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.bogus"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_wav(&data.join("a.wav"), &tone(20_000), WavEncoding::Float32).unwrap();
    let run_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--preset",
        "toy",
        "--data",
        s(&data),
        "--out",
        s(&run_dir),
        "--set",
        "train.max_steps=1",
        "--set",
        "train.batch_size=1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run_dir.join("checkpoint.safetensors");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run_dir.join("losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let report = dir.path().join("eval.csv");
    let out = run(&["eval", "--model", s(&ckpt), "--data", s(&data), "--report", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("file,lsd,vuv_f1,bitrate_bps"));
    assert!(csv.contains("a.wav,"));
}
