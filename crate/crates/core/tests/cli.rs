use std::path::Path;
use std::process::{Command, Output};

use gmvc::conversion::ConversionRecord;

fn gmvc(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmvc"))
        .current_dir(cwd)
        .args(args)
        .output()
        .unwrap()
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = gmvc(cwd, args);
    assert!(
        out.status.success(),
        "gmvc {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &[&str] = &[
    "--latent-dim", "4", "--k-singers", "2", "--k-techniques", "2", "--filters", "8", "--fen-hidden", "8",
    "--bottleneck", "8", "--lstm-hidden", "4", "--batch-size", "4", "--lr", "1e-3",
];

fn synth(dir: &Path) {
    ok(dir, &["synth", "--seed", "3", "--out-dir", "data", "--singers", "2", "--techniques", "2", "--vowels", "1", "--per-class", "2"]);
}

fn train(dir: &Path, out: &str, steps: &str, extra: &[&str]) {
    let mut args = vec!["train", "--manifest", "data/manifest.csv", "--out-dir", out, "--variant", "M2", "--max-steps", steps, "--seed", "1"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn unknown_flag_is_a_user_error() {
    let d = tempfile::tempdir().unwrap();
    let out = gmvc(d.path(), &["synth", "--out-dir", "x", "--colour", "red"]);
    assert_eq!(out.status.code(), Some(1));
    let out = gmvc(d.path(), &["train", "--manifest", "missing.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gmvc:"));
}

#[test]
fn every_command_documents_seed() {
    let d = tempfile::tempdir().unwrap();
    for cmd in ["prepare", "synth", "train", "train-eval", "convert", "morph", "evaluate", "gradcheck"] {
        let out = gmvc(d.path(), &[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--seed"), "{cmd}");
    }
}

#[test]
fn synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path());
    synth(b.path());
    let manifest = std::fs::read_to_string(a.path().join("data/manifest.csv")).unwrap();
    assert_eq!(manifest, std::fs::read_to_string(b.path().join("data/manifest.csv")).unwrap());
    for line in manifest.lines().skip(1) {
        let rel = line.split(',').nth(1).unwrap();
        assert_eq!(
            std::fs::read(a.path().join("data").join(rel)).unwrap(),
            std::fs::read(b.path().join("data").join(rel)).unwrap()
        );
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    train(d.path(), "full", "6", &[]);
    train(d.path(), "part", "3", &[]);
    train(d.path(), "part", "6", &["--resume"]);
    for f in ["checkpoint.gmvc", "train_log.csv"] {
        assert_eq!(
            std::fs::read(d.path().join("full").join(f)).unwrap(),
            std::fs::read(d.path().join("part").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn converting_to_the_detected_source_is_identity() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    train(d.path(), "run", "4", &[]);
    let base = [
        "convert", "--run", "run", "--manifest", "data/manifest.csv", "--id", "s01_t1_v0_1", "--attribute", "technique",
        "--strategy", "c-sequence", "--seed", "0",
    ];
    let run = |extra: &[&str]| {
        let mut v = base.to_vec();
        v.extend_from_slice(extra);
        ok(d.path(), &v);
    };
    run(&["--target", "0", "--lambda", "0", "--out-dir", "zero"]);
    let json = std::fs::read_to_string(d.path().join("zero/s01_t1_v0_1_technique0_c-sequence.json")).unwrap();
    let rec: Vec<ConversionRecord> = serde_json::from_str(&json).unwrap();
    let src = rec[0].detected_sources[0].to_string();
    run(&["--target", &src, "--lambda", "1", "--out-dir", "same"]);
    let a = std::fs::read(d.path().join("zero/s01_t1_v0_1_technique0_c-sequence.mel")).unwrap();
    let b = std::fs::read(d.path().join(format!("same/s01_t1_v0_1_technique{src}_c-sequence.mel"))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn morph_writes_every_step_and_a_grid() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    train(d.path(), "run", "2", &[]);
    ok(
        d.path(),
        &[
            "morph", "--run", "run", "--manifest", "data/manifest.csv", "--id", "s00_t0_v0_0", "--attribute", "singer",
            "--target", "1", "--steps", "3", "--out-dir", "morph",
        ],
    );
    let names: Vec<String> = std::fs::read_dir(d.path().join("morph"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".mel")).count(), 3);
    let pgm = std::fs::read(d.path().join("morph/s00_t0_v0_0_singer1_c-chunk.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
}

#[test]
fn gradcheck_gate_on_tiny_config() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("tiny.cfg"),
        "variant = M3\nlatent_dim = 4\nfilters = 16\nfen_hidden = 16\nbottleneck = 8\nlstm_hidden = 8\nk_singers = 3\nk_techniques = 2\n",
    )
    .unwrap();
    let out = ok(d.path(), &["gradcheck", "--config", "tiny.cfg", "--coords", "4"]);
    assert!(out.contains("max relative error"), "{out}");
    // a step this large lands far outside the linear regime
    let out = gmvc(d.path(), &["gradcheck", "--config", "tiny.cfg", "--coords", "4", "--eps", "0.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn prepare_caches_wav_manifest() {
    let d = tempfile::tempdir().unwrap();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 22_050,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(d.path().join("a.wav"), spec).unwrap();
    for i in 0..22_050 {
        let v = (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 22_050.0).sin();
        w.write_sample((v * 20_000.0) as i16).unwrap();
    }
    w.finalize().unwrap();
    std::fs::write(
        d.path().join("wav.csv"),
        "id,path,singer,technique,vowel,style,split\na,a.wav,0,0,0,scale,train\n",
    )
    .unwrap();
    ok(d.path(), &["prepare", "--manifest", "wav.csv", "--out-dir", "cache", "--jobs", "1"]);
    let m = gmvc::features::read_mel(&d.path().join("cache/mels/a.mel")).unwrap();
    assert_eq!((m.n_frames, m.n_mels), (83, 96));
    let manifest = gmvc::features::Manifest::load(&d.path().join("cache/manifest.csv")).unwrap();
    assert_eq!(manifest.entries[0].path, Path::new("mels/a.mel"));
}
