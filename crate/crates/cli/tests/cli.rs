use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ase_core::audio_io::{write_wav, DatasetManifest, ManifestEntry, Split};
use ase_core::synth::training_pair;

fn ase(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ase")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Asserts a failure with the given exit code and a single `ERROR <code>:` line.
fn fails(out: &Output, status: i32, code: &str) {
    assert_eq!(out.status.code(), Some(status), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("ERROR {code}:")), "{err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Eight pairs of 12,000 samples: six train, one val, one test.
fn dataset(dir: &Path) -> PathBuf {
    let mut entries = Vec::new();
    for i in 0..8 {
        let (d, r) = training_pair(12_000, 22050, 4000.0, 500 + i);
        let dp = dir.join(format!("deg_{i}.wav"));
        let rp = dir.join(format!("ref_{i}.wav"));
        write_wav(&d, &dp).unwrap();
        write_wav(&r, &rp).unwrap();
        let split = match i {
            0..=5 => Split::Train,
            6 => Split::Val,
            _ => Split::Test,
        };
        entries.push(ManifestEntry {
            split,
            degraded: dp,
            reference: rp,
        });
    }
    let path = dir.join("manifest.tsv");
    DatasetManifest { seed: 1, entries }.save(&path).unwrap();
    path
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        "# tiny model for tests\nn_blocks = 1\nlatent_channels = 8\nepochs = 2\nbatch_size = 2\ncrop_len = 0\n",
    )
    .unwrap();
    path
}

#[test]
fn help_and_usage_errors() {
    assert!(ok(&ase(&["--help"])).contains("enhance"));
    fails(&ase(&["frobnicate"]), 1, "Usage");
    fails(&ase(&["bench"]), 1, "Usage");
    fails(&ase(&["evaluate", "m.tsv", "--out", "x.csv"]), 1, "Usage");
}

#[test]
fn data_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.wav");
    fails(&ase(&["enhance", s(&missing), "c.ase", "o.wav"]), 2, "IoFailure");

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "base_lr = -1\n").unwrap();
    fails(&ase(&["--config", s(&bad), "bench", "c.ase"]), 1, "InvalidConfig");

    let junk = dir.path().join("junk.ase");
    fs::write(&junk, b"not a checkpoint").unwrap();
    fails(&ase(&["bench", s(&junk), "--trials", "3", "--clip-len", "4096"]), 2, "BadMagic");
    fails(&ase(&["--threads", "0", "bench", s(&junk)]), 1, "InvalidConfig");
}

#[test]
fn end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = dataset(d);
    let cfg = small_config(d);
    let run = d.join("run");

    let out = ok(&ase(&["--config", s(&cfg), "--threads", "1", "train", s(&manifest), s(&run)]));
    assert!(out.contains("epoch=2"), "{out}");
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let best = run.join("best.ase");
    assert!(best.exists() && run.join("final.ase").exists());

    // Same seed, same thread count: identical logs.
    let rerun = d.join("rerun");
    ok(&ase(&["--config", s(&cfg), "--threads", "1", "train", s(&manifest), s(&rerun)]));
    assert_eq!(log, fs::read_to_string(rerun.join("train_log.csv")).unwrap());
    assert_eq!(fs::read(&best).unwrap(), fs::read(rerun.join("best.ase")).unwrap());

    let input = d.join("deg_7.wav");
    let enhanced = d.join("enhanced.wav");
    let out = ok(&ase(&["enhance", s(&input), s(&best), s(&enhanced)]));
    assert!(out.contains("samples=12000") && out.contains("quantized=false"), "{out}");
    assert_eq!(ase_core::audio_io::read_wav(&enhanced).unwrap().len(), 12_000);

    let q = d.join("model.aseq");
    let out = ok(&ase(&["quantize", s(&best), s(&q)]));
    assert!(out.contains("int8_bytes="), "{out}");
    assert!(fs::metadata(&q).unwrap().len() * 2 <= fs::metadata(&best).unwrap().len());
    let out = ok(&ase(&["enhance", s(&input), s(&q), s(&d.join("q.wav"))]));
    assert!(out.contains("quantized=true"), "{out}");
    let h = d.join("model_f16.aseq");
    ok(&ase(&["quantize", "--f16", s(&best), s(&h)]));
    ok(&ase(&["enhance", s(&input), s(&h), s(&d.join("h.wav"))]));

    let csv = d.join("eval.csv");
    let out = ok(&ase(&["evaluate", s(&manifest), "--checkpoint", s(&best), "--out", s(&csv)]));
    assert!(out.contains("clips=1"), "{out}");
    let first = fs::read_to_string(&csv).unwrap();
    assert!(first.starts_with("clip,snr_db,lsd,stoi\ndeg_7,"), "{first}");
    assert!(first.lines().last().unwrap().starts_with("MEAN,"));
    ok(&ase(&["evaluate", s(&manifest), "--checkpoint", s(&best), "--out", s(&csv)]));
    assert_eq!(first, fs::read_to_string(&csv).unwrap());

    ok(&ase(&["evaluate", s(&manifest), "--bypass", "--out", s(&csv)]));
    let bypass = fs::read_to_string(&csv).unwrap();
    let row: Vec<&str> = bypass.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "100.000000");
    assert_eq!(row[2], "0.000000");
    assert!(row[3].parse::<f64>().unwrap() >= 0.999);

    let pgm = d.join("spec.pgm");
    let out = ok(&ase(&["spectrogram", s(&input), s(&pgm), "--view", "power_db"]));
    assert!(out.contains("view=power_db"));
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5\n45 512\n255\n"));

    let out = ok(&ase(&["bench", s(&best), "--trials", "3", "--clip-len", "4096"]));
    assert!(out.contains("model=float trials=3") && out.contains("model=int8 trials=3"), "{out}");
}

#[test]
fn evaluate_empty_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("empty.tsv");
    DatasetManifest::default().save(&manifest).unwrap();
    let csv = dir.path().join("eval.csv");
    let out = ok(&ase(&["evaluate", s(&manifest), "--bypass", "--out", s(&csv)]));
    assert!(out.starts_with("clips=0"));
    assert_eq!(fs::read_to_string(&csv).unwrap(), "clip,snr_db,lsd,stoi\n");
}

#[test]
fn prepare_with_stand_in_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    fs::create_dir(&src).unwrap();
    for i in 0..2 {
        let (_, r) = training_pair(30_000, 22050, 4000.0, 900 + i);
        write_wav(&r, src.join(format!("track{i}.wav"))).unwrap();
    }
    let work = dir.path().join("work");
    let out = ok(&ase(&[
        "--seed",
        "3",
        "prepare",
        s(&src),
        s(&work),
        "--encoder",
        "cp {in} {out}",
    ]));
    assert!(out.starts_with("pairs=6 "), "{out}");
    let m = DatasetManifest::load(work.join("manifest.tsv")).unwrap();
    assert_eq!(m.seed, 3);
    m.verify_pairs().unwrap();

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = ok(&ase(&["prepare", s(&empty), s(&dir.path().join("w2")), "--encoder", "cp {in} {out}"]));
    assert!(out.starts_with("pairs=0 "), "{out}");

    let out = ase(&["prepare", s(&src), s(&dir.path().join("w3")), "--encoder", "false"]);
    fails(&out, 2, "EncoderFailure");
}
