mod common;

use ase_core::audio_io::{write_wav, DatasetManifest, ManifestEntry, Split};
use ase_core::metrics::{evaluate_testset, stoi, EvalSource, REPORT_HEADER};
use ase_core::model::{ModelConfig, ModelParams};
use ase_core::pipeline::{enhance_clip, InferenceModel};
use ase_core::stft::StftConfig;
use ase_core::synth::{speech_shaped_noise, training_pair, white_noise};
use ase_core::AudioClip;
use common::grid_noise;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(seed: u64) -> InferenceModel {
    let cfg = ModelConfig {
        n_blocks: 2,
        latent_channels: 16,
        ..Default::default()
    };
    let mut p = ModelParams::<f32>::init(cfg, seed).unwrap();
    for b in &mut p.blocks {
        b.alpha.fill(0.2);
    }
    InferenceModel::Float(p)
}

#[test]
fn output_length_matches_input() {
    let model = small_model(1);
    let stft = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..10 {
        let len = rng.random_range(2016..6000);
        let clip = grid_noise(len, 0.3, i);
        let (out, _) = enhance_clip(&model, &clip, &stft).unwrap();
        assert_eq!(out.len(), len);
        assert_eq!(out.sample_rate(), 22050);
        assert!(out.samples().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn enhancement_is_scale_equivariant_and_deterministic() {
    let stft = StftConfig::default();
    let clip = grid_noise(9000, 0.4, 5);
    let half = AudioClip::new(clip.samples().iter().map(|v| v * 0.5).collect(), 22050).unwrap();
    for model in [small_model(3), small_model(3).quantized().unwrap()] {
        let (a, _) = enhance_clip(&model, &clip, &stft).unwrap();
        let (b, _) = enhance_clip(&model, &half, &stft).unwrap();
        let (again, _) = enhance_clip(&model, &clip, &stft).unwrap();
        assert_eq!(a, again);
        // Clips clamp to [-1, 1], so saturated samples are skipped.
        for (x, y) in a.samples().iter().zip(b.samples()).filter(|(x, _)| x.abs() < 1.0) {
            assert!((x * 0.5 - y).abs() <= 1e-6 * x.abs().max(1e-3), "{x} {y}");
        }
    }
}

#[test]
fn stoi_ignores_estimate_gain() {
    let y = speech_shaped_noise(3 * 22050, 22050, 8);
    let n = white_noise(y.len(), 0.05, 22050, 9);
    let noisy: Vec<f32> = y.samples().iter().zip(n.samples()).map(|(a, b)| a + b).collect();
    let quiet: Vec<f32> = noisy.iter().map(|v| v * 0.25).collect();
    let a = stoi(&y, &AudioClip::new(noisy, 22050).unwrap()).unwrap();
    let b = stoi(&y, &AudioClip::new(quiet, 22050).unwrap()).unwrap();
    assert!(a > 0.5 && a < 1.0, "{a}");
    assert!((a - b).abs() < 1e-6, "{a} {b}");
}

fn manifest(dir: &std::path::Path, test_clips: u64) -> DatasetManifest {
    let mut entries = Vec::new();
    for i in 0..test_clips + 1 {
        let (d, r) = training_pair(15_000, 22050, 4000.0, 40 + i);
        let dp = dir.join(format!("d{i}.wav"));
        let rp = dir.join(format!("r{i}.wav"));
        write_wav(&d, &dp).unwrap();
        write_wav(&r, &rp).unwrap();
        entries.push(ManifestEntry {
            split: if i == 0 { Split::Train } else { Split::Test },
            degraded: dp,
            reference: rp,
        });
    }
    DatasetManifest { seed: 0, entries }
}

#[test]
fn evaluate_reports() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 3);

    let bypass = evaluate_testset(&m, EvalSource::Bypass, None).unwrap();
    assert_eq!(bypass.rows.len(), 3);
    for r in &bypass.rows {
        assert_eq!(r.snr_db, 100.0);
        assert_eq!(r.lsd, 0.0);
        assert!(r.stoi >= 0.999, "{}", r.stoi);
    }

    let model = small_model(4);
    let path = dir.path().join("eval.csv");
    let first = evaluate_testset(&m, EvalSource::Model(&model), Some(&path)).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let second = evaluate_testset(&m, EvalSource::Model(&model), Some(&path)).unwrap();
    assert_eq!(first, second);
    assert_eq!(bytes, std::fs::read(&path).unwrap());
    let ids: Vec<&str> = first.rows.iter().map(|r| r.clip.as_str()).collect();
    assert_eq!(ids, ["d1", "d2", "d3"]);

    let train_only = DatasetManifest {
        seed: 0,
        entries: m.entries[..1].to_vec(),
    };
    let empty = evaluate_testset(&train_only, EvalSource::Bypass, Some(&path)).unwrap();
    assert!(empty.means().is_none());
    assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{REPORT_HEADER}\n"));
}
