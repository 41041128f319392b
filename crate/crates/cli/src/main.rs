//! `ase`: dataset preparation, training, enhancement, evaluation,
//! quantization, spectrogram images and latency benchmarks.
//!
//! Exit status is 0 on success, 1 for usage errors, 2 for data errors and 3
//! for internal errors. Failures print one line `ERROR <Code>: <message>`
//! on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use ase_core::audio_io::{prepare_dataset, read_wav, DatasetManifest, PrepareOptions, DEFAULT_ENCODER_TEMPLATE};
use ase_core::config::RunConfig;
use ase_core::metrics::{evaluate_testset, EvalSource};
use ase_core::model::{checkpoint_bytes, load_checkpoint};
use ase_core::pipeline::{
    bench_latency, emit_spectrogram_image, enhance_file, EnhanceRequest, InferenceModel, SpectrogramView,
};
use ase_core::quantize::{f16_checkpoint_bytes, quantize_model, quantized_checkpoint_bytes};
use ase_core::train::{train, BEST_CHECKPOINT, FINAL_CHECKPOINT};
use ase_core::{Error, ErrorClass};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ase", version, about = "Spectral reconstruction of low-bitrate audio")]
struct Cli {
    /// `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for prepare, train and evaluate.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode source WAVs to degraded/reference pairs and write a manifest.
    Prepare {
        source_dir: PathBuf,
        work_dir: PathBuf,
        /// Shell command with {in}, {out} and {bitrate} placeholders.
        #[arg(long, default_value = DEFAULT_ENCODER_TEMPLATE)]
        encoder: String,
        #[arg(long, default_value_t = 128)]
        reference_kbps: u32,
        #[arg(long, default_value_t = 32)]
        degraded_kbps: u32,
        #[arg(long, default_value_t = 3)]
        parts: usize,
    },
    /// Train on a manifest; logs and checkpoints go to OUT_DIR.
    Train {
        manifest: PathBuf,
        out_dir: PathBuf,
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Enhance one WAV file with a checkpoint.
    Enhance {
        input: PathBuf,
        checkpoint: PathBuf,
        output: PathBuf,
        /// Quantize a float checkpoint before inference.
        #[arg(long)]
        quantized: bool,
    },
    /// Score the test split and write a CSV report.
    Evaluate {
        manifest: PathBuf,
        /// Model to evaluate; omit with --bypass.
        #[arg(long, required_unless_present = "bypass", conflicts_with = "bypass")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        quantized: bool,
        /// Score each reference against itself.
        #[arg(long)]
        bypass: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an int8 (or f16) copy of a float checkpoint.
    Quantize {
        checkpoint: PathBuf,
        output: PathBuf,
        /// Store kernels as 16-bit floats instead of int8.
        #[arg(long)]
        f16: bool,
    },
    /// Write a PGM image of a WAV file's spectrogram.
    Spectrogram {
        input: PathBuf,
        output: PathBuf,
        /// magnitude, power_db or phase.
        #[arg(long, default_value = "magnitude")]
        view: SpectrogramView,
    },
    /// Time the forward pass on random clips.
    Bench {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 100_000)]
        clip_len: usize,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Internal => 3,
    }
}

fn single_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|info| {
        eprintln!("ERROR Internal: {}", single_line(&info.to_string()));
    }));
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("ERROR Usage: {}", single_line(first.trim_start_matches("error: ")));
            return ExitCode::from(1);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("ERROR {}: {}", e.code(), single_line(&e.to_string()));
            ExitCode::from(exit_code(e.class()))
        }
        Err(_) => ExitCode::from(3),
    }
}

fn run(cli: Cli) -> ase_core::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }

    match cli.command {
        Command::Prepare {
            source_dir,
            work_dir,
            encoder,
            reference_kbps,
            degraded_kbps,
            parts,
        } => {
            let opts = PrepareOptions {
                encoder_template: encoder,
                seed: cfg.train.seed,
                workers: cli.threads.unwrap_or_else(rayon::current_num_threads),
                reference_kbps,
                degraded_kbps,
                parts,
            };
            let m = prepare_dataset(&source_dir, &work_dir, &opts)?;
            println!(
                "pairs={} train={} val={} test={} manifest={}",
                m.entries.len(),
                m.count(ase_core::audio_io::Split::Train),
                m.count(ase_core::audio_io::Split::Val),
                m.count(ase_core::audio_io::Split::Test),
                work_dir.join("manifest.tsv").display()
            );
        }
        Command::Train {
            manifest,
            out_dir,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let m = DatasetManifest::load(&manifest)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let outcome = train(&m, cfg.model, &cfg.train, &out_dir)?;
            for r in &outcome.epochs {
                let val = r.val_loss.map_or_else(|| "nan".into(), |v| format!("{v:.6}"));
                println!("epoch={} lr={:.3e} train_loss={:.6} val_loss={val}", r.epoch, r.lr, r.train_loss);
            }
            println!(
                "best_epoch={} best={} final={}",
                outcome.best_epoch,
                out_dir.join(BEST_CHECKPOINT).display(),
                out_dir.join(FINAL_CHECKPOINT).display()
            );
        }
        Command::Enhance {
            input,
            checkpoint,
            output,
            quantized,
        } => {
            let report = enhance_file(&EnhanceRequest {
                input_path: input,
                checkpoint_path: checkpoint,
                output_path: output,
                use_quantized: quantized,
            })?;
            println!(
                "samples={} frames={} bins={} quantized={} forward_ms={:.3}",
                report.samples, report.frames, report.bins, report.quantized, report.forward_ms
            );
        }
        Command::Evaluate {
            manifest,
            checkpoint,
            quantized,
            bypass,
            out,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let model = match checkpoint {
                Some(p) if !bypass => {
                    let model = InferenceModel::load(p)?;
                    Some(if quantized { model.quantized()? } else { model })
                }
                _ => None,
            };
            let source = model.as_ref().map_or(EvalSource::Bypass, EvalSource::Model);
            let report = evaluate_testset(&m, source, Some(&out))?;
            match report.means() {
                Some((s, l, t)) => println!(
                    "clips={} snr_db={s:.4} lsd={l:.4} stoi={t:.4} report={}",
                    report.rows.len(),
                    out.display()
                ),
                None => println!("clips=0 report={}", out.display()),
            }
        }
        Command::Quantize { checkpoint, output, f16 } => {
            let params = load_checkpoint(&checkpoint)?;
            let float_len = checkpoint_bytes(&params).len();
            let bytes = if f16 {
                f16_checkpoint_bytes(&params)
            } else {
                quantized_checkpoint_bytes(&quantize_model(&params)?)
            };
            std::fs::write(&output, &bytes).map_err(|e| Error::io(&output, e))?;
            println!(
                "float_bytes={float_len} {}_bytes={} ratio={:.4}",
                if f16 { "f16" } else { "int8" },
                bytes.len(),
                bytes.len() as f64 / float_len as f64
            );
        }
        Command::Spectrogram { input, output, view } => {
            let clip = read_wav(&input)?;
            emit_spectrogram_image(&clip, view, &output)?;
            println!("view={view} image={}", output.display());
        }
        Command::Bench {
            checkpoint,
            trials,
            clip_len,
        } => {
            let model = InferenceModel::load(&checkpoint)?;
            let mut models = vec![("float", model.clone())];
            if model.is_quantized() {
                models[0].0 = "int8";
            } else {
                models.push(("int8", model.quantized()?));
            }
            let refs: Vec<&InferenceModel> = models.iter().map(|(_, m)| m).collect();
            let stats = bench_latency(&refs, trials, clip_len, cfg.train.seed)?;
            for ((name, _), s) in models.iter().zip(&stats) {
                println!(
                    "model={name} trials={} mean_ms={:.3} p50_ms={:.3} p95_ms={:.3}",
                    s.trials_ms.len(),
                    s.mean_ms,
                    s.p50_ms,
                    s.p95_ms
                );
            }
        }
    }
    Ok(())
}
