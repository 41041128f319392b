//! Mini-batch Adam training with a cyclical learning rate, per-epoch
//! validation and best-checkpoint selection.

mod adam;
mod schedule;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use schedule::{CyclicSchedule, ScheduleMode};

use crate::audio_io::load_pair;
use crate::audio_io::{AudioClip, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::losses::{total_loss, SsimConfig};
use crate::model::{save_checkpoint, ModelConfig, ModelParams};
use crate::stft::{stft_stack, StftConfig};

pub const EPOCH_LOG: &str = "train_log.csv";
pub const STEP_LOG: &str = "steps.csv";
pub const BEST_CHECKPOINT: &str = "best.ase";
pub const FINAL_CHECKPOINT: &str = "final.ase";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: CyclicSchedule,
    pub adam: AdamConfig,
    pub ssim: SsimConfig,
    pub stft: StftConfig,
    pub seed: u64,
    /// Write `epoch_NNNN.ase` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Centered crop applied to every pair before the STFT; 0 keeps the
    /// whole clip.
    pub crop_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            batch_size: 32,
            epochs: 200,
            schedule: CyclicSchedule::default(),
            adam: AdamConfig::default(),
            ssim: SsimConfig::default(),
            stft: StftConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            crop_len: 100_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("base_lr {} must be positive", self.base_lr)));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::InvalidConfig("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        self.schedule.validate()?;
        self.ssim.validate()?;
        self.stft.validate()
    }

    pub fn lr_at_step(&self, step: u64, steps_per_epoch: usize) -> f64 {
        self.schedule.lr(self.base_lr, step, steps_per_epoch)
    }
}

/// A normalized training example: degraded input and reference target,
/// both divided by the degraded spectrogram's scale.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: Array3<f32>,
    pub target: Array3<f32>,
    pub scale: f32,
}

impl Example {
    pub fn prepare(
        degraded: &AudioClip,
        reference: &AudioClip,
        crop_len: usize,
        stft: &StftConfig,
    ) -> Result<Self> {
        if degraded.len() != reference.len() {
            return Err(Error::PairLengthMismatch(format!(
                "{} vs {} samples",
                degraded.len(),
                reference.len()
            )));
        }
        let crop = |c: &AudioClip| if crop_len == 0 { c.clone() } else { c.center_crop(crop_len) };
        let mut x = stft_stack(&crop(degraded), stft)?;
        let mut y = stft_stack(&crop(reference), stft)?;
        let scale = x.norm_scale();
        x.scale(1.0 / scale);
        y.scale(1.0 / scale);
        Ok(Self {
            input: x.into_array(),
            target: y.into_array(),
            scale,
        })
    }
}

/// Indexed access to `(degraded, reference)` pairs.
pub trait PairSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<(AudioClip, AudioClip)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for [(AudioClip, AudioClip)] {
    fn len(&self) -> usize {
        <[_]>::len(self)
    }

    fn load(&self, index: usize) -> Result<(AudioClip, AudioClip)> {
        Ok(self[index].clone())
    }
}

impl PairSource for Vec<(AudioClip, AudioClip)> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, index: usize) -> Result<(AudioClip, AudioClip)> {
        self.as_slice().load(index)
    }
}

/// Pairs of one manifest split, read from disk on demand.
pub struct ManifestPairs<'a>(pub Vec<&'a ManifestEntry>);

impl<'a> ManifestPairs<'a> {
    pub fn new(manifest: &'a DatasetManifest, split: Split) -> Self {
        Self(manifest.split(split).collect())
    }
}

impl PairSource for ManifestPairs<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn load(&self, index: usize) -> Result<(AudioClip, AudioClip)> {
        load_pair(self.0[index])
    }
}

/// Loss of one example; with `with_grad`, also its parameter gradient.
/// Training and validation both go through here.
fn example_objective(
    params: &ModelParams<f32>,
    ex: &Example,
    ssim: &SsimConfig,
    with_grad: bool,
) -> Result<(f64, Option<ModelParams<f32>>)> {
    let (y_hat, cache) = params.forward(&ex.input)?;
    let loss = total_loss(&y_hat, &ex.target, ssim)?;
    if !with_grad {
        return Ok((loss.loss, None));
    }
    let grads = params.backward(&cache, &loss.grad)?;
    Ok((loss.loss, Some(grads.params)))
}

pub fn example_loss(params: &ModelParams<f32>, ex: &Example, ssim: &SsimConfig) -> Result<f64> {
    example_objective(params, ex, ssim, false).map(|(l, _)| l)
}

/// Mean loss and mean parameter gradient over `examples`. Per-example work
/// may run in parallel; the reduction runs in index order in `f64`, so the
/// result does not depend on the thread count.
pub fn batch_gradient(
    params: &ModelParams<f32>,
    examples: &[Example],
    ssim: &SsimConfig,
) -> Result<(f64, ModelParams<f32>)> {
    if examples.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let per: Vec<(f64, ModelParams<f32>)> = examples
        .par_iter()
        .map(|ex| {
            example_objective(params, ex, ssim, true)
                .map(|(l, g)| (l, g.expect("gradient requested")))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mut acc = params.cast::<f64>().zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += l;
        for (a, t) in acc.tensors_mut().into_iter().zip(g.tensors()) {
            for (x, &y) in a.iter_mut().zip(t) {
                *x += y as f64;
            }
        }
    }
    for t in acc.tensors_mut() {
        t.iter_mut().for_each(|x| *x /= n);
    }
    let mut mean = acc.cast::<f32>();
    mean.norm_scale = params.norm_scale;
    Ok((loss / n, mean))
}

fn load_examples(source: &dyn PairSource, idx: &[usize], cfg: &TrainConfig) -> Result<Vec<Example>> {
    idx.par_iter()
        .map(|&i| {
            let (d, r) = source.load(i)?;
            Example::prepare(&d, &r, cfg.crop_len, &cfg.stft)
        })
        .collect()
}

/// Mean total loss over every pair of `source`, or `None` if it is empty.
pub fn validation_loss(
    params: &ModelParams<f32>,
    source: &dyn PairSource,
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    if source.is_empty() {
        return Ok(None);
    }
    let idx: Vec<usize> = (0..source.len()).collect();
    let losses: Vec<f64> = idx
        .par_chunks(cfg.batch_size)
        .map(|chunk| {
            let exs = load_examples(source, chunk, cfg)?;
            exs.iter()
                .map(|ex| example_loss(params, ex, &cfg.ssim))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(Some(losses.iter().sum::<f64>() / losses.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 0-based optimizer step.
    pub step: u64,
    pub lr: f64,
    pub batch_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: u64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    /// Mean pre-update loss over the epoch's training examples.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

impl EpochRecord {
    /// Loss used for best-checkpoint selection.
    pub fn selection_loss(&self) -> f64 {
        self.val_loss.unwrap_or(self.train_loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ModelParams<f32>,
    pub best_params: ModelParams<f32>,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,step,lr,train_loss,val_loss\n");
    for r in records {
        let val = r.val_loss.map_or_else(|| "nan".to_string(), |v| v.to_string());
        writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.lr, r.train_loss, val).expect("string write");
    }
    s
}

pub fn step_log_csv(records: &[StepRecord]) -> String {
    let mut s = String::from("step,lr,batch_loss\n");
    for r in records {
        writeln!(s, "{},{},{}", r.step, r.lr, r.batch_loss).expect("string write");
    }
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains on the manifest's train split, validating on its val split.
pub fn train(
    manifest: &DatasetManifest,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    out_dir: impl AsRef<Path>,
) -> Result<TrainOutcome> {
    let train_set = ManifestPairs::new(manifest, Split::Train);
    let val_set = ManifestPairs::new(manifest, Split::Val);
    train_on(&train_set, &val_set, model_cfg, cfg, Some(out_dir.as_ref()))
}

/// Training loop over arbitrary pair sources. With `out_dir`, logs and
/// checkpoints are rewritten after every epoch.
pub fn train_on(
    train_set: &dyn PairSource,
    val_set: &dyn PairSource,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut params = ModelParams::<f32>::init(model_cfg, cfg.seed)?;
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let steps_per_epoch = order.len().div_ceil(cfg.batch_size);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(cfg.epochs * steps_per_epoch);
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;
    let (mut scale_sum, mut scale_count) = (0.0f64, 0usize);
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr_at_step(step, steps_per_epoch);
        for batch in order.chunks(cfg.batch_size) {
            let examples = load_examples(train_set, batch, cfg)?;
            for ex in &examples {
                scale_sum += ex.scale as f64;
                scale_count += 1;
            }
            let (loss, grads) = batch_gradient(&params, &examples, &cfg.ssim)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            lr = cfg.lr_at_step(step, steps_per_epoch);
            adam_step(&mut params, &grads, &mut state, lr, &cfg.adam)?;
            steps.push(StepRecord {
                step,
                lr,
                batch_loss: loss,
            });
            epoch_loss += loss * examples.len() as f64;
            step += 1;
        }
        params.norm_scale = (scale_sum / scale_count as f64) as f32;
        let record = EpochRecord {
            epoch,
            step,
            lr,
            train_loss: epoch_loss / order.len() as f64,
            val_loss: validation_loss(&params, val_set, cfg)?,
        };
        epochs.push(record);
        let sel = record.selection_loss();
        let improved = best.as_ref().is_none_or(|(b, _, _)| sel < *b);
        if improved {
            best = Some((sel, epoch, params.clone()));
        }

        if let Some(dir) = out_dir {
            write_text(&dir.join(EPOCH_LOG), &epoch_log_csv(&epochs))?;
            write_text(&dir.join(STEP_LOG), &step_log_csv(&steps))?;
            if improved {
                save_checkpoint(&params, dir.join(BEST_CHECKPOINT))?;
            }
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(&params, epoch_checkpoint_path(dir, epoch))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&params, dir.join(FINAL_CHECKPOINT))?;
        if best.is_none() {
            // Zero epochs: the initial parameters are the best available.
            save_checkpoint(&params, dir.join(BEST_CHECKPOINT))?;
        }
    }
    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params.clone()),
    };
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_epoch,
        epochs,
        steps,
    })
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ase"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::training_pair;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 2,
            crop_len: 0,
            seed: 5,
            ..Default::default()
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_blocks: 1,
            latent_channels: 8,
            kernel_size: 5,
        }
    }

    fn pairs(n: usize, seed: u64) -> Vec<(AudioClip, AudioClip)> {
        (0..n)
            .map(|i| training_pair(3072, 22050, 3000.0, seed + i as u64))
            .collect()
    }

    #[test]
    fn batch_gradient_is_mean_of_per_sample_gradients() {
        let cfg = tiny_cfg();
        let params = ModelParams::<f32>::init(tiny_model(), 2).unwrap();
        let exs: Vec<Example> = pairs(3, 10)
            .iter()
            .map(|(d, r)| Example::prepare(d, r, 0, &cfg.stft).unwrap())
            .collect();
        let (loss, grad) = batch_gradient(&params, &exs, &cfg.ssim).unwrap();

        let mut acc: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let mut loss_acc = 0.0;
        for ex in &exs {
            let (y, cache) = params.forward(&ex.input).unwrap();
            let l = total_loss(&y, &ex.target, &cfg.ssim).unwrap();
            loss_acc += l.loss / 3.0;
            let g = params.backward(&cache, &l.grad).unwrap().params;
            for (a, t) in acc.iter_mut().zip(g.tensors()) {
                for (x, &y) in a.iter_mut().zip(t) {
                    *x += y as f64 / 3.0;
                }
            }
        }
        assert!((loss - loss_acc).abs() <= 1e-12 * loss_acc.abs());
        let flat_a: Vec<f64> = acc.concat();
        let flat_b: Vec<f64> = grad.tensors().concat().iter().map(|&v| v as f64).collect();
        let scale = flat_a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = flat_a.iter().zip(&flat_b).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1e-6 * scale, "err {err} scale {scale}");
    }

    #[test]
    fn lr_trace_matches_schedule_and_logs_have_one_row_per_epoch() {
        let cfg = tiny_cfg();
        let train_set = pairs(3, 20);
        let out = train_on(&train_set, &pairs(1, 40), tiny_model(), &cfg, None).unwrap();
        assert_eq!(out.epochs.len(), 2);
        assert_eq!(out.steps.len(), 4);
        for s in &out.steps {
            assert_eq!(s.lr, cfg.lr_at_step(s.step, 2));
        }
        let csv = epoch_log_csv(&out.epochs);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("epoch,step,lr,train_loss,val_loss\n"));
    }

    #[test]
    fn empty_train_set() {
        let none: Vec<(AudioClip, AudioClip)> = Vec::new();
        assert!(matches!(
            train_on(&none, &none, tiny_model(), &tiny_cfg(), None),
            Err(Error::EmptyTrainSet)
        ));
    }

    #[test]
    fn missing_validation_selects_by_train_loss() {
        let cfg = tiny_cfg();
        let none: Vec<(AudioClip, AudioClip)> = Vec::new();
        let out = train_on(&pairs(2, 30), &none, tiny_model(), &cfg, None).unwrap();
        assert!(out.epochs.iter().all(|e| e.val_loss.is_none()));
        assert!(epoch_log_csv(&out.epochs).lines().nth(1).unwrap().ends_with(",nan"));
        let best = out
            .epochs
            .iter()
            .min_by(|a, b| a.train_loss.total_cmp(&b.train_loss))
            .unwrap();
        assert_eq!(out.best_epoch, best.epoch);
    }
}
