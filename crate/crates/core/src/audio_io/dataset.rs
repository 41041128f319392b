//! Degraded/reference pair preparation through an external codec, and the
//! manifest file that records the resulting splits.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{read_wav, split_clip, write_wav, AudioClip};
use crate::error::{Error, Result};

/// Transcodes `{in}` through MP3 at `{bitrate}` kbps and decodes the result
/// back to a mono 16-bit WAV at `{out}`.
pub const DEFAULT_ENCODER_TEMPLATE: &str = "ffmpeg -hide_banner -loglevel error -y -i {in} \
     -codec:a libmp3lame -b:a {bitrate}k -f mp3 - | \
     ffmpeg -hide_banner -loglevel error -y -f mp3 -i - -ac 1 -c:a pcm_s16le {out}";

const TRAIN_FRACTION: f64 = 0.85;
const VAL_FRACTION: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub degraded: PathBuf,
    pub reference: PathBuf,
}

/// Training/validation/test pairs plus the seed that shuffled them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Builds a manifest from ordered pairs, assigning 85/8/7 splits by a
    /// seeded permutation.
    pub fn assign_splits(pairs: Vec<(PathBuf, PathBuf)>, seed: u64) -> Self {
        let n = pairs.len();
        let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
        let n_val = ((n as f64 * VAL_FRACTION).round() as usize).min(n - n_train);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut splits = vec![Split::Test; n];
        for (rank, &idx) in order.iter().enumerate() {
            splits[idx] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        let entries = pairs
            .into_iter()
            .zip(splits)
            .map(|((degraded, reference), split)| ManifestEntry {
                split,
                degraded,
                reference,
            })
            .collect();
        Self { seed, entries }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Checks that every pair loads to clips of identical length and rate.
    pub fn verify_pairs(&self) -> Result<()> {
        for e in &self.entries {
            load_pair(e)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# seed={}\n", self.seed);
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\n",
                e.split,
                e.degraded.display(),
                e.reference.display()
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::MalformedManifest {
            line: 1,
            reason: "empty manifest".into(),
        })?;
        let seed = header
            .strip_prefix("# seed=")
            .and_then(|s| s.trim().parse().ok())
            .ok_or(Error::MalformedManifest {
                line: 1,
                reason: "expected `# seed=<n>`".into(),
            })?;
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::MalformedManifest { line: i + 1, reason };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", fields.len())));
            }
            entries.push(ManifestEntry {
                split: fields[0].parse().map_err(bad)?,
                degraded: PathBuf::from(fields[1]),
                reference: PathBuf::from(fields[2]),
            });
        }
        Ok(Self { seed, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Loads a manifest pair as `(degraded, reference)`, checking alignment.
pub(crate) fn load_pair(entry: &ManifestEntry) -> Result<(AudioClip, AudioClip)> {
    let degraded = read_wav(&entry.degraded)?;
    let reference = read_wav(&entry.reference)?;
    if degraded.len() != reference.len() || degraded.sample_rate() != reference.sample_rate() {
        return Err(Error::PairLengthMismatch(format!(
            "{} ({} samples @ {} Hz) vs {} ({} samples @ {} Hz)",
            entry.degraded.display(),
            degraded.len(),
            degraded.sample_rate(),
            entry.reference.display(),
            reference.len(),
            reference.sample_rate()
        )));
    }
    Ok((degraded, reference))
}

/// Trims the longer clip from its head so both have the shorter length.
/// Codec priming delay shows up as extra leading samples.
pub fn trim_to_common_length(a: &AudioClip, b: &AudioClip) -> (AudioClip, AudioClip) {
    let n = a.len().min(b.len());
    let tail = |c: &AudioClip| {
        c.slice(c.len() - n, n)
            .expect("tail slice within bounds")
    };
    (tail(a), tail(b))
}

#[derive(Debug, Clone)]
pub struct PrepareOptions {
    /// Shell command with `{in}`, `{out}` and `{bitrate}` placeholders.
    pub encoder_template: String,
    pub seed: u64,
    /// Concurrent encoder subprocesses.
    pub workers: usize,
    pub reference_kbps: u32,
    pub degraded_kbps: u32,
    pub parts: usize,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            encoder_template: DEFAULT_ENCODER_TEMPLATE.to_string(),
            seed: 0,
            workers: 1,
            reference_kbps: 128,
            degraded_kbps: 32,
            parts: 3,
        }
    }
}

fn shell_quote(path: &Path) -> String {
    format!("'{}'", path.display().to_string().replace('\'', r"'\''"))
}

fn run_encoder(template: &str, input: &Path, output: &Path, kbps: u32) -> Result<()> {
    let cmd = template
        .replace("{in}", &shell_quote(input))
        .replace("{out}", &shell_quote(output))
        .replace("{bitrate}", &kbps.to_string());
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| Error::EncoderFailure {
            status: "spawn failed".into(),
            output: e.to_string(),
        })?;
    if !out.status.success() {
        let mut text = String::from_utf8_lossy(&out.stdout).into_owned();
        text.push_str(&String::from_utf8_lossy(&out.stderr));
        return Err(Error::EncoderFailure {
            status: out.status.to_string(),
            output: text.trim().to_string(),
        });
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Produces segment pairs for one source track.
fn prepare_track(
    src: &Path,
    work_dir: &Path,
    opts: &PrepareOptions,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    let stem = src
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "track".into());
    let tmp = work_dir.join("tmp");
    let ref_full = tmp.join(format!("{stem}.ref.wav"));
    let deg_full = tmp.join(format!("{stem}.deg.wav"));
    run_encoder(&opts.encoder_template, src, &ref_full, opts.reference_kbps)?;
    run_encoder(
        &opts.encoder_template,
        &ref_full,
        &deg_full,
        opts.degraded_kbps,
    )?;

    let reference = read_wav(&ref_full)?;
    let degraded = read_wav(&deg_full)?;
    if reference.sample_rate() != degraded.sample_rate() {
        return Err(Error::PairLengthMismatch(format!(
            "{stem}: sample rates {} vs {}",
            reference.sample_rate(),
            degraded.sample_rate()
        )));
    }
    let (reference, degraded) = trim_to_common_length(&reference, &degraded);
    let ref_parts = split_clip(&reference, opts.parts)?;
    let deg_parts = split_clip(&degraded, opts.parts)?;

    let mut pairs = Vec::with_capacity(opts.parts);
    for (k, (r, d)) in ref_parts.iter().zip(&deg_parts).enumerate() {
        if r.len() != d.len() {
            return Err(Error::PairLengthMismatch(format!(
                "{stem} segment {k}: {} vs {}",
                d.len(),
                r.len()
            )));
        }
        let name = format!("{stem}_{k}.wav");
        let deg_path = work_dir.join("degraded").join(&name);
        let ref_path = work_dir.join("reference").join(&name);
        write_wav(d, &deg_path)?;
        write_wav(r, &ref_path)?;
        pairs.push((deg_path, ref_path));
    }
    let _ = fs::remove_file(&ref_full);
    let _ = fs::remove_file(&deg_full);
    Ok(pairs)
}

/// Runs every source WAV through the codec twice (reference bitrate, then
/// degraded bitrate from the reference), segments both, and writes
/// `manifest.tsv` under `work_dir`.
pub fn prepare_dataset(
    source_dir: impl AsRef<Path>,
    work_dir: impl AsRef<Path>,
    opts: &PrepareOptions,
) -> Result<DatasetManifest> {
    let source_dir = source_dir.as_ref();
    let work_dir = work_dir.as_ref();
    let mut sources: Vec<PathBuf> = fs::read_dir(source_dir)
        .map_err(|e| Error::io(source_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|x| x.eq_ignore_ascii_case("wav"))
        })
        .collect();
    sources.sort();

    for sub in ["tmp", "degraded", "reference"] {
        create_dir(&work_dir.join(sub))?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let per_track: Vec<Result<Vec<(PathBuf, PathBuf)>>> = pool.install(|| {
        sources
            .par_iter()
            .map(|src| prepare_track(src, work_dir, opts))
            .collect()
    });
    let mut pairs = Vec::new();
    for r in per_track {
        pairs.extend(r?);
    }
    let _ = fs::remove_dir(work_dir.join("tmp"));

    let manifest = DatasetManifest::assign_splits(pairs, opts.seed);
    manifest.save(work_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
