//! Objective metrics and batch evaluation over a test split.

mod spectral;
mod stoi;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

pub use spectral::{lsd, snr, LSD_EPSILON, LSD_HOP, LSD_WINDOW, SNR_CAP_DB, SNR_FLOOR};
pub use stoi::{resample, stoi, stoi_f64, RESAMPLE_TAPS, STOI_RATE};

use crate::audio_io::{load_pair, AudioClip, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::pipeline::{enhance_clip, InferenceModel};
use crate::stft::StftConfig;

pub const REPORT_HEADER: &str = "clip,snr_db,lsd,stoi";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub clip: String,
    pub snr_db: f64,
    pub lsd: f64,
    pub stoi: f64,
}

impl MetricsRow {
    pub fn compute(clip: impl Into<String>, reference: &AudioClip, enhanced: &AudioClip) -> Result<Self> {
        Ok(Self {
            clip: clip.into(),
            snr_db: snr(reference, enhanced)?,
            lsd: lsd(reference, enhanced)?,
            stoi: stoi(reference, enhanced)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    /// Column means as `(snr_db, lsd, stoi)`, or `None` for an empty report.
    pub fn means(&self) -> Option<(f64, f64, f64)> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let sum = |f: fn(&MetricsRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some((sum(|r| r.snr_db), sum(|r| r.lsd), sum(|r| r.stoi)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{},{:.6},{:.6},{:.6}", r.clip, r.snr_db, r.lsd, r.stoi).unwrap();
        }
        if let Some((a, b, c)) = self.means() {
            writeln!(s, "MEAN,{a:.6},{b:.6},{c:.6}").unwrap();
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// What gets scored against each reference.
#[derive(Debug, Clone, Copy)]
pub enum EvalSource<'a> {
    Model(&'a InferenceModel),
    /// The reference itself, for checking the harness.
    Bypass,
}

/// Scores every test pair of `manifest` and writes the CSV report to
/// `out_path` when given. Rows follow manifest order.
pub fn evaluate_testset(
    manifest: &DatasetManifest,
    source: EvalSource<'_>,
    out_path: Option<&Path>,
) -> Result<MetricsReport> {
    let entries: Vec<_> = manifest.split(Split::Test).collect();
    let stft = StftConfig::default();
    let rows = entries
        .par_iter()
        .map(|e| {
            let (degraded, reference) = load_pair(e)?;
            let enhanced = match source {
                EvalSource::Model(m) => enhance_clip(m, &degraded, &stft)?.0,
                EvalSource::Bypass => reference.clone(),
            };
            let id = e
                .degraded
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| e.degraded.display().to_string());
            MetricsRow::compute(id, &reference, &enhanced)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport { rows };
    if let Some(p) = out_path {
        report.save_csv(p)?;
    }
    Ok(report)
}
