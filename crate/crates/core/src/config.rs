//! `key = value` run configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the field
//! names of [`TrainConfig`], [`ModelConfig`] and [`SsimConfig`]; the cyclic
//! schedule's fields appear unprefixed (`min_lr`, `max_lr`, `period`,
//! `decay`, `mode`). Unknown or repeated keys are errors.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::SsimConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn ssim(&self) -> &SsimConfig {
        &self.train.ssim
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key {key}", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "base_lr" => t.base_lr = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "min_lr" => t.schedule.min_lr = num(key, value)?,
            "max_lr" => t.schedule.max_lr = num(key, value)?,
            "period" => t.schedule.period = num(key, value)?,
            "decay" => t.schedule.decay = num(key, value)?,
            "mode" => t.schedule.mode = value.parse().map_err(|e: Error| e.to_string())?,
            "beta1" => t.adam.beta1 = num(key, value)?,
            "beta2" => t.adam.beta2 = num(key, value)?,
            "eps" => t.adam.eps = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "crop_len" => t.crop_len = num(key, value)?,
            "k1" => t.ssim.k1 = num(key, value)?,
            "k2" => t.ssim.k2 = num(key, value)?,
            "dynamic_range" => {
                t.ssim.dynamic_range = match value {
                    "auto" => None,
                    v => Some(num(key, v)?),
                }
            }
            "n_blocks" => self.model.n_blocks = num(key, value)?,
            "latent_channels" => self.model.latent_channels = num(key, value)?,
            "kernel_size" => self.model.kernel_size = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}
