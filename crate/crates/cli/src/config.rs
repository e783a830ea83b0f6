//! Pipeline configuration: TOML file, then `--set section.key=value`
//! overrides, then validation of every section before any stage runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use volseg_core::diffusion::DiffusionParams;
use volseg_core::network::{CrfParams, NetConfig};
use volseg_core::preprocess::{PreprocessParams, WindowSpec, DEFAULT_FULL_TARGET, DEFAULT_LOW_TARGET};
use volseg_core::sampler::DEFAULT_FG_FRACTION;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResampleConfig {
    pub full_target: [usize; 2],
    pub low_target: [usize; 2],
}

impl Default for ResampleConfig {
    fn default() -> Self {
        ResampleConfig {
            full_target: [DEFAULT_FULL_TARGET.0, DEFAULT_FULL_TARGET.1],
            low_target: [DEFAULT_LOW_TARGET.0, DEFAULT_LOW_TARGET.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub patches_per_volume: usize,
    pub fg_fraction: f64,
    /// Seeds the split and the per-volume patch draws.
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patches_per_volume: 20,
            fg_fraction: DEFAULT_FG_FRACTION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Seeds weight initialization and batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            epochs: 12,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Refine the network labelling with the dense CRF (windowed mean field).
    pub crf: bool,
    pub tile: [usize; 3],
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            crf: false,
            tile: [64, 64, 64],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub input_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub window: WindowSpec,
    pub resample: ResampleConfig,
    pub diffusion: DiffusionParams,
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub net: NetConfig,
    pub crf: CrfParams,
    pub infer: InferConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    /// Reads `file` (if any), applies `key=value` overrides and validates.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let cfg = Self::parse(file, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// [`PipelineConfig::load`] without the final validation.
    pub fn parse(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    pub fn preprocess_params(&self) -> PreprocessParams {
        let [fx, fy] = self.resample.full_target;
        let [lx, ly] = self.resample.low_target;
        PreprocessParams {
            window: self.window,
            full_target: Some((fx, fy)),
            low_target: (lx, ly),
            diffusion: self.diffusion,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let wrap = |section: &str, e: volseg_core::Error| CliError::Config(format!("[{section}] {e}"));
        self.preprocess_params()
            .validate()
            .map_err(|e| wrap("preprocess", e))?;
        self.net.validate().map_err(|e| wrap("net", e))?;
        self.crf.validate().map_err(|e| wrap("crf", e))?;
        let s = &self.sampler;
        if s.patches_per_volume == 0 {
            return Err(CliError::Config("[sampler] patches_per_volume must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&s.fg_fraction) {
            return Err(CliError::Config(format!(
                "[sampler] fg_fraction must lie in [0, 1], got {}",
                s.fg_fraction
            )));
        }
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(CliError::Config(format!("[train] lr must be finite and > 0, got {}", t.lr)));
        }
        if t.epochs == 0 {
            return Err(CliError::Config("[train] epochs must be > 0".into()));
        }
        if self.infer.tile.contains(&0) {
            return Err(CliError::Config("[infer] tile edges must be > 0".into()));
        }
        for (name, dir) in [("input_dir", &self.paths.input_dir)] {
            if let Some(d) = dir {
                if !d.is_dir() {
                    return Err(CliError::Config(format!("[paths] {name} {} is not a directory", d.display())));
                }
            }
        }
        Ok(())
    }
}

/// `section.key=value`; the value is parsed as a TOML literal, falling back
/// to a bare string.
fn apply_override(table: &mut toml::Table, item: &str) -> CliResult<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {item:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::Config(format!("empty key in {item:?}")))?;
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{part} in {item:?} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
