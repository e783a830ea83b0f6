//! Run manifests: one JSON file per output directory, one record per run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use volseg_core::sampler::SplitPlan;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    /// Arguments after the program name; replaying re-runs exactly these.
    pub command: Vec<String>,
    pub config: PipelineConfig,
    pub split: Option<SplitPlan>,
    pub timings: Vec<StageTiming>,
    /// SHA-256 by path, as given on the command line.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 by path relative to the manifest directory.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub runs: Vec<RunRecord>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Appends `run` to the manifest in `dir`, creating it if needed.
    pub fn append(dir: &Path, run: RunRecord) -> CliResult<PathBuf> {
        let path = dir.join(MANIFEST_NAME);
        let mut manifest = if path.exists() {
            Self::load(&path)?
        } else {
            RunManifest::default()
        };
        manifest.runs.push(run);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// The file itself plus a `.raw` sibling, which is where detached MetaImage
/// headers keep their voxels.
pub fn with_companions(path: &Path) -> Vec<PathBuf> {
    let mut files = vec![path.to_path_buf()];
    if path.extension().is_some_and(|e| e == "mhd") {
        let raw = path.with_extension("raw");
        if raw.exists() {
            files.push(raw);
        }
    }
    files
}

/// Accumulates a [`RunRecord`] while a subcommand runs.
pub struct Recorder {
    record: RunRecord,
    out_dir: PathBuf,
}

impl Recorder {
    pub fn new(command: Vec<String>, config: &PipelineConfig, out_dir: &Path) -> Self {
        Recorder {
            record: RunRecord {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command,
                config: config.clone(),
                split: None,
                timings: Vec::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
            },
            out_dir: out_dir.to_path_buf(),
        }
    }

    pub fn time<T>(&mut self, stage: impl Into<String>, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
        let start = Instant::now();
        let out = f()?;
        self.record.timings.push(StageTiming {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        for p in with_companions(path) {
            let hash = sha256_file(&p)?;
            self.record.inputs.insert(p.display().to_string(), hash);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        for p in with_companions(path) {
            let hash = sha256_file(&p)?;
            let key = p.strip_prefix(&self.out_dir).unwrap_or(&p).display().to_string();
            self.record.outputs.insert(key, hash);
        }
        Ok(())
    }

    pub fn split(&mut self, plan: SplitPlan) {
        self.record.split = Some(plan);
    }

    pub fn finish(self) -> CliResult<(PathBuf, RunRecord)> {
        let path = RunManifest::append(&self.out_dir, self.record.clone())?;
        Ok((path, self.record))
    }
}
