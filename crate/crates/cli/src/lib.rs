//! Command-line orchestration of the segmentation pipeline. Each subcommand
//! reads files, runs one stage and appends a record to `manifest.json` in
//! its output directory.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod overlay;

use std::path::Path;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::Context;
use config::PipelineConfig;
use error::{CliError, CliResult};
use manifest::{Recorder, RunManifest};

/// Parses `args` (without the program name) and runs the subcommand.
pub fn run(args: Vec<String>) -> CliResult<()> {
    let cli = match Cli::try_parse_from(std::iter::once("volseg".to_string()).chain(args.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    match cli.command {
        Command::Preprocess { common, volumes } => {
            let ctx = Context::resolve(&common, &[])?;
            let mut rec = Recorder::new(args, &ctx.config, &ctx.output);
            commands::preprocess(&ctx, &volumes, &mut rec)?;
            rec.finish().map(|_| ())
        }
        Command::Train {
            common,
            epochs,
            lr,
            seed,
        } => {
            let mut extra = Vec::new();
            extra.extend(epochs.map(|v| format!("train.epochs={v}")));
            extra.extend(lr.map(|v| format!("train.lr={v:?}")));
            extra.extend(seed.map(|v| format!("sampler.seed={v}")));
            let ctx = Context::resolve(&common, &extra)?;
            let mut rec = Recorder::new(args, &ctx.config, &ctx.output);
            commands::train(&ctx, &mut rec)?;
            rec.finish().map(|_| ())
        }
        Command::Infer {
            common,
            model,
            crf,
            split,
            ids,
        } => {
            let ctx = Context::resolve(&common, &[])?;
            let mut rec = Recorder::new(args, &ctx.config, &ctx.output);
            commands::infer(&ctx, &model, crf, split.as_deref(), &ids, &mut rec)?;
            rec.finish().map(|_| ())
        }
        Command::Evaluate { common, truth, dataset } => {
            let ctx = Context::resolve(&common, &[])?;
            let mut rec = Recorder::new(args, &ctx.config, &ctx.output);
            commands::evaluate(&ctx, &truth, &dataset, &mut rec)?;
            rec.finish().map(|_| ())
        }
        Command::Overlay {
            volume,
            mask,
            slice,
            output,
        } => {
            let dir = output.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let mut rec = Recorder::new(args.clone(), &PipelineConfig::default(), dir);
            commands::overlay(&volume, &mask, slice, &output, &mut rec)?;
            rec.finish().map(|_| ())
        }
        Command::Phantom {
            output,
            count,
            seed,
            dims,
        } => {
            let dims: [usize; 3] = dims
                .try_into()
                .map_err(|_| CliError::Config("--dims takes three values".into()))?;
            std::fs::create_dir_all(&output).map_err(|e| CliError::io(&output, e))?;
            let mut rec = Recorder::new(args, &PipelineConfig::default(), &output);
            commands::phantom(&output, count, seed, dims, &mut rec)?;
            rec.finish().map(|_| ())
        }
        Command::Replay { manifest, run } => replay(&manifest, run),
    }
}

/// Re-runs a recorded command and compares every output hash.
pub fn replay(manifest_path: &Path, index: Option<usize>) -> CliResult<()> {
    let manifest = RunManifest::load(manifest_path)?;
    let i = index.unwrap_or(manifest.runs.len().saturating_sub(1));
    let record = manifest
        .runs
        .get(i)
        .ok_or_else(|| CliError::Config(format!("manifest has no run {i}")))?;
    if record.command.first().is_some_and(|c| c == "replay") {
        return Err(CliError::Config("refusing to replay a replay".into()));
    }
    run(record.command.clone())?;
    let fresh = RunManifest::load(manifest_path)?;
    let latest = fresh
        .runs
        .last()
        .ok_or_else(|| CliError::Data("manifest vanished during replay".into()))?;
    if latest.outputs != record.outputs {
        let differing: Vec<&String> = record
            .outputs
            .iter()
            .filter(|(k, v)| latest.outputs.get(*k) != Some(*v))
            .map(|(k, _)| k)
            .collect();
        return Err(CliError::Data(format!("replay of run {i} changed outputs: {differing:?}")));
    }
    log::info!("run {i} replayed with {} identical outputs", record.outputs.len());
    Ok(())
}
