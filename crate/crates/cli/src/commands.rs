use std::fs;
use std::path::{Path, PathBuf};

use volseg_core::metrics::{aggregate, compute_metrics, confusion, reports_to_csv, MetricReport};
use volseg_core::network::{
    build_network, check_pathway_coverage, crf_refine_local, infer_dense_tiled, load_network,
    save_network, train_with_monitor, Network,
};
use volseg_core::preprocess::{preprocess_mask, preprocess_volume};
use volseg_core::sampler::{sample_training_batch, split_volumes, SplitPlan};
use volseg_core::volume::{load_mask_mhd, load_mhd, make_phantom, save_mask_mhd, save_mhd, PhantomSpec};
use volseg_core::{LabelMask, Unit, Volume};

use crate::args::Common;
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult, StageContext};
use crate::manifest::Recorder;
use crate::overlay::render_overlay;

pub const FULL_SUFFIX: &str = "_full.mhd";
pub const LOW_SUFFIX: &str = "_low.mhd";
pub const FULL_MASK_SUFFIX: &str = "_full_mask.mhd";
pub const MASK_SUFFIX: &str = "_mask.mhd";
pub const PRED_SUFFIX: &str = "_pred.mhd";

/// Resolved configuration plus the directories a stage works in.
pub struct Context {
    pub config: PipelineConfig,
    pub input: PathBuf,
    pub output: PathBuf,
}

impl Context {
    pub fn resolve(common: &Common, extra: &[String]) -> CliResult<Self> {
        let mut sets = common.set.clone();
        sets.extend_from_slice(extra);
        let mut config = PipelineConfig::parse(common.config.as_deref(), &sets)?;
        if let Some(dir) = &common.input {
            config.paths.input_dir = Some(dir.clone());
        }
        if let Some(dir) = &common.output {
            config.paths.output_dir = Some(dir.clone());
        }
        config.validate()?;
        let input = config
            .paths
            .input_dir
            .clone()
            .ok_or_else(|| CliError::Config("no input directory (--input or paths.input_dir)".into()))?;
        let output = config
            .paths
            .output_dir
            .clone()
            .ok_or_else(|| CliError::Config("no output directory (--output or paths.output_dir)".into()))?;
        fs::create_dir_all(&output).map_err(|e| CliError::io(&output, e))?;
        Ok(Context { config, input, output })
    }
}

/// Sorted ids of files in `dir` named `<id><suffix>`.
pub fn list_ids(dir: &Path, suffix: &str, exclude: &[&str]) -> CliResult<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if exclude.iter().any(|x| name.ends_with(x)) {
            continue;
        }
        if let Some(id) = name.strip_suffix(suffix) {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

fn load_grey(path: &Path) -> CliResult<Volume> {
    load_mhd(path)
        .and_then(|v| v.with_unit(Unit::Grey))
        .stage(|| format!("load {}", path.display()))
}

fn load_mask(path: &Path) -> CliResult<LabelMask> {
    load_mask_mhd(path).stage(|| format!("load {}", path.display()))
}

fn write_text(rec: &mut Recorder, path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    rec.output(path)
}

fn write_json<T: serde::Serialize>(rec: &mut Recorder, path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    write_text(rec, path, &text)
}

pub fn preprocess(ctx: &Context, volumes: &[PathBuf], rec: &mut Recorder) -> CliResult<()> {
    let inputs: Vec<PathBuf> = if volumes.is_empty() {
        list_ids(&ctx.input, ".mhd", &[MASK_SUFFIX])?
            .into_iter()
            .map(|id| ctx.input.join(format!("{id}.mhd")))
            .collect()
    } else {
        volumes.to_vec()
    };
    if inputs.is_empty() {
        return Err(CliError::Data(format!("no volumes found in {}", ctx.input.display())));
    }
    let params = ctx.config.preprocess_params();
    for path in &inputs {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::Data(format!("{} has no file name", path.display())))?;
        rec.input(path)?;
        let vol = load_mhd(path).stage(|| format!("preprocess {id}: load"))?;
        let out = rec.time(format!("preprocess:{id}"), || {
            preprocess_volume(&vol, &params).stage(|| format!("preprocess {id}"))
        })?;
        let full_path = ctx.output.join(format!("{id}{FULL_SUFFIX}"));
        let low_path = ctx.output.join(format!("{id}{LOW_SUFFIX}"));
        save_mhd(&out.full, &full_path).stage(|| format!("preprocess {id}: write"))?;
        save_mhd(&out.low, &low_path).stage(|| format!("preprocess {id}: write"))?;
        rec.output(&full_path)?;
        rec.output(&low_path)?;

        let mask_path = path.with_file_name(format!("{id}{MASK_SUFFIX}"));
        if mask_path.exists() {
            rec.input(&mask_path)?;
            let mask = load_mask(&mask_path)?;
            let resized = preprocess_mask(&mask, &params).stage(|| format!("preprocess {id}: mask"))?;
            let out_mask = ctx.output.join(format!("{id}{FULL_MASK_SUFFIX}"));
            save_mask_mhd(&resized, out.full.spacing(), out.full.origin(), &out_mask)
                .stage(|| format!("preprocess {id}: write mask"))?;
            rec.output(&out_mask)?;
        }
        log::info!("preprocessed {id}: {:?} / {:?}", out.full.dims(), out.low.dims());
    }
    Ok(())
}

struct Case {
    id: String,
    full: Volume,
    low: Volume,
    mask: LabelMask,
}

fn load_case(dir: &Path, id: &str, rec: &mut Recorder) -> CliResult<Case> {
    let paths = [FULL_SUFFIX, LOW_SUFFIX, FULL_MASK_SUFFIX].map(|s| dir.join(format!("{id}{s}")));
    for p in &paths {
        rec.input(p)?;
    }
    let case = Case {
        id: id.to_string(),
        full: load_grey(&paths[0])?,
        low: load_grey(&paths[1])?,
        mask: load_mask(&paths[2])?,
    };
    case.mask.check_matches(&case.full).stage(|| format!("{id}: mask"))?;
    Ok(case)
}

fn predict(net: &Network, full: &Volume, low: &Volume, ctx: &Context, crf: bool) -> volseg_core::Result<LabelMask> {
    let probs = infer_dense_tiled(net, full, low, ctx.config.infer.tile)?;
    if !crf {
        return probs.argmax();
    }
    crf_refine_local(&probs, full, &ctx.config.crf)
}

fn dice(pred: &LabelMask, truth: &LabelMask, id: &str) -> volseg_core::Result<MetricReport> {
    compute_metrics(id, &confusion(pred, truth)?)
}

pub fn train(ctx: &Context, rec: &mut Recorder) -> CliResult<()> {
    let cfg = &ctx.config;
    let ids = list_ids(&ctx.input, FULL_MASK_SUFFIX, &[])?;
    let plan = split_volumes(&ids, cfg.sampler.seed)
        .map_err(|e| CliError::Config(format!("cannot form a training split from {}: {e}", ctx.input.display())))?;
    if plan.train.is_empty() {
        return Err(CliError::Config("the training split is empty".into()));
    }
    write_json(rec, &ctx.output.join("split.json"), &plan)?;
    rec.split(plan.clone());

    let geometry = cfg.net.patch_geometry().stage(|| "train: net".into())?;
    let mut batches = Vec::with_capacity(plan.train.len());
    for (i, id) in plan.train.iter().enumerate() {
        let case = load_case(&ctx.input, id, rec)?;
        check_pathway_coverage(&cfg.net, &case.full, &case.low).stage(|| format!("train {id}"))?;
        let seed = cfg.sampler.seed.wrapping_add(i as u64);
        let batch = sample_training_batch(
            &case.full,
            &case.low,
            &case.mask,
            cfg.sampler.patches_per_volume,
            cfg.sampler.fg_fraction,
            geometry,
            seed,
        )
        .stage(|| format!("train {id}: sampling"))?;
        batches.push(batch);
    }
    let val: Vec<Case> = plan
        .val
        .iter()
        .map(|id| load_case(&ctx.input, id, rec))
        .collect::<CliResult<_>>()?;

    let init = build_network(&cfg.net, cfg.train.seed).stage(|| "train: init".into())?;
    let mut val_trace: Vec<Option<f64>> = Vec::new();
    let mut best: Option<(f64, Network)> = None;
    let mut monitor_err = None;
    let (last, report) = rec.time("train", || {
        train_with_monitor(&init, &batches, cfg.train.lr, cfg.train.epochs, cfg.train.seed, |epoch, net, loss| {
            if monitor_err.is_some() || val.is_empty() {
                log::info!("epoch {epoch}: loss {loss:.5}");
                val_trace.push(None);
                return;
            }
            let scores: volseg_core::Result<Vec<f64>> = val
                .iter()
                .map(|c| Ok(dice(&predict(net, &c.full, &c.low, ctx, false)?, &c.mask, &c.id)?.dsc))
                .collect();
            match scores {
                Ok(s) => {
                    let mean = s.iter().sum::<f64>() / s.len() as f64;
                    log::info!("epoch {epoch}: loss {loss:.5}, validation DSC {mean:.4}");
                    val_trace.push(Some(mean));
                    if best.as_ref().is_none_or(|(b, _)| mean > *b) {
                        best = Some((mean, net.clone()));
                    }
                }
                Err(e) => {
                    val_trace.push(None);
                    monitor_err = Some(e);
                }
            }
        })
        .stage(|| "train".into())
    })?;
    if let Some(e) = monitor_err {
        return Err(CliError::Stage {
            context: "train: validation".into(),
            source: e,
        });
    }
    let net = best.map(|(_, n)| n).unwrap_or(last);

    let model_path = ctx.output.join("model.json");
    let bin = save_network(&net, &model_path).stage(|| "train: save model".into())?;
    rec.output(&model_path)?;
    rec.output(&bin)?;
    let mut csv = String::from("epoch,loss,val_dsc\n");
    for (epoch, (loss, v)) in report.loss_trace.iter().zip(&val_trace).enumerate() {
        let v = v.map(|d| d.to_string()).unwrap_or_default();
        csv.push_str(&format!("{epoch},{loss},{v}\n"));
    }
    write_text(rec, &ctx.output.join("loss.csv"), &csv)
}

pub fn infer(ctx: &Context, model: &Path, crf: bool, split: Option<&Path>, ids: &[String], rec: &mut Recorder) -> CliResult<()> {
    rec.input(model)?;
    rec.input(&model.with_extension("bin"))?;
    let net = load_network(model).stage(|| format!("infer: load {}", model.display()))?;
    let ids = if !ids.is_empty() {
        ids.to_vec()
    } else if let Some(path) = split {
        rec.input(path)?;
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let plan: SplitPlan = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        plan.test
    } else {
        list_ids(&ctx.input, FULL_SUFFIX, &[])?
    };
    if ids.is_empty() {
        return Err(CliError::Data("no volumes to label".into()));
    }
    let crf = crf || ctx.config.infer.crf;
    for id in &ids {
        let full_path = ctx.input.join(format!("{id}{FULL_SUFFIX}"));
        let low_path = ctx.input.join(format!("{id}{LOW_SUFFIX}"));
        rec.input(&full_path)?;
        rec.input(&low_path)?;
        let full = load_grey(&full_path)?;
        let low = load_grey(&low_path)?;
        let labels = rec.time(format!("infer:{id}"), || {
            predict(&net, &full, &low, ctx, crf).stage(|| format!("infer {id}"))
        })?;
        let out = ctx.output.join(format!("{id}{PRED_SUFFIX}"));
        save_mask_mhd(&labels, full.spacing(), full.origin(), &out).stage(|| format!("infer {id}: write"))?;
        rec.output(&out)?;
        log::info!("labelled {id}: {} foreground voxels", labels.count_foreground());
    }
    Ok(())
}

pub fn evaluate(ctx: &Context, truth: &Path, dataset: &str, rec: &mut Recorder) -> CliResult<()> {
    let ids = list_ids(&ctx.input, PRED_SUFFIX, &[])?;
    if ids.is_empty() {
        return Err(CliError::Data(format!("no predictions in {}", ctx.input.display())));
    }
    let mut reports = Vec::with_capacity(ids.len());
    for id in &ids {
        let pred_path = ctx.input.join(format!("{id}{PRED_SUFFIX}"));
        let truth_path = truth.join(format!("{id}{FULL_MASK_SUFFIX}"));
        if !truth_path.exists() {
            return Err(CliError::Data(format!("no reference mask {}", truth_path.display())));
        }
        rec.input(&pred_path)?;
        rec.input(&truth_path)?;
        let report = dice(&load_mask(&pred_path)?, &load_mask(&truth_path)?, id).stage(|| format!("evaluate {id}"))?;
        log::info!("{id}: DSC {:.4}", report.dsc);
        reports.push(report);
    }
    let summary = aggregate(&[(dataset.to_string(), reports.clone())]).stage(|| "evaluate".into())?;
    write_text(rec, &ctx.output.join("metrics.csv"), &reports_to_csv(&reports))?;
    write_json(rec, &ctx.output.join("summary.json"), &summary)
}

pub fn overlay(volume: &Path, mask: &Path, slice: usize, output: &Path, rec: &mut Recorder) -> CliResult<()> {
    rec.input(volume)?;
    rec.input(mask)?;
    let vol = load_grey(volume)?;
    let mask = load_mask(mask)?;
    let img = render_overlay(&vol, &mask, slice).stage(|| "overlay".into())?;
    img.save_with_format(output, image::ImageFormat::Png)
        .map_err(|e| CliError::Data(format!("{}: {e}", output.display())))?;
    rec.output(output)
}

pub fn phantom(output: &Path, count: usize, seed: u64, dims: [usize; 3], rec: &mut Recorder) -> CliResult<()> {
    if count == 0 {
        return Err(CliError::Config("--count must be > 0".into()));
    }
    for i in 0..count {
        let id = format!("phantom_{i:03}");
        let spec = PhantomSpec {
            dims,
            ..PhantomSpec::with_seed(seed.wrapping_add(i as u64))
        };
        let (vol, mask) = make_phantom(&spec).stage(|| format!("phantom {id}"))?;
        let vol_path = output.join(format!("{id}.mhd"));
        let mask_path = output.join(format!("{id}{MASK_SUFFIX}"));
        save_mhd(&vol, &vol_path).stage(|| format!("phantom {id}: write"))?;
        save_mask_mhd(&mask, vol.spacing(), vol.origin(), &mask_path).stage(|| format!("phantom {id}: write"))?;
        rec.output(&vol_path)?;
        rec.output(&mask_path)?;
    }
    Ok(())
}
