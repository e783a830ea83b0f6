use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use volseg_cli::manifest::RunManifest;
use volseg_core::metrics::SummaryTable;
use volseg_core::sampler::SplitPlan;
use volseg_core::volume::{load_mask_mhd, load_mhd, save_mhd};
use volseg_core::Volume;

const CONFIG: &str = r#"
[resample]
full_target = [32, 32]
low_target = [16, 16]

[diffusion]
n_iters = 2

[sampler]
patches_per_volume = 6
seed = 3

[train]
epochs = 2
lr = 0.05

[net]
conv_channels = [2, 2, 3, 3]
fc_channels = [4, 4]
p_full = 11
p_low = 11

[infer]
tile = [16, 16, 16]
"#;

fn volseg(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_volseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap_or(-1)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    root: PathBuf,
}

impl Run {
    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn config(&self) -> PathBuf {
        self.root.join("pipeline.toml")
    }

    fn outputs(&self, stage: &str) -> BTreeMap<String, String> {
        let m = RunManifest::load(&self.dir(stage).join("manifest.json")).unwrap();
        m.runs.last().unwrap().outputs.clone()
    }
}

/// phantom -> preprocess -> train -> infer -> evaluate in `root`.
fn pipeline(root: &Path) -> Run {
    let run = Run { root: root.to_path_buf() };
    std::fs::write(run.config(), CONFIG).unwrap();
    let cfg = run.config();
    let (raw, pre, model, pred, eval) = (run.dir("raw"), run.dir("pre"), run.dir("model"), run.dir("pred"), run.dir("eval"));
    assert_eq!(volseg(&["phantom", "--output", s(&raw), "--count", "5", "--seed", "40", "--dims", "24", "24", "20"]), 0);
    assert_eq!(volseg(&["preprocess", "--config", s(&cfg), "--input", s(&raw), "--output", s(&pre)]), 0);
    assert_eq!(volseg(&["train", "--config", s(&cfg), "--input", s(&pre), "--output", s(&model)]), 0);
    let model_file = model.join("model.json");
    assert_eq!(
        volseg(&["infer", "--config", s(&cfg), "--input", s(&pre), "--output", s(&pred), "--model", s(&model_file), "--crf"]),
        0
    );
    assert_eq!(
        volseg(&["evaluate", "--config", s(&cfg), "--input", s(&pred), "--output", s(&eval), "--truth", s(&pre)]),
        0
    );
    run
}

#[test]
fn pipeline_is_deterministic_and_replays() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = pipeline(a.path());
    let rb = pipeline(b.path());

    for stage in ["raw", "pre", "model", "pred", "eval"] {
        let oa = ra.outputs(stage);
        assert!(!oa.is_empty(), "{stage} recorded no outputs");
        assert_eq!(oa, rb.outputs(stage), "{stage} outputs differ between runs");
    }

    let full = load_mhd(ra.dir("pre").join("phantom_000_full.mhd")).unwrap();
    assert_eq!(full.dims(), [32, 32, 20]);
    assert!(full.voxels().iter().all(|v| (0.0..=255.0).contains(v)));
    assert_eq!(load_mhd(ra.dir("pre").join("phantom_000_low.mhd")).unwrap().dims(), [16, 16, 20]);

    let split: SplitPlan =
        serde_json::from_str(&std::fs::read_to_string(ra.dir("model").join("split.json")).unwrap()).unwrap();
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (4, 1, 0));
    let manifest = RunManifest::load(&ra.dir("model").join("manifest.json")).unwrap();
    assert_eq!(manifest.runs[0].split.as_ref(), Some(&split));
    assert!(manifest.runs[0].timings.iter().any(|t| t.stage == "train"));

    let loss = std::fs::read_to_string(ra.dir("model").join("loss.csv")).unwrap();
    let rows: Vec<&str> = loss.lines().collect();
    assert_eq!(rows[0], "epoch,loss,val_dsc");
    assert_eq!(rows.len(), 3);
    assert!(rows[1..].iter().all(|r| r.split(',').nth(2).is_some_and(|v| !v.is_empty())));

    let pred = load_mask_mhd(ra.dir("pred").join("phantom_000_pred.mhd")).unwrap();
    assert_eq!(pred.dims(), [32, 32, 20]);
    let summary: SummaryTable =
        serde_json::from_str(&std::fs::read_to_string(ra.dir("eval").join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.datasets[0].volumes, 5);
    let csv = std::fs::read_to_string(ra.dir("eval").join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    for stage in ["pre", "model", "pred"] {
        let manifest = ra.dir(stage).join("manifest.json");
        assert_eq!(volseg(&["replay", s(&manifest)]), 0, "replay of {stage}");
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run { root: dir.path().to_path_buf() };
    std::fs::write(run.config(), CONFIG).unwrap();
    let raw = run.dir("raw");
    let pre = run.dir("pre");
    assert_eq!(volseg(&["phantom", "--output", s(&raw), "--count", "1", "--dims", "16", "16", "16"]), 0);
    assert_eq!(
        volseg(&[
            "preprocess",
            "--config",
            s(&run.config()),
            "--input",
            s(&raw),
            "--output",
            s(&pre),
            "--set",
            "resample.full_target=[20, 18]",
        ]),
        0
    );
    assert_eq!(load_mhd(pre.join("phantom_000_full.mhd")).unwrap().dims(), [20, 18, 16]);
    let m = RunManifest::load(&pre.join("manifest.json")).unwrap();
    assert_eq!(m.runs[0].config.resample.full_target, [20, 18]);
    assert_eq!(m.runs[0].config.resample.low_target, [16, 16]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run { root: dir.path().to_path_buf() };
    std::fs::write(run.config(), CONFIG).unwrap();
    let cfg = run.config();
    let (raw, pre, out) = (run.dir("raw"), run.dir("pre"), run.dir("out"));
    let empty = run.dir("empty");
    std::fs::create_dir_all(&empty).unwrap();

    // Configuration problems.
    assert_eq!(volseg(&["train", "--input", s(&empty), "--output", s(&out)]), 2, "empty training split");
    assert_eq!(volseg(&["preprocess", "--input", s(&empty), "--output", s(&out), "--set", "diffusion.dt=0.9"]), 2);
    assert_eq!(volseg(&["preprocess", "--input", s(&empty), "--output", s(&out), "--set", "net.bogus=1"]), 2);
    assert_eq!(volseg(&["preprocess", "--output", s(&out)]), 2, "no input directory");
    assert_eq!(volseg(&["frobnicate"]), 2);
    assert_eq!(volseg(&["--help"]), 0);

    // Data problems.
    assert_eq!(volseg(&["preprocess", "--input", s(&empty), "--output", s(&out)]), 3, "no volumes");
    std::fs::write(empty.join("broken.mhd"), "NDims = 3\nDimSize = 2 2\n").unwrap();
    assert_eq!(volseg(&["preprocess", "--input", s(&empty), "--output", s(&out)]), 3, "malformed header");

    // Divergence.
    assert_eq!(volseg(&["phantom", "--output", s(&raw), "--count", "3", "--dims", "24", "24", "16"]), 0);
    assert_eq!(volseg(&["preprocess", "--config", s(&cfg), "--input", s(&raw), "--output", s(&pre)]), 0);
    assert_eq!(
        volseg(&["train", "--config", s(&cfg), "--input", s(&pre), "--output", s(&out), "--lr", "1e300", "--epochs", "5"]),
        4
    );
}

#[test]
fn clinical_resolution_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let pre = dir.path().join("pre");
    std::fs::create_dir_all(&raw).unwrap();
    let vol = Volume::from_fn([512, 512, 40], [0.7, 0.7, 2.5], volseg_core::Unit::Hu, |x, y, z| {
        ((x * 3 + y * 5 + z * 11) % 400) as f32 - 150.0
    })
    .unwrap();
    save_mhd(&vol, raw.join("ct.mhd")).unwrap();
    assert_eq!(
        volseg(&["preprocess", "--input", s(&raw), "--output", s(&pre), "--set", "diffusion.n_iters=1"]),
        0
    );
    let full = load_mhd(pre.join("ct_full.mhd")).unwrap();
    let low = load_mhd(pre.join("ct_low.mhd")).unwrap();
    assert_eq!(full.dims(), [265, 265, 40]);
    assert_eq!(low.dims(), [128, 128, 40]);
    assert!(full.voxels().iter().chain(low.voxels()).all(|v| (0.0..=255.0).contains(v)));
}
