use volseg_core::network::{
    build_network, crf_marginals, crf_refine, crf_refine_local, infer_dense, infer_dense_tiled, load_network,
    save_network, train, train_with_monitor, CrfParams, NetConfig, ProbabilityMap,
};
use volseg_core::preprocess::{preprocess_volume, PreprocessParams};
use volseg_core::sampler::{sample_training_batch, PatchPair};
use volseg_core::volume::{make_phantom, voxel_count, Grid, PhantomSpec, Unit, Volume};
use volseg_core::Error;

fn tiny_config() -> NetConfig {
    NetConfig {
        conv_channels: [2, 2, 3, 3],
        fc_channels: [4, 4],
        p_full: 11,
        p_low: 11,
        ..NetConfig::default()
    }
}

fn phantom_pair(seed: u64, dims: [usize; 3]) -> (Volume, Volume, volseg_core::LabelMask) {
    let (v, m) = make_phantom(&PhantomSpec {
        dims,
        ..PhantomSpec::with_seed(seed)
    })
    .unwrap();
    let params = PreprocessParams {
        full_target: None,
        low_target: (dims[0] / 2, dims[1] / 2),
        ..PreprocessParams::default()
    };
    let p = preprocess_volume(&v, &params).unwrap();
    (p.full, p.low, m)
}

fn batch(cfg: &NetConfig, seed: u64, n: usize) -> Vec<PatchPair> {
    let (full, low, m) = phantom_pair(seed, [20, 20, 16]);
    sample_training_batch(&full, &low, &m, n, 0.5, cfg.patch_geometry().unwrap(), seed).unwrap()
}

#[test]
fn fixed_batch_loss_decreases() {
    let cfg = tiny_config();
    let net = build_network(&cfg, 1).unwrap();
    let batches = vec![batch(&cfg, 1, 4)];
    let (_, report) = train(&net, &batches, 0.01, 10, 0).unwrap();
    for w in report.loss_trace.windows(2) {
        assert!(w[1] < w[0], "loss rose: {:?}", report.loss_trace);
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = tiny_config();
    let net = build_network(&cfg, 2).unwrap();
    let (trained, _) = train(&net, &[batch(&cfg, 2, 2)], 0.0, 3, 0).unwrap();
    assert_eq!(trained.weight_bytes(), net.weight_bytes());
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_config();
    let net = build_network(&cfg, 3).unwrap();
    let batches = vec![batch(&cfg, 3, 2), batch(&cfg, 4, 2)];
    let (a, ra) = train(&net, &batches, 0.05, 3, 9).unwrap();
    let (b, rb) = train(&net, &batches, 0.05, 3, 9).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a.weight_bytes(), b.weight_bytes());
}

#[test]
fn divergence_reports_epoch() {
    let cfg = tiny_config();
    let net = build_network(&cfg, 4).unwrap();
    let batches = vec![batch(&cfg, 5, 2)];
    let mut epochs_seen = 0;
    let err = train_with_monitor(&net, &batches, 1e300, 5, 0, |_, _, _| epochs_seen += 1).unwrap_err();
    match err {
        Error::Divergence { epoch, .. } => assert_eq!(epoch, epochs_seen),
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn empty_batches_rejected() {
    let net = build_network(&tiny_config(), 0).unwrap();
    assert!(matches!(train(&net, &[], 0.1, 1, 0), Err(Error::Parameter(_))));
    assert!(matches!(train(&net, &[vec![]], 0.1, 1, 0), Err(Error::Parameter(_))));
}

#[test]
fn model_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let net = build_network(&NetConfig::default(), 11).unwrap();
    let bin = save_network(&net, &path).unwrap();
    assert_eq!(load_network(&path).unwrap(), net);

    let mut bytes = std::fs::read(&bin).unwrap();
    bytes[10] ^= 1;
    std::fs::write(&bin, &bytes).unwrap();
    assert!(matches!(load_network(&path), Err(Error::Model(_))));
    bytes.pop();
    std::fs::write(&bin, &bytes).unwrap();
    assert!(matches!(load_network(&path), Err(Error::CorruptPayload { .. })));
}

#[test]
fn inference_covers_every_voxel() {
    let (full, low, _) = phantom_pair(12, [22, 21, 16]);
    let net = build_network(&tiny_config(), 12).unwrap();
    let probs = infer_dense(&net, &full, &low).unwrap();
    assert_eq!(probs.dims, full.dims());
    let n = voxel_count(probs.dims);
    for v in 0..n {
        let s: f32 = (0..probs.n_classes).map(|c| probs.probs[c * n + v]).sum();
        assert!((s - 1.0).abs() <= 1e-5);
    }
    let tiled = infer_dense_tiled(&net, &full, &low, [5, 7, 3]).unwrap();
    assert_eq!(tiled, probs);
}

#[test]
fn inference_rejects_small_volumes() {
    let net = build_network(&tiny_config(), 0).unwrap();
    let v = Volume::filled([8, 20, 20], 10.0, Unit::Grey).unwrap();
    assert!(matches!(infer_dense(&net, &v, &v), Err(Error::Shape(_))));
}

fn grid() -> Grid {
    Grid {
        spacing: [1.0; 3],
        origin: [0.0; 3],
    }
}

/// Background-leaning probabilities with one confident foreground voxel.
fn isolated_false_positive() -> (ProbabilityMap, Volume) {
    let dims = [8, 8, 8];
    let n = voxel_count(dims);
    let centre = 4 + 8 * (4 + 8 * 4);
    let mut fg = vec![0.2f32; n];
    fg[centre] = 0.8;
    let bg: Vec<f32> = fg.iter().map(|p| 1.0 - p).collect();
    let probs = ProbabilityMap::new(dims, grid(), 2, [bg, fg].concat()).unwrap();
    let intensity = Volume::filled(dims, 120.0, Unit::Grey).unwrap();
    (probs, intensity)
}

#[test]
fn crf_removes_isolated_false_positive() {
    let (probs, intensity) = isolated_false_positive();
    let centre = (4, 4, 4);
    assert_eq!(probs.argmax().unwrap().get(centre.0, centre.1, centre.2), 1);
    let off = CrfParams {
        w_smooth: 0.0,
        w_app: 0.0,
        ..CrfParams::default()
    };
    assert_eq!(crf_refine(&probs, &intensity, &off).unwrap().count_foreground(), 1);
    let strong = CrfParams {
        w_smooth: 3.0,
        w_app: 0.0,
        ..CrfParams::default()
    };
    let refined = crf_refine(&probs, &intensity, &strong).unwrap();
    assert_eq!(refined.count_foreground(), 0);
}

#[test]
fn marginals_normalized_every_iteration() {
    let (probs, intensity) = isolated_false_positive();
    let p = CrfParams {
        n_meanfield_iters: 6,
        ..CrfParams::default()
    };
    let mut calls = 0;
    crf_marginals(&probs, &intensity, &p, None, |_, q| {
        calls += 1;
        let n = q.len() / 2;
        for v in 0..n {
            assert!((q[v] + q[n + v] - 1.0).abs() <= 1e-6);
        }
    })
    .unwrap();
    assert_eq!(calls, 6);
}

#[test]
fn crf_capacity_and_window() {
    let dims = [41, 40, 40];
    let n = voxel_count(dims);
    let probs = ProbabilityMap::new(dims, grid(), 2, vec![0.5; 2 * n]).unwrap();
    let intensity = Volume::filled(dims, 0.0, Unit::Grey).unwrap();
    assert!(matches!(
        crf_refine(&probs, &intensity, &CrfParams::default()),
        Err(Error::Capacity(_))
    ));

    // A window wider than the volume is the all-pairs model.
    let (probs, intensity) = isolated_false_positive();
    let wide = CrfParams {
        theta_pos: 3.0,
        ..CrfParams::default()
    };
    assert!(wide.local_radius() >= 8);
    let all = crf_marginals(&probs, &intensity, &wide, None, |_, _| {}).unwrap();
    let windowed = crf_marginals(&probs, &intensity, &wide, Some(wide.local_radius()), |_, _| {}).unwrap();
    assert_eq!(all, windowed);
    assert_eq!(
        crf_refine_local(&probs, &intensity, &wide).unwrap(),
        crf_refine(&probs, &intensity, &wide).unwrap()
    );
}

#[test]
fn crf_rejects_bad_parameters() {
    let (probs, intensity) = isolated_false_positive();
    for p in [
        CrfParams {
            w_smooth: -1.0,
            ..CrfParams::default()
        },
        CrfParams {
            theta_int: 0.0,
            ..CrfParams::default()
        },
    ] {
        assert!(matches!(crf_refine(&probs, &intensity, &p), Err(Error::Parameter(_))));
    }
}
