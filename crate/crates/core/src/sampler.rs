//! Train/validation/test splitting and co-centred dual-resolution patches.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelMask, Volume};

pub const DEFAULT_P_FULL: usize = 25;
pub const DEFAULT_P_LOW: usize = 25;
pub const DEFAULT_FG_FRACTION: f64 = 0.5;

/// Disjoint train/validation/test partition of volume ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Partition sizes for `n` volumes: round(0.7 n), round(0.1 n), remainder.
/// Halves round up; integer arithmetic keeps this exact.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (7 * n + 5) / 10;
    let val = (n + 5) / 10;
    (train, val, n - train - val)
}

/// Seeded shuffle followed by a 70/10/20 partition.
pub fn split_volumes(ids: &[String], seed: u64) -> Result<SplitPlan> {
    if ids.is_empty() {
        return Err(Error::Parameter("cannot split an empty id list".into()));
    }
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Parameter(format!("duplicate volume id {id:?}")));
        }
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = split_sizes(ids.len());
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(SplitPlan {
        train: shuffled,
        val,
        test,
        seed,
    })
}

/// Cubic intensity block, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub edge: usize,
    pub data: Vec<f32>,
}

impl Patch {
    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[x + self.edge * (y + self.edge * z)]
    }
}

/// Cubic label block, x-fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelPatch {
    pub edge: usize,
    pub data: Vec<u8>,
}

/// Full- and low-resolution patches sharing a world-space centre.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub full_patch: Patch,
    pub low_patch: Patch,
    /// World position (mm) of the full-resolution centre voxel.
    pub center_world: [f64; 3],
    pub full_center: [i64; 3],
    pub low_center: [i64; 3],
    pub full_grid: Grid,
    pub low_grid: Grid,
    /// Labels covering the network's output footprint, when sampled for training.
    pub label_patch: Option<LabelPatch>,
}

fn extract_block(vol: &Volume, center: [i64; 3], edge: usize) -> Patch {
    let h = (edge / 2) as i64;
    let mut data = Vec::with_capacity(edge * edge * edge);
    for dz in -h..=h {
        for dy in -h..=h {
            for dx in -h..=h {
                data.push(vol.get_clamped(center[0] + dx, center[1] + dy, center[2] + dz));
            }
        }
    }
    Patch { edge, data }
}

fn extract_labels(mask: &LabelMask, center: [i64; 3], edge: usize) -> LabelPatch {
    let h = (edge / 2) as i64;
    let mut data = Vec::with_capacity(edge * edge * edge);
    for dz in -h..=h {
        for dy in -h..=h {
            for dx in -h..=h {
                data.push(mask.get_clamped(center[0] + dx, center[1] + dy, center[2] + dz));
            }
        }
    }
    LabelPatch { edge, data }
}

/// Low-resolution voxel whose centre is nearest to full-resolution voxel `index`.
pub fn low_index_for(full: &Grid, low: &Grid, index: [i64; 3]) -> [i64; 3] {
    [
        low.map_index_from(full, 0, index[0]),
        low.map_index_from(full, 1, index[1]),
        low.map_index_from(full, 2, index[2]),
    ]
}

/// Cuts a `p_full`-cube around `center` from `full` and a `p_low`-cube from
/// `low` around the low-resolution voxel nearest the same world point.
/// Reads outside either volume are edge-clamped.
pub fn extract_patch_pair(
    full: &Volume,
    low: &Volume,
    center: [usize; 3],
    p_full: usize,
    p_low: usize,
) -> Result<PatchPair> {
    if p_full % 2 == 0 || p_low % 2 == 0 || p_full == 0 || p_low == 0 {
        return Err(Error::Parameter(format!(
            "patch edges must be odd, got p_full = {p_full}, p_low = {p_low}"
        )));
    }
    let dims = full.dims();
    if (0..3).any(|a| center[a] >= dims[a]) {
        return Err(Error::Parameter(format!(
            "centre {center:?} outside volume {dims:?}"
        )));
    }
    let full_center = [center[0] as i64, center[1] as i64, center[2] as i64];
    let low_center = low_index_for(full.grid(), low.grid(), full_center);
    let center_world = full
        .grid()
        .world([center[0] as f64, center[1] as f64, center[2] as f64]);
    Ok(PatchPair {
        full_patch: extract_block(full, full_center, p_full),
        low_patch: extract_block(low, low_center, p_low),
        center_world,
        full_center,
        low_center,
        full_grid: *full.grid(),
        low_grid: *low.grid(),
        label_patch: None,
    })
}

/// Patch edges and the label footprint a network needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub p_full: usize,
    pub p_low: usize,
    pub label_edge: usize,
}

/// Draws `round(fg_fraction * n)` centres uniformly from foreground voxels
/// and the rest uniformly from background voxels, foreground first.
pub fn sample_centers(
    mask: &LabelMask,
    n: usize,
    fg_fraction: f64,
    seed: u64,
) -> Result<Vec<[usize; 3]>> {
    if !(0.0..=1.0).contains(&fg_fraction) {
        return Err(Error::Parameter(format!(
            "fg_fraction must lie in [0, 1], got {fg_fraction}"
        )));
    }
    let n_fg = (fg_fraction * n as f64).round() as usize;
    let n_bg = n - n_fg;
    let dims = mask.dims();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if mask.get(x, y, z) == 1 {
                    fg.push([x, y, z]);
                } else {
                    bg.push([x, y, z]);
                }
            }
        }
    }
    if n_fg > 0 && fg.is_empty() {
        return Err(Error::Sampling(
            "foreground centres requested but the mask is empty".into(),
        ));
    }
    if n_bg > 0 && bg.is_empty() {
        return Err(Error::Sampling(
            "background centres requested but the mask has no background".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(n);
    centers.extend((0..n_fg).map(|_| fg[rng.random_range(0..fg.len())]));
    centers.extend((0..n_bg).map(|_| bg[rng.random_range(0..bg.len())]));
    Ok(centers)
}

/// Class-balanced training patches with labels over the output footprint.
pub fn sample_training_batch(
    full: &Volume,
    low: &Volume,
    mask: &LabelMask,
    n: usize,
    fg_fraction: f64,
    geometry: PatchGeometry,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    mask.check_matches(full)?;
    if geometry.label_edge % 2 == 0 || geometry.label_edge > geometry.p_full {
        return Err(Error::Parameter(format!(
            "label edge {} must be odd and no larger than p_full {}",
            geometry.label_edge, geometry.p_full
        )));
    }
    sample_centers(mask, n, fg_fraction, seed)?
        .into_iter()
        .map(|c| {
            let mut pair = extract_patch_pair(full, low, c, geometry.p_full, geometry.p_low)?;
            pair.label_patch = Some(extract_labels(mask, pair.full_center, geometry.label_edge));
            Ok(pair)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::downsample_low_pathway;
    use crate::volume::Unit;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("vol{i:03}")).collect()
    }

    #[test]
    fn split_sizes_match_ratios() {
        let p = split_volumes(&ids(10), 1).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (7, 1, 2));
        let p = split_volumes(&ids(250), 1).unwrap();
        assert_eq!((p.train.len(), p.val.len(), p.test.len()), (175, 25, 50));
    }

    #[test]
    fn split_is_deterministic_and_rejects_duplicates() {
        assert_eq!(split_volumes(&ids(37), 9).unwrap(), split_volumes(&ids(37), 9).unwrap());
        assert_ne!(split_volumes(&ids(37), 9).unwrap(), split_volumes(&ids(37), 10).unwrap());
        let mut dup = ids(4);
        dup.push("vol001".into());
        assert!(matches!(split_volumes(&dup, 0), Err(Error::Parameter(_))));
        assert!(split_volumes(&[], 0).is_err());
    }

    #[test]
    fn split_plan_json_layout() {
        let p = split_volumes(&ids(3), 4).unwrap();
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        for key in ["train", "val", "test", "seed"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    proptest! {
        #[test]
        fn split_partitions_every_n(n in 3usize..400, seed in 0u64..1000) {
            let all = ids(n);
            let p = split_volumes(&all, seed).unwrap();
            let (a, b, c) = (p.train.len(), p.val.len(), p.test.len());
            prop_assert_eq!(a, ((7 * n) as f64 / 10.0).round() as usize);
            prop_assert_eq!(b, (n as f64 / 10.0).round() as usize);
            prop_assert_eq!(a + b + c, n);
            let mut union: Vec<String> = p.train.iter().chain(&p.val).chain(&p.test).cloned().collect();
            union.sort();
            prop_assert_eq!(union, all);
        }
    }

    fn ramp(dims: [usize; 3]) -> Volume {
        Volume::from_fn(dims, [1.0; 3], Unit::Hu, |x, y, z| (x + 100 * y + 10_000 * z) as f32)
            .unwrap()
    }

    #[test]
    fn whole_volume_patch() {
        let v = ramp([5, 5, 5]);
        let pair = extract_patch_pair(&v, &v, [2, 2, 2], 5, 5).unwrap();
        assert_eq!(pair.full_patch.data, v.voxels());
        assert_eq!(pair.low_patch.data, v.voxels());
    }

    #[test]
    fn constant_volumes_give_constant_patches() {
        let full = Volume::filled([20, 20, 10], 7.0, Unit::Grey).unwrap();
        let low = downsample_low_pathway(&full, (9, 9)).unwrap();
        let low = Volume::new(low.dims(), low.spacing(), low.origin(), vec![3.0; low.len()], Unit::Grey)
            .unwrap();
        let pair = extract_patch_pair(&full, &low, [0, 19, 5], 25, 19).unwrap();
        assert!(pair.full_patch.data.iter().all(|&v| v == 7.0));
        assert!(pair.low_patch.data.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn even_edges_rejected() {
        let v = ramp([6, 6, 6]);
        assert!(matches!(extract_patch_pair(&v, &v, [1, 1, 1], 4, 3), Err(Error::Parameter(_))));
        assert!(matches!(extract_patch_pair(&v, &v, [1, 1, 1], 3, 2), Err(Error::Parameter(_))));
    }

    #[test]
    fn shifting_center_shifts_content() {
        let v = ramp([20, 20, 20]);
        let a = extract_patch_pair(&v, &v, [9, 9, 9], 7, 3).unwrap();
        let b = extract_patch_pair(&v, &v, [10, 9, 9], 7, 3).unwrap();
        for z in 0..7 {
            for y in 0..7 {
                for x in 0..6 {
                    assert_eq!(a.full_patch.get(x + 1, y, z), b.full_patch.get(x, y, z));
                }
            }
        }
    }

    #[test]
    fn low_center_tracks_world_position() {
        let full = Volume::new(
            [61, 47, 9],
            [0.8, 0.9, 2.0],
            [-12.0, 5.5, 30.0],
            vec![0.0; 61 * 47 * 9],
            Unit::Grey,
        )
        .unwrap();
        let low = downsample_low_pathway(&full, (29, 17)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let c = [rng.random_range(0..61), rng.random_range(0..47), rng.random_range(0..9)];
            let pair = extract_patch_pair(&full, &low, c, 5, 3).unwrap();
            // Oracle: world coordinates straight from spacing and origin.
            for a in 0..3 {
                let world_full = full.origin()[a] + c[a] as f64 * full.spacing()[a];
                let world_low = low.origin()[a] + pair.low_center[a] as f64 * low.spacing()[a];
                assert!((world_full - world_low).abs() <= 0.5 * low.spacing()[a] + 1e-9);
                assert_eq!(world_full, pair.center_world[a]);
            }
        }
    }

    fn half_mask(dims: [usize; 3]) -> LabelMask {
        LabelMask::from_fn(dims, |x, y, z| x + y + z < 6).unwrap()
    }

    #[test]
    fn foreground_centers_lie_on_foreground() {
        let m = half_mask([8, 8, 8]);
        for c in sample_centers(&m, 50, 1.0, 3).unwrap() {
            assert_eq!(m.get(c[0], c[1], c[2]), 1);
        }
        let v = ramp([8, 8, 8]);
        let g = PatchGeometry { p_full: 5, p_low: 3, label_edge: 3 };
        let batch = sample_training_batch(&v, &v, &m, 10, 0.5, g, 1).unwrap();
        let fg = batch
            .iter()
            .filter(|p| {
                let c = p.full_center;
                m.get(c[0] as usize, c[1] as usize, c[2] as usize) == 1
            })
            .count();
        assert_eq!(fg, 5);
        assert!(batch.iter().all(|p| p.label_patch.as_ref().unwrap().edge == 3));
    }

    #[test]
    fn sampling_needs_foreground() {
        let m = LabelMask::zeros([4, 4, 4]).unwrap();
        assert!(matches!(sample_centers(&m, 4, 0.5, 0), Err(Error::Sampling(_))));
        assert_eq!(sample_centers(&m, 4, 0.0, 0).unwrap().len(), 4);
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = half_mask([8, 8, 8]);
        assert_eq!(sample_centers(&m, 40, 0.3, 8).unwrap(), sample_centers(&m, 40, 0.3, 8).unwrap());
    }
}
