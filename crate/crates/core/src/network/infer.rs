//! Dense sliding-window inference.

use super::model::{forward_core, Network};
use super::ops::{softmax, FeatureMap, IndexMaps};
use crate::error::{Error, Result};
use crate::volume::{offset, voxel_count, Dims, Grid, LabelMask, Volume};

/// Per-voxel class probabilities, class-major over an x-fastest grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub dims: Dims,
    pub grid: Grid,
    pub n_classes: usize,
    pub probs: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(dims: Dims, grid: Grid, n_classes: usize, probs: Vec<f32>) -> Result<Self> {
        if probs.len() != n_classes * voxel_count(dims) {
            return Err(Error::Shape(format!(
                "{} probabilities for {n_classes} classes over {dims:?}",
                probs.len()
            )));
        }
        Ok(ProbabilityMap {
            dims,
            grid,
            n_classes,
            probs,
        })
    }

    pub fn class(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.dims);
        &self.probs[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.class(c)[offset(self.dims, x, y, z)]
    }

    /// Most probable class per voxel, ties going to the lower class.
    pub fn argmax(&self) -> Result<LabelMask> {
        let n = voxel_count(self.dims);
        let labels = (0..n)
            .map(|v| {
                let mut best = 0;
                for c in 1..self.n_classes {
                    if self.probs[c * n + v] > self.probs[best * n + v] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask::new(self.dims, labels)
    }

    /// Foreground probability as a volume on the map's grid.
    pub fn foreground(&self) -> Result<Volume> {
        Volume::new(
            self.dims,
            self.grid.spacing,
            self.grid.origin,
            self.class(1).to_vec(),
            crate::volume::Unit::Normalized,
        )
    }
}

fn read_block(vol: &Volume, start: [i64; 3], dims: [usize; 3], scale: f64, shift: f64) -> FeatureMap {
    let mut values = Vec::with_capacity(voxel_count(dims));
    for z in 0..dims[2] as i64 {
        for y in 0..dims[1] as i64 {
            for x in 0..dims[0] as i64 {
                let v = vol.get_clamped(start[0] + x, start[1] + y, start[2] + z);
                values.push(v as f64 * scale - shift);
            }
        }
    }
    FeatureMap {
        channels: 1,
        dims,
        values,
    }
}

/// Probabilities for full-grid voxels in `[start, end)`.
fn infer_region(
    net: &Network,
    params: &[super::ops::ConvWeights],
    full: &Volume,
    low: &Volume,
    start: [usize; 3],
    end: [usize; 3],
) -> Result<FeatureMap> {
    let cfg = &net.config;
    let r = cfg.context_radius() as i64;
    let mut full_start = [0i64; 3];
    let mut full_dims = [0usize; 3];
    let mut low_start = [0i64; 3];
    let mut low_dims = [0usize; 3];
    let mut maps: IndexMaps = Default::default();
    for a in 0..3 {
        full_start[a] = start[a] as i64 - r;
        full_dims[a] = end[a] - start[a] + 2 * r as usize;
        let lows: Vec<i64> = (start[a]..end[a])
            .map(|g| low.grid().map_index_from(full.grid(), a, g as i64))
            .collect();
        let lmin = *lows.iter().min().unwrap();
        let lmax = *lows.iter().max().unwrap();
        low_start[a] = lmin - r;
        low_dims[a] = (lmax - lmin) as usize + 1 + 2 * r as usize;
        maps[a] = lows.iter().map(|&l| (l - lmin) as usize).collect();
    }
    let full_in = read_block(full, full_start, full_dims, cfg.input_scale, cfg.input_shift);
    let low_in = read_block(low, low_start, low_dims, cfg.input_scale, cfg.input_shift);
    let (logits, _) = forward_core(params, cfg, full_in, low_in, maps, false)?;
    Ok(softmax(&logits))
}

/// Whole-volume inference in a single region.
pub fn infer_dense(net: &Network, full: &Volume, low: &Volume) -> Result<ProbabilityMap> {
    infer_dense_tiled(net, full, low, full.dims())
}

/// Sliding-window inference over tiles of at most `tile` voxels. Each
/// voxel is computed exactly once; results do not depend on `tile`.
pub fn infer_dense_tiled(net: &Network, full: &Volume, low: &Volume, tile: [usize; 3]) -> Result<ProbabilityMap> {
    let dims = full.dims();
    let rf = net.config.receptive_field();
    if dims.iter().any(|&d| d < rf) || low.dims().iter().any(|&d| d < rf) {
        return Err(Error::Shape(format!(
            "volumes {dims:?} / {:?} are smaller than the receptive field {rf}",
            low.dims()
        )));
    }
    if tile.contains(&0) {
        return Err(Error::Parameter("tile edges must be >= 1".into()));
    }
    let params = net.params_f64();
    let n_classes = net.config.n_classes;
    let n = voxel_count(dims);
    let mut probs = vec![0f32; n_classes * n];
    for z0 in (0..dims[2]).step_by(tile[2]) {
        for y0 in (0..dims[1]).step_by(tile[1]) {
            for x0 in (0..dims[0]).step_by(tile[0]) {
                let start = [x0, y0, z0];
                let end = [
                    (x0 + tile[0]).min(dims[0]),
                    (y0 + tile[1]).min(dims[1]),
                    (z0 + tile[2]).min(dims[2]),
                ];
                let p = infer_region(net, &params, full, low, start, end)?;
                for c in 0..n_classes {
                    for z in start[2]..end[2] {
                        for y in start[1]..end[1] {
                            for x in start[0]..end[0] {
                                let v = p.get(c, x - start[0], y - start[1], z - start[2]);
                                probs[c * n + offset(dims, x, y, z)] = v as f32;
                            }
                        }
                    }
                }
            }
        }
    }
    ProbabilityMap::new(dims, *full.grid(), n_classes, probs)
}
