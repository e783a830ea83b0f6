//! CT preprocessing stages: in-plane resize, HU windowing, window
//! normalization to `[0, 1]` and greyscale mapping to `[0, 255]`.
//!
//! Each stage is a pure function returning a fresh [`Volume`].

use serde::{Deserialize, Serialize};

use crate::diffusion::{eed_filter, DiffusionParams};
use crate::error::{Error, Result};
use crate::volume::{Dims, Grid, LabelMask, Unit, Volume};

pub const DEFAULT_FULL_TARGET: (usize, usize) = (265, 265);
pub const DEFAULT_LOW_TARGET: (usize, usize) = (128, 128);

/// HU interval of interest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSpec {
    pub hu_min: f32,
    pub hu_max: f32,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            hu_min: -100.0,
            hu_max: 200.0,
        }
    }
}

impl WindowSpec {
    pub fn new(hu_min: f32, hu_max: f32) -> Result<Self> {
        let w = WindowSpec { hu_min, hu_max };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hu_min < self.hu_max) || !self.hu_min.is_finite() || !self.hu_max.is_finite() {
            return Err(Error::Parameter(format!(
                "window requires hu_min < hu_max, got [{}, {}]",
                self.hu_min, self.hu_max
            )));
        }
        Ok(())
    }
}

fn require_unit(vol: &Volume, unit: Unit, stage: &str) -> Result<()> {
    if vol.unit() != unit {
        return Err(Error::Contract(format!(
            "{stage} expects a {unit:?} volume, got {:?}",
            vol.unit()
        )));
    }
    Ok(())
}

/// Source coordinate and interpolation weight for one output sample of a
/// corner-aligned 1D resample from `n_src` to `n_dst` samples.
fn sample_positions(n_src: usize, n_dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = (n_src - 1) as f64 / (n_dst - 1) as f64;
    (0..n_dst)
        .map(|i| {
            let pos = (i as f64 * scale).clamp(0.0, (n_src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(n_src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

fn check_resample_args(dims: Dims, target: (usize, usize)) -> Result<()> {
    if target.0 < 2 || target.1 < 2 {
        return Err(Error::Parameter(format!(
            "resample target must be at least 2x2, got {}x{}",
            target.0, target.1
        )));
    }
    if dims[0] < 2 || dims[1] < 2 {
        return Err(Error::Parameter(format!(
            "resampling needs at least 2 voxels per in-plane axis, got {:?}",
            dims
        )));
    }
    Ok(())
}

fn resampled_grid(vol_dims: Dims, grid: &Grid, target: (usize, usize)) -> Grid {
    let mut spacing = grid.spacing;
    spacing[0] *= (vol_dims[0] - 1) as f64 / (target.0 - 1) as f64;
    spacing[1] *= (vol_dims[1] - 1) as f64 / (target.1 - 1) as f64;
    Grid {
        spacing,
        origin: grid.origin,
    }
}

/// Bilinear per-slice resize of every z-slice to `target` in-plane samples.
///
/// Corner voxel centres stay aligned, so in-plane spacing scales by
/// `(n - 1) / (t - 1)`; z is untouched.
pub fn resample_xy(vol: &Volume, target: (usize, usize)) -> Result<Volume> {
    let dims = vol.dims();
    check_resample_args(dims, target)?;
    let xs = sample_positions(dims[0], target.0);
    let ys = sample_positions(dims[1], target.1);
    let out_dims = [target.0, target.1, dims[2]];
    let mut out = Vec::with_capacity(target.0 * target.1 * dims[2]);
    for z in 0..dims[2] {
        let slice = vol.slice_z(z);
        let at = |x: usize, y: usize| slice[x + dims[0] * y] as f64;
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    let out_vol = Volume::from_parts_unchecked(
        out_dims,
        resampled_grid(dims, vol.grid(), target),
        out,
        vol.unit(),
    );
    Ok(out_vol)
}

/// Second-pathway resize; same contract as [`resample_xy`].
pub fn downsample_low_pathway(vol: &Volume, target: (usize, usize)) -> Result<Volume> {
    resample_xy(vol, target)
}

/// Nearest-neighbour in-plane resize of a mask onto the grid [`resample_xy`]
/// produces for the same dims and target.
pub fn resample_mask_xy(mask: &LabelMask, target: (usize, usize)) -> Result<LabelMask> {
    let dims = mask.dims();
    check_resample_args(dims, target)?;
    let nearest = |n_src: usize, n_dst: usize| -> Vec<usize> {
        sample_positions(n_src, n_dst)
            .into_iter()
            .map(|(i0, i1, f)| if f < 0.5 { i0 } else { i1 })
            .collect()
    };
    let xs = nearest(dims[0], target.0);
    let ys = nearest(dims[1], target.1);
    let out_dims = [target.0, target.1, dims[2]];
    LabelMask::from_fn(out_dims, |x, y, z| mask.get(xs[x], ys[y], z) == 1)
}

/// Clamps every voxel into the window. Input and output are both HU.
pub fn hu_window(vol: &Volume, w: &WindowSpec) -> Result<Volume> {
    w.validate()?;
    require_unit(vol, Unit::Hu, "hu_window")?;
    let voxels = vol
        .voxels()
        .iter()
        .map(|&v| v.clamp(w.hu_min, w.hu_max))
        .collect();
    Ok(Volume::from_parts_unchecked(vol.dims(), *vol.grid(), voxels, Unit::Hu))
}

/// Maps a windowed HU volume linearly onto `[0, 1]`:
/// `(I - hu_min) / (hu_max - hu_min)`.
pub fn normalize(vol: &Volume, w: &WindowSpec) -> Result<Volume> {
    w.validate()?;
    require_unit(vol, Unit::Hu, "normalize")?;
    let lo = w.hu_min as f64;
    let width = w.hu_max as f64 - lo;
    let mut voxels = Vec::with_capacity(vol.len());
    for &v in vol.voxels() {
        if v < w.hu_min || v > w.hu_max {
            return Err(Error::Contract(format!(
                "normalize found {v} HU outside window [{}, {}]; run hu_window first",
                w.hu_min, w.hu_max
            )));
        }
        voxels.push(((v as f64 - lo) / width) as f32);
    }
    Ok(Volume::from_parts_unchecked(
        vol.dims(),
        *vol.grid(),
        voxels,
        Unit::Normalized,
    ))
}

/// Scales a normalized volume by 255. No rounding.
pub fn to_greyscale(vol: &Volume) -> Result<Volume> {
    require_unit(vol, Unit::Normalized, "to_greyscale")?;
    let voxels = vol.voxels().iter().map(|&v| v * 255.0).collect();
    Ok(Volume::from_parts_unchecked(vol.dims(), *vol.grid(), voxels, Unit::Grey))
}

/// Parameters of the whole preprocessing chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessParams {
    pub window: WindowSpec,
    /// In-plane size of the full-resolution pathway. `None` keeps the input size.
    pub full_target: Option<(usize, usize)>,
    pub low_target: (usize, usize),
    pub diffusion: DiffusionParams,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            window: WindowSpec::default(),
            full_target: Some(DEFAULT_FULL_TARGET),
            low_target: DEFAULT_LOW_TARGET,
            diffusion: DiffusionParams::default(),
        }
    }
}

impl PreprocessParams {
    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        self.diffusion.validate()?;
        if let Some(t) = self.full_target {
            if t.0 < 2 || t.1 < 2 {
                return Err(Error::Parameter(format!("full target {t:?} below 2x2")));
            }
        }
        if self.low_target.0 < 2 || self.low_target.1 < 2 {
            return Err(Error::Parameter(format!(
                "low target {:?} below 2x2",
                self.low_target
            )));
        }
        Ok(())
    }
}

/// Output of [`preprocess_volume`]: the two pathway inputs.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub full: Volume,
    pub low: Volume,
}

/// Runs resize, window, normalize, greyscale and EED in that order, then
/// derives the low-resolution pathway input from the filtered result.
pub fn preprocess_volume(vol: &Volume, p: &PreprocessParams) -> Result<Preprocessed> {
    p.validate()?;
    let resized = match p.full_target {
        Some(t) => resample_xy(vol, t)?,
        None => vol.clone(),
    };
    let windowed = hu_window(&resized, &p.window)?;
    let normalized = normalize(&windowed, &p.window)?;
    let grey = to_greyscale(&normalized)?;
    let full = eed_filter(&grey, &p.diffusion)?;
    let low = downsample_low_pathway(&full, p.low_target)?;
    Ok(Preprocessed { full, low })
}

/// Resamples a mask to the full-resolution pathway grid of `p`.
pub fn preprocess_mask(mask: &LabelMask, p: &PreprocessParams) -> Result<LabelMask> {
    match p.full_target {
        Some(t) => resample_mask_xy(mask, t),
        None => Ok(mask.clone()),
    }
}
