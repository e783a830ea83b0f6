//! Volume and label-mask data model.
//!
//! Voxels are stored x-fastest: the offset of `(x, y, z)` is
//! `x + nx * (y + ny * z)`, the same order MetaImage payloads use. Every
//! module goes through [`offset`] so there is exactly one indexing rule.

mod metaimage;
mod phantom;

pub use metaimage::{load_mask_mhd, load_mhd, save_mask_mhd, save_mhd};
pub use phantom::{make_phantom, PhantomSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

/// Linear offset of voxel `(x, y, z)` in an x-fastest array of shape `dims`.
#[inline]
pub fn offset(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    debug_assert!(x < dims[0] && y < dims[1] && z < dims[2]);
    x + dims[0] * (y + dims[1] * z)
}

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

/// Intensity domain a volume currently lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Unit {
    /// Hounsfield units, unbounded.
    Hu,
    /// Window-normalized, every voxel in `[0, 1]`.
    Normalized,
    /// Greyscale, every voxel in `[0, 255]`.
    Grey,
}

impl Unit {
    fn range(self) -> Option<(f32, f32)> {
        match self {
            Unit::Hu => None,
            Unit::Normalized => Some((0.0, 1.0)),
            Unit::Grey => Some((0.0, 255.0)),
        }
    }
}

/// Physical placement of a voxel grid: spacing (mm per voxel) and the world
/// position of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn world(&self, index: [f64; 3]) -> [f64; 3] {
        [
            self.origin[0] + index[0] * self.spacing[0],
            self.origin[1] + index[1] * self.spacing[1],
            self.origin[2] + index[2] * self.spacing[2],
        ]
    }

    /// Continuous index of a world point along one axis.
    #[inline]
    pub fn continuous_index(&self, axis: usize, world: f64) -> f64 {
        (world - self.origin[axis]) / self.spacing[axis]
    }

    /// Nearest voxel index (may lie outside the volume) of a world point
    /// along one axis. Ties round away from zero.
    #[inline]
    pub fn nearest_index(&self, axis: usize, world: f64) -> i64 {
        self.continuous_index(axis, world).round() as i64
    }

    /// Index in `self` nearest to voxel `index` of grid `from`, along `axis`.
    /// This is the single cross-resolution correspondence rule shared by
    /// patch sampling, training and dense inference.
    #[inline]
    pub fn map_index_from(&self, from: &Grid, axis: usize, index: i64) -> i64 {
        let world = from.origin[axis] + index as f64 * from.spacing[axis];
        self.nearest_index(axis, world)
    }
}

/// A dense 3D scalar field with geometry and an intensity-domain tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    grid: Grid,
    voxels: Vec<f32>,
    unit: Unit,
}

impl Volume {
    pub fn new(
        dims: Dims,
        spacing: [f64; 3],
        origin: [f64; 3],
        voxels: Vec<f32>,
        unit: Unit,
    ) -> Result<Self> {
        let vol = Volume {
            dims,
            grid: Grid { spacing, origin },
            voxels,
            unit,
        };
        vol.validate()?;
        Ok(vol)
    }

    /// Constant-valued volume with unit spacing and zero origin.
    pub fn filled(dims: Dims, value: f32, unit: Unit) -> Result<Self> {
        Volume::new(
            dims,
            [1.0; 3],
            [0.0; 3],
            vec![value; voxel_count(dims)],
            unit,
        )
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: Dims,
        spacing: [f64; 3],
        unit: Unit,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut voxels = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Volume::new(dims, spacing, [0.0; 3], voxels, unit)
    }

    /// Skips validation; callers guarantee every invariant.
    pub(crate) fn from_parts_unchecked(
        dims: Dims,
        grid: Grid,
        voxels: Vec<f32>,
        unit: Unit,
    ) -> Self {
        debug_assert_eq!(voxels.len(), voxel_count(dims));
        Volume {
            dims,
            grid,
            voxels,
            unit,
        }
    }

    /// Checks every structural and intensity-domain invariant.
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!(
                "zero-sized dimension in {:?}",
                self.dims
            )));
        }
        if self.voxels.len() != voxel_count(self.dims) {
            return Err(Error::InvalidVolume(format!(
                "{} voxels for dims {:?}",
                self.voxels.len(),
                self.dims
            )));
        }
        if self.grid.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing must be strictly positive, got {:?}",
                self.grid.spacing
            )));
        }
        if self.grid.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume("non-finite origin".into()));
        }
        if let Some((lo, hi)) = self.unit.range() {
            if let Some(v) = self.voxels.iter().find(|&&v| !(v >= lo && v <= hi)) {
                return Err(Error::InvalidVolume(format!(
                    "{:?} volume holds {} outside [{}, {}]",
                    self.unit, v, lo, hi
                )));
            }
        } else if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume("non-finite voxel".into()));
        }
        Ok(())
    }

    /// Re-tags the intensity domain, validating the new tag's range.
    pub fn with_unit(mut self, unit: Unit) -> Result<Self> {
        self.unit = unit;
        self.validate()?;
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[offset(self.dims, x, y, z)]
    }

    /// Edge-clamped read at a possibly out-of-bounds index.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64, z: i64) -> f32 {
        let cx = x.clamp(0, self.dims[0] as i64 - 1) as usize;
        let cy = y.clamp(0, self.dims[1] as i64 - 1) as usize;
        let cz = z.clamp(0, self.dims[2] as i64 - 1) as usize;
        self.get(cx, cy, cz)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn sum(&self) -> f64 {
        self.voxels.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.voxels.len() as f64
    }

    /// Extracts z-slice `z` as an x-fastest 2D buffer.
    pub fn slice_z(&self, z: usize) -> &[f32] {
        let n = self.dims[0] * self.dims[1];
        &self.voxels[z * n..(z + 1) * n]
    }
}

/// Binary per-voxel liver map: 0 = background, 1 = liver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!(
                "zero-sized mask dimension in {dims:?}"
            )));
        }
        if labels.len() != voxel_count(dims) {
            return Err(Error::InvalidVolume(format!(
                "{} labels for dims {:?}",
                labels.len(),
                dims
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Label(format!("mask label {l} not in {{0, 1}}")));
        }
        Ok(LabelMask { dims, labels })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        LabelMask::new(dims, vec![0; voxel_count(dims)])
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Result<Self> {
        let mut labels = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    labels.push(f(x, y, z) as u8);
                }
            }
        }
        LabelMask::new(dims, labels)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[offset(self.dims, x, y, z)]
    }

    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64, z: i64) -> u8 {
        let cx = x.clamp(0, self.dims[0] as i64 - 1) as usize;
        let cy = y.clamp(0, self.dims[1] as i64 - 1) as usize;
        let cz = z.clamp(0, self.dims[2] as i64 - 1) as usize;
        self.get(cx, cy, cz)
    }

    pub fn count_foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Errors unless the mask lines up voxel-for-voxel with `vol`.
    pub fn check_matches(&self, vol: &Volume) -> Result<()> {
        if self.dims != vol.dims() {
            return Err(Error::Shape(format!(
                "mask dims {:?} do not match volume dims {:?}",
                self.dims,
                vol.dims()
            )));
        }
        Ok(())
    }

    /// Swaps foreground and background.
    pub fn inverted(&self) -> LabelMask {
        LabelMask {
            dims: self.dims,
            labels: self.labels.iter().map(|&l| 1 - l).collect(),
        }
    }

    pub fn slice_z(&self, z: usize) -> &[u8] {
        let n = self.dims[0] * self.dims[1];
        &self.labels[z * n..(z + 1) * n]
    }
}
