//! Synthetic abdomen-like CT phantoms with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{voxel_count, Dims, LabelMask, Unit, Volume};
use crate::error::{Error, Result};

pub const AIR_HU: f32 = -1000.0;
const MIN_EDGE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Mean HU of the liver ellipsoid.
    pub liver_hu: f32,
    /// HU interval the confounder blobs are drawn from. Overlaps the usual
    /// liver window so windowing alone cannot isolate the liver.
    pub organ_hu_range: (f32, f32),
    /// Standard deviation of additive Gaussian noise, in HU.
    pub noise_sigma: f32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 64],
            spacing: [1.0; 3],
            seed: 0,
            liver_hu: 60.0,
            organ_hu_range: (110.0, 190.0),
            noise_sigma: 20.0,
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        PhantomSpec {
            seed,
            ..PhantomSpec::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_EDGE) {
            return Err(Error::Spec(format!(
                "every axis needs at least {MIN_EDGE} voxels, got {:?}",
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Spec(format!("non-positive spacing {:?}", self.spacing)));
        }
        let (lo, hi) = self.organ_hu_range;
        if !(lo <= hi) {
            return Err(Error::Spec(format!("empty organ HU range ({lo}, {hi})")));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Spec(format!("negative noise sigma {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in world coordinates (mm).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| {
                let d = (p[a] - self.center[a]) / self.semi_axes[a];
                d * d
            })
            .sum()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }
}

struct Blob {
    center: [f64; 3],
    radius: f64,
    hu: f32,
}

fn world(spacing: [f64; 3], x: usize, y: usize, z: usize) -> [f64; 3] {
    [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]]
}

pub(crate) fn liver_ellipsoid(spec: &PhantomSpec, rng: &mut impl Rng) -> Ellipsoid {
    let mut center = [0.0; 3];
    let mut semi_axes = [0.0; 3];
    for a in 0..3 {
        let extent = (spec.dims[a] - 1) as f64 * spec.spacing[a];
        center[a] = extent * (0.5 + rng.random_range(-0.08..0.08));
        semi_axes[a] = extent * rng.random_range(0.2..0.28);
    }
    Ellipsoid { center, semi_axes }
}

/// Generates a phantom volume (HU) and its exact liver mask.
///
/// The liver is one ellipsoid at `liver_hu`; 2 to 5 spherical confounders
/// with intensities from `organ_hu_range` sit outside it; everything else is
/// air. Gaussian noise is added last. Output is a pure function of `spec`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let liver = liver_ellipsoid(spec, &mut rng);

    let extents: Vec<f64> = (0..3)
        .map(|a| (spec.dims[a] - 1) as f64 * spec.spacing[a])
        .collect();
    let min_extent = extents.iter().cloned().fold(f64::INFINITY, f64::min);
    let n_blobs = rng.random_range(2..=5);
    let mut blobs = Vec::with_capacity(n_blobs);
    let (hu_lo, hu_hi) = spec.organ_hu_range;
    for _ in 0..n_blobs {
        let radius = min_extent * rng.random_range(0.06..0.12);
        // Rejection-sample a center whose sphere stays clear of the liver.
        let mut center = [0.0; 3];
        for _ in 0..200 {
            for a in 0..3 {
                center[a] = rng.random_range(radius..(extents[a] - radius).max(radius + 1e-9));
            }
            let clear = (0..3)
                .map(|a| {
                    let d = (center[a] - liver.center[a]) / (liver.semi_axes[a] + radius);
                    d * d
                })
                .sum::<f64>()
                > 1.0;
            if clear {
                break;
            }
        }
        let hu = if hu_hi > hu_lo {
            rng.random_range(hu_lo..hu_hi)
        } else {
            hu_lo
        };
        blobs.push(Blob { center, radius, hu });
    }

    let n = voxel_count(spec.dims);
    let mut voxels = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..spec.dims[2] {
        for y in 0..spec.dims[1] {
            for x in 0..spec.dims[0] {
                let p = world(spec.spacing, x, y, z);
                if liver.contains(p) {
                    voxels.push(spec.liver_hu);
                    labels.push(1u8);
                    continue;
                }
                let hu = blobs
                    .iter()
                    .find(|b| {
                        (0..3)
                            .map(|a| (p[a] - b.center[a]).powi(2))
                            .sum::<f64>()
                            <= b.radius * b.radius
                    })
                    .map(|b| b.hu)
                    .unwrap_or(AIR_HU);
                voxels.push(hu);
                labels.push(0u8);
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sigma)
            .map_err(|e| Error::Spec(format!("noise distribution: {e}")))?;
        for v in voxels.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    let vol = Volume::new(spec.dims, spec.spacing, [0.0; 3], voxels, Unit::Hu)?;
    let mask = LabelMask::new(spec.dims, labels)?;
    Ok((vol, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec {
            dims: [24, 20, 16],
            ..PhantomSpec::with_seed(7)
        };
        let (a, ma) = make_phantom(&spec).unwrap();
        let (b, mb) = make_phantom(&spec).unwrap();
        assert_eq!(ma, mb);
        let bits = |v: &Volume| v.voxels().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn mask_count_matches_analytic_ellipsoid_volume() {
        for seed in 0..6 {
            let spec = PhantomSpec {
                dims: [48, 40, 32],
                spacing: [0.8, 0.9, 1.5],
                ..PhantomSpec::with_seed(seed)
            };
            let (_, mask) = make_phantom(&spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = liver_ellipsoid(&spec, &mut rng);
            let analytic = 4.0 / 3.0 * std::f64::consts::PI * e.semi_axes.iter().product::<f64>() / spec.spacing.iter().product::<f64>();
            let count = mask.count_foreground() as f64;
            assert!(
                (count - analytic).abs() / analytic < 0.05,
                "seed {seed}: {count} vs {analytic}"
            );
            let frac = count / voxel_count(spec.dims) as f64;
            assert!(frac > 0.02 && frac < 0.5, "fraction {frac}");
        }
    }

    #[test]
    fn noiseless_liver_is_exact() {
        let spec = PhantomSpec {
            dims: [32, 32, 32],
            noise_sigma: 0.0,
            ..PhantomSpec::with_seed(3)
        };
        let (vol, mask) = make_phantom(&spec).unwrap();
        for (v, l) in vol.voxels().iter().zip(mask.labels()) {
            if *l == 1 {
                assert_eq!(*v, spec.liver_hu);
            }
        }
    }

    #[test]
    fn confounders_land_in_organ_range() {
        let spec = PhantomSpec {
            dims: [48, 48, 48],
            noise_sigma: 0.0,
            ..PhantomSpec::with_seed(11)
        };
        let (vol, mask) = make_phantom(&spec).unwrap();
        let (lo, hi) = spec.organ_hu_range;
        let mut organ_voxels = 0;
        for (v, l) in vol.voxels().iter().zip(mask.labels()) {
            if *l == 0 && *v != AIR_HU {
                assert!(*v >= lo && *v <= hi);
                organ_voxels += 1;
            }
        }
        assert!(organ_voxels > 0);
    }

    #[test]
    fn small_dims_rejected() {
        let spec = PhantomSpec {
            dims: [15, 32, 32],
            ..PhantomSpec::default()
        };
        assert!(matches!(make_phantom(&spec), Err(Error::Spec(_))));
    }
}
