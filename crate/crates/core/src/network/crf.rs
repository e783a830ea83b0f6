//! Fully connected CRF refinement by mean-field iteration.

use serde::{Deserialize, Serialize};

use super::infer::ProbabilityMap;
use crate::error::{Error, Result};
use crate::volume::{offset, voxel_count, Dims, LabelMask, Volume};

/// Largest volume the all-pairs CRF accepts.
pub const CRF_MAX_VOXELS: usize = 40 * 40 * 40;
/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrfParams {
    pub w_smooth: f64,
    /// Spatial bandwidth in voxels.
    pub theta_pos: f64,
    pub w_app: f64,
    /// Intensity bandwidth in the units of the intensity volume.
    pub theta_int: f64,
    pub n_meanfield_iters: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        CrfParams {
            w_smooth: 0.5,
            theta_pos: 1.0,
            w_app: 1.0,
            theta_int: 20.0,
            n_meanfield_iters: 5,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_smooth >= 0.0 && self.w_app >= 0.0) || !self.w_smooth.is_finite() || !self.w_app.is_finite() {
            return Err(Error::Parameter(format!(
                "CRF weights must be finite and >= 0, got w_smooth = {}, w_app = {}",
                self.w_smooth, self.w_app
            )));
        }
        if !(self.theta_pos > 0.0 && self.theta_int > 0.0) || !self.theta_pos.is_finite() || !self.theta_int.is_finite() {
            return Err(Error::Parameter(format!(
                "CRF bandwidths must be finite and > 0, got theta_pos = {}, theta_int = {}",
                self.theta_pos, self.theta_int
            )));
        }
        Ok(())
    }

    /// Window radius beyond which the spatial kernel is below `exp(-4.5)`.
    pub fn local_radius(&self) -> usize {
        (3.0 * self.theta_pos).ceil() as usize
    }
}

/// Pairwise kernel between two voxels at squared distance `d2` with
/// intensity difference `di`.
pub fn pairwise_kernel(p: &CrfParams, d2: f64, di: f64) -> f64 {
    let spatial = (-d2 / (2.0 * p.theta_pos * p.theta_pos)).exp();
    let appearance = (-di * di / (2.0 * p.theta_int * p.theta_int)).exp();
    spatial * (p.w_smooth + p.w_app * appearance)
}

fn check_inputs(probs: &ProbabilityMap, intensity: &Volume, p: &CrfParams) -> Result<()> {
    p.validate()?;
    if probs.dims != intensity.dims() {
        return Err(Error::Shape(format!(
            "probabilities {:?} and intensity {:?} differ in shape",
            probs.dims,
            intensity.dims()
        )));
    }
    Ok(())
}

/// Mean-field marginals, class-major. Each voxel interacts with every voxel
/// whose per-axis offset is at most `radius`, or with all voxels when
/// `radius` is `None`. `on_iter` sees the marginals after every update.
pub fn crf_marginals(
    probs: &ProbabilityMap,
    intensity: &Volume,
    p: &CrfParams,
    radius: Option<usize>,
    mut on_iter: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>> {
    check_inputs(probs, intensity, p)?;
    let dims: Dims = probs.dims;
    let n = voxel_count(dims);
    let nc = probs.n_classes;
    let span = dims.into_iter().max().unwrap_or(1);
    let r = radius.unwrap_or(span).min(span);
    let unary: Vec<f64> = probs
        .probs
        .iter()
        .map(|&q| -(q as f64).max(PROB_FLOOR).ln())
        .collect();
    let mut q = normalize_exp(&unary.iter().map(|u| -u).collect::<Vec<_>>(), n, nc);

    // Separable spatial factor, indexed by absolute offset along one axis.
    let spatial_1d: Vec<f64> = (0..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * p.theta_pos * p.theta_pos)).exp())
        .collect();
    let inv_2ti = 1.0 / (2.0 * p.theta_int * p.theta_int);
    let iv = intensity.voxels();

    let mut energy = vec![0.0; nc * n];
    let mut msg = vec![0.0; nc];
    let lo = |c: usize, d: usize| c.saturating_sub(r).min(d);
    let hi = |c: usize, d: usize| (c + r + 1).min(d);
    for it in 0..p.n_meanfield_iters {
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = offset(dims, x, y, z);
                    msg.iter_mut().for_each(|m| *m = 0.0);
                    for zj in lo(z, dims[2])..hi(z, dims[2]) {
                        let sz = spatial_1d[z.abs_diff(zj)];
                        for yj in lo(y, dims[1])..hi(y, dims[1]) {
                            let syz = sz * spatial_1d[y.abs_diff(yj)];
                            for xj in lo(x, dims[0])..hi(x, dims[0]) {
                                let j = offset(dims, xj, yj, zj);
                                if j == i {
                                    continue;
                                }
                                let s = syz * spatial_1d[x.abs_diff(xj)];
                                let di = (iv[i] - iv[j]) as f64;
                                let k = s * (p.w_smooth + p.w_app * (-di * di * inv_2ti).exp());
                                for (c, m) in msg.iter_mut().enumerate() {
                                    *m += k * (1.0 - q[c * n + j]);
                                }
                            }
                        }
                    }
                    for c in 0..nc {
                        energy[c * n + i] = -unary[c * n + i] - msg[c];
                    }
                }
            }
        }
        q = normalize_exp(&energy, n, nc);
        on_iter(it, &q);
    }
    Ok(q)
}

/// Per-voxel softmax over class-major scores.
fn normalize_exp(scores: &[f64], n: usize, nc: usize) -> Vec<f64> {
    let mut out = vec![0.0; nc * n];
    for v in 0..n {
        let max = (0..nc).map(|c| scores[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for c in 0..nc {
            let e = (scores[c * n + v] - max).exp();
            out[c * n + v] = e;
            total += e;
        }
        for c in 0..nc {
            out[c * n + v] /= total;
        }
    }
    out
}

fn argmax_labels(q: &[f64], dims: Dims, nc: usize) -> Result<LabelMask> {
    let n = voxel_count(dims);
    let labels = (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..nc {
                if q[c * n + v] > q[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(dims, labels)
}

/// All-pairs mean-field refinement; volumes above [`CRF_MAX_VOXELS`] are
/// rejected.
pub fn crf_refine(probs: &ProbabilityMap, intensity: &Volume, p: &CrfParams) -> Result<LabelMask> {
    let n = voxel_count(probs.dims);
    if n > CRF_MAX_VOXELS {
        return Err(Error::Capacity(format!(
            "all-pairs CRF is capped at {CRF_MAX_VOXELS} voxels, got {n}"
        )));
    }
    let q = crf_marginals(probs, intensity, p, None, |_, _| {})?;
    argmax_labels(&q, probs.dims, probs.n_classes)
}

/// Mean-field refinement restricted to a `(2r+1)^3` window with
/// `r = ceil(3 theta_pos)`. Identical to [`crf_refine`] whenever the window
/// spans the volume.
pub fn crf_refine_local(probs: &ProbabilityMap, intensity: &Volume, p: &CrfParams) -> Result<LabelMask> {
    let q = crf_marginals(probs, intensity, p, Some(p.local_radius()), |_, _| {})?;
    argmax_labels(&q, probs.dims, probs.n_classes)
}
