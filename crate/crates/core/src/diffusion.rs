//! 3D edge-enhancing diffusion (EED).
//!
//! Each iteration smooths the current image, takes its gradient, builds a
//! per-voxel diffusion tensor whose leading eigenvector follows the
//! gradient, and advances `dI/dt = div(D grad I)` by one explicit Euler step.
//!
//! The step uses a graph-Laplacian discretization: the tensor (mapped to
//! index space) is split into non-negative weights along the 3 axes and the
//! 6 face diagonals, and every neighbour pair exchanges a flux weighted by
//! the smaller of their two weights. Fluxes are antisymmetric and never
//! cross the volume boundary, so the voxel sum is conserved; all weights are
//! non-negative and bounded by the tensor trace, so for `dt <= 1/6` each new
//! value is a convex combination of old ones and the range cannot grow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{offset, voxel_count, Dims, Volume};

/// Diffusivity constant in the leading eigenvalue.
pub const EED_B: f64 = 3.315;
/// Explicit-scheme stability bound for unit spacing in 3D.
pub const MAX_DT: f64 = 1.0 / 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionParams {
    /// Pre-smoothing scale, in voxels.
    pub sigma_s: f64,
    /// Contrast parameter, in intensity units per mm.
    pub lambda_e: f64,
    pub b: f64,
    pub dt: f64,
    pub n_iters: usize,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        DiffusionParams {
            sigma_s: 1.0,
            lambda_e: 10.0,
            b: EED_B,
            dt: 0.15,
            n_iters: 10,
        }
    }
}

impl DiffusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= MAX_DT) {
            return Err(Error::Parameter(format!(
                "dt must lie in (0, 1/6], got {}",
                self.dt
            )));
        }
        if !(self.lambda_e > 0.0) {
            return Err(Error::Parameter(format!("lambda_e must be > 0, got {}", self.lambda_e)));
        }
        if !(self.sigma_s >= 0.0) || !self.sigma_s.is_finite() {
            return Err(Error::Parameter(format!("sigma_s must be >= 0, got {}", self.sigma_s)));
        }
        if !(self.b > 0.0) {
            return Err(Error::Parameter(format!("b must be > 0, got {}", self.b)));
        }
        Ok(())
    }
}

/// Per-voxel gradient vectors, in intensity per mm.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub dims: Dims,
    pub data: Vec<[f64; 3]>,
}

/// Per-voxel symmetric 3x3 tensors stored as `[dxx, dyy, dzz, dxy, dxz, dyz]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub dims: Dims,
    pub data: Vec<[f64; 6]>,
}

impl TensorField {
    pub fn identity(dims: Dims) -> Self {
        TensorField {
            dims,
            data: vec![[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]; voxel_count(dims)],
        }
    }

    /// Full 3x3 matrix of one voxel's tensor.
    pub fn matrix(&self, i: usize) -> [[f64; 3]; 3] {
        to_matrix(&self.data[i])
    }
}

pub fn to_matrix(d: &[f64; 6]) -> [[f64; 3]; 3] {
    [[d[0], d[3], d[4]], [d[3], d[1], d[5]], [d[4], d[5], d[2]]]
}

/// Half-sample symmetric reflection of `i` into `[0, n)`.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

/// Separable Gaussian convolution along x, y and z with radius `ceil(3 sigma)`.
///
/// Boundaries are mirrored (half-sample symmetric), which makes the operator
/// doubly stochastic: constants are preserved and so is the voxel sum.
pub fn gaussian_smooth(vol: &Volume, sigma: f64) -> Result<Volume> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let dims = vol.dims();
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut cur: Vec<f64> = vol.voxels().iter().map(|&v| v as f64).collect();
    let mut next = vec![0.0; cur.len()];
    let strides = [1usize, dims[0], dims[0] * dims[1]];

    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        // Iterate over every line along `axis`.
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..dims[b] {
            for i in 0..dims[a] {
                let mut idx = [0usize; 3];
                idx[a] = i;
                idx[b] = j;
                let base = offset(dims, idx[0], idx[1], idx[2]);
                for p in 0..n {
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let q = reflect(p as i64 + t as i64 - radius, n);
                        acc += w * cur[base + q * stride];
                    }
                    next[base + p * stride] = acc;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    let voxels = cur.into_iter().map(|v| v as f32).collect();
    Ok(Volume::from_parts_unchecked(dims, *vol.grid(), voxels, vol.unit()))
}

/// Central differences inside, one-sided at the faces, scaled by 1/spacing.
pub fn gradient(vol: &Volume) -> Result<VectorField> {
    let dims = vol.dims();
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::Shape(format!("gradient needs every dim >= 2, got {dims:?}")));
    }
    let spacing = vol.spacing();
    let v = vol.voxels();
    let strides = [1usize, dims[0], dims[0] * dims[1]];
    let mut data = Vec::with_capacity(v.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let pos = [x, y, z];
                let i = offset(dims, x, y, z);
                let mut g = [0.0; 3];
                for a in 0..3 {
                    let s = strides[a];
                    let p = pos[a];
                    let n = dims[a];
                    let d = if p == 0 {
                        v[i + s] as f64 - v[i] as f64
                    } else if p == n - 1 {
                        v[i] as f64 - v[i - s] as f64
                    } else {
                        (v[i + s] as f64 - v[i - s] as f64) / 2.0
                    };
                    g[a] = d / spacing[a];
                }
                data.push(g);
            }
        }
    }
    Ok(VectorField { dims, data })
}

/// Eigenvalues of the diffusion tensor for a given smoothed-gradient
/// magnitude: `1 - exp(-b / (|g| / lambda_e)^4)` across the edge, 1 along it.
pub fn eed_eigenvalues(grad_mag: f64, p: &DiffusionParams) -> [f64; 3] {
    debug_assert!(grad_mag >= 0.0);
    let r = (grad_mag / p.lambda_e).powi(4);
    let l1 = if r == 0.0 { 1.0 } else { -(-p.b / r).exp_m1() };
    [l1, 1.0, 1.0]
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Orthonormal frame with `v1` along the gradient. `v2` is `v1` crossed with
/// the coordinate axis least aligned with it.
pub fn eigenframe(g: [f64; 3]) -> [[f64; 3]; 3] {
    let mag = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    let v1 = if mag > 0.0 { normalize3(g) } else { [1.0, 0.0, 0.0] };
    let least = (0..3)
        .min_by(|&a, &b| v1[a].abs().total_cmp(&v1[b].abs()))
        .unwrap();
    let mut axis = [0.0; 3];
    axis[least] = 1.0;
    let v2 = normalize3(cross(v1, axis));
    let v3 = cross(v1, v2);
    [v1, v2, v3]
}

/// Tensor `sum_k lambda_k v_k v_k^T` for a single gradient vector.
pub fn tensor_for_gradient(g: [f64; 3], p: &DiffusionParams) -> [f64; 6] {
    let mag = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    let lambda = eed_eigenvalues(mag, p);
    let frame = eigenframe(g);
    let mut d = [0.0; 6];
    for (l, v) in lambda.iter().zip(frame.iter()) {
        d[0] += l * v[0] * v[0];
        d[1] += l * v[1] * v[1];
        d[2] += l * v[2] * v[2];
        d[3] += l * v[0] * v[1];
        d[4] += l * v[0] * v[2];
        d[5] += l * v[1] * v[2];
    }
    d
}

pub fn assemble_tensor(g: &VectorField, p: &DiffusionParams) -> TensorField {
    TensorField {
        dims: g.dims,
        data: g.data.iter().map(|&v| tensor_for_gradient(v, p)).collect(),
    }
}

// Stencil directions: 3 axes then the 6 face diagonals.
const DIRECTIONS: [[i64; 3]; 9] = [
    [1, 0, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 1, 0],
    [1, -1, 0],
    [1, 0, 1],
    [1, 0, -1],
    [0, 1, 1],
    [0, 1, -1],
];

/// Splits one tensor (already in index space) into non-negative weights
/// along [`DIRECTIONS`]. Off-diagonal couplings are shrunk uniformly when
/// the diagonal cannot absorb them.
fn stencil_weights(d: &[f64; 6]) -> [f64; 9] {
    let (dxx, dyy, dzz) = (d[0], d[1], d[2]);
    let (axy, axz, ayz) = (d[3].abs(), d[4].abs(), d[5].abs());
    let mut s: f64 = 1.0;
    for (diag, off) in [(dxx, axy + axz), (dyy, axy + ayz), (dzz, axz + ayz)] {
        if off > diag {
            s = s.min(diag.max(0.0) / off);
        }
    }
    let (axy, axz, ayz) = (s * axy, s * axz, s * ayz);
    let split = |v: f64, a: f64| if v >= 0.0 { (a, 0.0) } else { (0.0, a) };
    let (xy_p, xy_m) = split(d[3], axy);
    let (xz_p, xz_m) = split(d[4], axz);
    let (yz_p, yz_m) = split(d[5], ayz);
    [
        (dxx - axy - axz).max(0.0),
        (dyy - axy - ayz).max(0.0),
        (dzz - axz - ayz).max(0.0),
        xy_p,
        xy_m,
        xz_p,
        xz_m,
        yz_p,
        yz_m,
    ]
}

/// One explicit Euler step of `dI/dt = div(D grad I)` with zero-flux boundaries.
pub fn eed_step(vol: &Volume, d: &TensorField, dt: f64) -> Result<Volume> {
    let dims = vol.dims();
    if d.dims != dims {
        return Err(Error::Shape(format!(
            "tensor field dims {:?} do not match volume dims {:?}",
            d.dims, dims
        )));
    }
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(Error::Parameter(format!("dt must lie in (0, 1/6], got {dt}")));
    }
    // Spacing relative to the finest axis keeps the stencil within the
    // unit-spacing stability bound; time is measured in (finest edge)^2.
    let raw = vol.spacing();
    let finest = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let h = [raw[0] / finest, raw[1] / finest, raw[2] / finest];
    let weights: Vec<[f64; 9]> = d
        .data
        .iter()
        .map(|t| {
            // Index-space tensor: D'_ab = D_ab / (h_a h_b).
            let scaled = [
                t[0] / (h[0] * h[0]),
                t[1] / (h[1] * h[1]),
                t[2] / (h[2] * h[2]),
                t[3] / (h[0] * h[1]),
                t[4] / (h[0] * h[2]),
                t[5] / (h[1] * h[2]),
            ];
            stencil_weights(&scaled)
        })
        .collect();

    let u: Vec<f64> = vol.voxels().iter().map(|&v| v as f64).collect();
    let mut du = vec![0.0f64; u.len()];
    let (nx, ny, nz) = (dims[0] as i64, dims[1] as i64, dims[2] as i64);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = offset(dims, x as usize, y as usize, z as usize);
                for (k, dir) in DIRECTIONS.iter().enumerate() {
                    let (jx, jy, jz) = (x + dir[0], y + dir[1], z + dir[2]);
                    if jx >= nx || jy < 0 || jy >= ny || jz < 0 || jz >= nz {
                        continue;
                    }
                    let j = offset(dims, jx as usize, jy as usize, jz as usize);
                    let w = weights[i][k].min(weights[j][k]);
                    if w == 0.0 {
                        continue;
                    }
                    let flux = w * (u[j] - u[i]);
                    du[i] += flux;
                    du[j] -= flux;
                }
            }
        }
    }
    let voxels = u
        .iter()
        .zip(&du)
        .map(|(&ui, &dui)| (ui + dt * dui) as f32)
        .collect();
    Ok(Volume::from_parts_unchecked(dims, *vol.grid(), voxels, vol.unit()))
}

/// Runs `p.n_iters` EED iterations, calling `on_step(iteration, &image)`
/// after each one. The tensor is rebuilt from the current image every time.
pub fn eed_iterate(
    vol: &Volume,
    p: &DiffusionParams,
    mut on_step: impl FnMut(usize, &Volume),
) -> Result<Volume> {
    p.validate()?;
    let mut cur = vol.clone();
    for it in 0..p.n_iters {
        let smooth = gaussian_smooth(&cur, p.sigma_s)?;
        let g = gradient(&smooth)?;
        let d = assemble_tensor(&g, p);
        cur = eed_step(&cur, &d, p.dt)?;
        on_step(it, &cur);
    }
    Ok(cur)
}

pub fn eed_filter(vol: &Volume, p: &DiffusionParams) -> Result<Volume> {
    eed_iterate(vol, p, |_, _| {})
}
