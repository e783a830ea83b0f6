//! Differentiable building blocks. Everything computes in `f64`.

use crate::error::{Error, Result};

/// Multi-channel 3D activation map. Layout is channel-major, then x-fastest:
/// `((c * nz + z) * ny + y) * nx + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        FeatureMap {
            channels,
            dims,
            values: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn new(channels: usize, dims: [usize; 3], values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!(
                "{} values for {channels} x {dims:?}",
                values.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            dims,
            values,
        })
    }

    #[inline]
    pub fn spatial_len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.dims[2] + z) * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.index(c, x, y, z)]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.values[c * n..(c + 1) * n]
    }
}

/// Convolution weights, layout `(c_out, c_in, kz, ky, kx)` with x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvWeights {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvWeights {
            c_out,
            c_in,
            k,
            weight: vec![0.0; c_out * c_in * k * k * k],
            bias: vec![0.0; c_out],
        }
    }

    #[inline]
    pub fn index(&self, co: usize, ci: usize, kx: usize, ky: usize, kz: usize) -> usize {
        (((co * self.c_in + ci) * self.k + kz) * self.k + ky) * self.k + kx
    }

    fn check(&self) -> Result<()> {
        if self.weight.len() != self.c_out * self.c_in * self.k.pow(3) || self.bias.len() != self.c_out {
            return Err(Error::Shape(format!(
                "weights hold {} / {} entries for ({}, {}, {}^3)",
                self.weight.len(),
                self.bias.len(),
                self.c_out,
                self.c_in,
                self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    /// Empty when the input gradient was not requested.
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

fn conv_out_dims(input: &FeatureMap, w: &ConvWeights) -> Result<[usize; 3]> {
    w.check()?;
    if input.channels != w.c_in {
        return Err(Error::Shape(format!(
            "input has {} channels, kernel expects {}",
            input.channels, w.c_in
        )));
    }
    if input.dims.iter().any(|&d| d < w.k) {
        return Err(Error::Shape(format!(
            "spatial dims {:?} smaller than kernel edge {}",
            input.dims, w.k
        )));
    }
    Ok([
        input.dims[0] - w.k + 1,
        input.dims[1] - w.k + 1,
        input.dims[2] - w.k + 1,
    ])
}

/// Valid (unpadded) 3D cross-correlation.
///
/// Every output voxel accumulates its terms in the fixed order
/// `(c_in, kz, ky, kx)` and adds the bias last, so its value depends only on
/// its own receptive field, not on how large the surrounding map is.
pub fn conv3d_forward(input: &FeatureMap, w: &ConvWeights) -> Result<FeatureMap> {
    let od = conv_out_dims(input, w)?;
    let [ix, iy, iz] = input.dims;
    let [ox, oy, oz] = od;
    let k = w.k;
    let mut out = FeatureMap::zeros(w.c_out, od);
    let out_n = ox * oy * oz;
    let in_n = ix * iy * iz;
    for co in 0..w.c_out {
        let out_c = &mut out.values[co * out_n..(co + 1) * out_n];
        for ci in 0..w.c_in {
            let in_c = &input.values[ci * in_n..(ci + 1) * in_n];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.weight[w.index(co, ci, kx, ky, kz)];
                        for z in 0..oz {
                            for y in 0..oy {
                                let o = (z * oy + y) * ox;
                                let i = ((z + kz) * iy + (y + ky)) * ix + kx;
                                let dst = &mut out_c[o..o + ox];
                                let src = &in_c[i..i + ox];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        let b = w.bias[co];
        out_c.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// Exact gradients of [`conv3d_forward`] given the upstream gradient.
pub fn conv3d_backward(
    upstream: &FeatureMap,
    input: &FeatureMap,
    w: &ConvWeights,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let od = conv_out_dims(input, w)?;
    if upstream.dims != od || upstream.channels != w.c_out {
        return Err(Error::Shape(format!(
            "upstream gradient {} x {:?} does not match output {} x {:?}",
            upstream.channels, upstream.dims, w.c_out, od
        )));
    }
    let [ix, iy, iz] = input.dims;
    let [ox, oy, oz] = od;
    let k = w.k;
    let out_n = ox * oy * oz;
    let in_n = ix * iy * iz;
    let mut g_w = vec![0.0; w.weight.len()];
    let mut g_b = vec![0.0; w.c_out];
    let mut g_in = if need_input_grad {
        vec![0.0; input.values.len()]
    } else {
        Vec::new()
    };
    for co in 0..w.c_out {
        let up_c = &upstream.values[co * out_n..(co + 1) * out_n];
        g_b[co] = up_c.iter().sum();
        for ci in 0..w.c_in {
            let in_c = &input.values[ci * in_n..(ci + 1) * in_n];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = w.index(co, ci, kx, ky, kz);
                        let wv = w.weight[wi];
                        let mut acc = 0.0;
                        for z in 0..oz {
                            for y in 0..oy {
                                let o = (z * oy + y) * ox;
                                let i = ((z + kz) * iy + (y + ky)) * ix + kx;
                                let up_row = &up_c[o..o + ox];
                                let in_row = &in_c[i..i + ox];
                                acc += up_row.iter().zip(in_row).map(|(a, b)| a * b).sum::<f64>();
                                if need_input_grad {
                                    let gi = &mut g_in[ci * in_n + i..ci * in_n + i + ox];
                                    for (g, u) in gi.iter_mut().zip(up_row) {
                                        *g += wv * u;
                                    }
                                }
                            }
                        }
                        g_w[wi] = acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: g_in,
        weight: g_w,
        bias: g_b,
    })
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    FeatureMap {
        channels: x.channels,
        dims: x.dims,
        values: x.values.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Passes the upstream gradient where the forward input was positive.
pub fn relu_backward(upstream: &[f64], forward_input: &[f64]) -> Vec<f64> {
    upstream
        .iter()
        .zip(forward_input)
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// Voxel-wise softmax followed by mean cross-entropy against `labels`.
/// Returns the loss, the gradient with respect to the logits, and the
/// probabilities.
pub fn softmax_xent(logits: &FeatureMap, labels: &[u8]) -> Result<(f64, FeatureMap, FeatureMap)> {
    let n = logits.spatial_len();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for {} logit voxels",
            labels.len(),
            n
        )));
    }
    let c = logits.channels;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Label(format!("label {bad} outside 0..{c}")));
    }
    let probs = softmax(logits);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (v, &l) in labels.iter().enumerate() {
        let l = l as usize;
        // log p_l computed from logits for accuracy with extreme values.
        let max = (0..c)
            .map(|ch| logits.values[ch * n + v])
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..c)
                .map(|ch| (logits.values[ch * n + v] - max).exp())
                .sum::<f64>()
                .ln();
        loss -= logits.values[l * n + v] - lse;
        grad.values[l * n + v] -= 1.0;
    }
    grad.values.iter_mut().for_each(|g| *g *= inv_n);
    Ok((loss * inv_n, grad, probs))
}

/// Voxel-wise softmax over channels.
pub fn softmax(logits: &FeatureMap) -> FeatureMap {
    let n = logits.spatial_len();
    let c = logits.channels;
    let mut out = FeatureMap::zeros(c, logits.dims);
    for v in 0..n {
        let max = (0..c)
            .map(|ch| logits.values[ch * n + v])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for ch in 0..c {
            let e = (logits.values[ch * n + v] - max).exp();
            out.values[ch * n + v] = e;
            total += e;
        }
        for ch in 0..c {
            out.values[ch * n + v] /= total;
        }
    }
    out
}

/// Per-axis index maps for nearest-neighbour upsampling: output voxel
/// `(x, y, z)` reads input voxel `(map[0][x], map[1][y], map[2][z])`.
pub type IndexMaps = [Vec<usize>; 3];

pub fn gather_nearest(input: &FeatureMap, maps: &IndexMaps) -> Result<FeatureMap> {
    for a in 0..3 {
        if let Some(&bad) = maps[a].iter().find(|&&i| i >= input.dims[a]) {
            return Err(Error::Shape(format!(
                "upsampling index {bad} outside low-pathway extent {} on axis {a}",
                input.dims[a]
            )));
        }
    }
    let od = [maps[0].len(), maps[1].len(), maps[2].len()];
    let mut out = FeatureMap::zeros(input.channels, od);
    let mut o = 0;
    for c in 0..input.channels {
        for &mz in &maps[2] {
            for &my in &maps[1] {
                for &mx in &maps[0] {
                    out.values[o] = input.get(c, mx, my, mz);
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`gather_nearest`]: scatters-adds into the source layout.
pub fn gather_nearest_backward(upstream: &FeatureMap, source_dims: [usize; 3], maps: &IndexMaps) -> FeatureMap {
    let mut g = FeatureMap::zeros(upstream.channels, source_dims);
    let mut o = 0;
    for c in 0..upstream.channels {
        for &mz in &maps[2] {
            for &my in &maps[1] {
                for &mx in &maps[0] {
                    let i = g.index(c, mx, my, mz);
                    g.values[i] += upstream.values[o];
                    o += 1;
                }
            }
        }
    }
    g
}

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} with {:?}",
            a.dims, b.dims
        )));
    }
    let mut values = Vec::with_capacity(a.values.len() + b.values.len());
    values.extend_from_slice(&a.values);
    values.extend_from_slice(&b.values);
    Ok(FeatureMap {
        channels: a.channels + b.channels,
        dims: a.dims,
        values,
    })
}
