//! Dual-pathway 3D CNN: two 4-layer convolutional stacks (full and low
//! resolution), nearest-neighbour upsampling of the low stack onto the full
//! stack's output grid, channel concatenation, two 1x1x1 "fully connected"
//! layers and a 1x1x1 classification layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{
    concat_channels, conv3d_backward, conv3d_forward, gather_nearest, gather_nearest_backward,
    relu, relu_backward, softmax_xent, ConvWeights, FeatureMap, IndexMaps,
};
use crate::error::{Error, Result};
use crate::sampler::{Patch, PatchGeometry, PatchPair};
use crate::volume::Volume;

pub const CONV_LAYERS: usize = 4;
const FULL: usize = 0;
const LOW: usize = CONV_LAYERS;
const FC1: usize = 2 * CONV_LAYERS;
const FC2: usize = FC1 + 1;
const CLS: usize = FC1 + 2;
const N_LAYERS: usize = CLS + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsamplePolicy {
    NearestNeighbor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub conv_channels: [usize; CONV_LAYERS],
    pub kernel_edge: usize,
    pub fc_channels: [usize; 2],
    pub n_classes: usize,
    /// Training patch edge of the full-resolution pathway.
    pub p_full: usize,
    /// Training patch edge of the low-resolution pathway.
    pub p_low: usize,
    pub low_patch_upsample: UpsamplePolicy,
    /// Network input is `intensity * input_scale - input_shift`.
    pub input_scale: f64,
    pub input_shift: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            conv_channels: [8, 8, 16, 16],
            kernel_edge: 3,
            fc_channels: [32, 32],
            n_classes: 2,
            p_full: crate::sampler::DEFAULT_P_FULL,
            p_low: crate::sampler::DEFAULT_P_LOW,
            low_patch_upsample: UpsamplePolicy::NearestNeighbor,
            input_scale: 1.0 / 255.0,
            input_shift: 0.5,
        }
    }
}

impl NetConfig {
    /// Receptive field edge of one convolutional pathway.
    pub fn receptive_field(&self) -> usize {
        1 + CONV_LAYERS * (self.kernel_edge - 1)
    }

    /// Output edge of a pathway fed an `input_edge` cube.
    pub fn output_edge(&self, input_edge: usize) -> Option<usize> {
        (input_edge + 1).checked_sub(self.receptive_field())
            .filter(|&e| e > 0)
    }

    /// Radius of the receptive field around an output voxel.
    pub fn context_radius(&self) -> usize {
        (self.receptive_field() - 1) / 2
    }

    pub fn patch_geometry(&self) -> Result<PatchGeometry> {
        self.validate()?;
        Ok(PatchGeometry {
            p_full: self.p_full,
            p_low: self.p_low,
            label_edge: self.output_edge(self.p_full).unwrap(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_edge % 2 == 0 || self.kernel_edge == 0 {
            return Err(Error::Config(format!(
                "kernel edge must be odd, got {}",
                self.kernel_edge
            )));
        }
        if self.conv_channels.iter().chain(&self.fc_channels).any(|&c| c == 0) {
            return Err(Error::Config("every channel count must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need >= 2 classes, got {}", self.n_classes)));
        }
        let rf = self.receptive_field();
        for (name, p) in [("p_full", self.p_full), ("p_low", self.p_low)] {
            if p < rf {
                return Err(Error::Config(format!(
                    "{name} = {p} is smaller than the pathway receptive field {rf}"
                )));
            }
            if p % 2 == 0 {
                return Err(Error::Config(format!("{name} = {p} must be odd")));
            }
        }
        if !(self.input_scale.is_finite() && self.input_shift.is_finite()) {
            return Err(Error::Config("non-finite input normalization".into()));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(&'static str, usize, usize, usize)> {
        let c = self.conv_channels;
        let k = self.kernel_edge;
        let names_full = ["full_conv1", "full_conv2", "full_conv3", "full_conv4"];
        let names_low = ["low_conv1", "low_conv2", "low_conv3", "low_conv4"];
        let mut shapes = Vec::with_capacity(N_LAYERS);
        for names in [names_full, names_low] {
            let mut c_in = 1;
            for (i, name) in names.iter().enumerate() {
                shapes.push((*name, c[i], c_in, k));
                c_in = c[i];
            }
        }
        shapes.push(("fc1", self.fc_channels[0], 2 * c[3], 1));
        shapes.push(("fc2", self.fc_channels[1], self.fc_channels[0], 1));
        shapes.push(("classifier", self.n_classes, self.fc_channels[1], 1));
        shapes
    }
}

/// One layer's parameters, stored in 32-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub name: String,
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    #[serde(skip)]
    pub weight: Vec<f32>,
    #[serde(skip)]
    pub bias: Vec<f32>,
}

impl ConvLayer {
    fn to_f64(&self) -> ConvWeights {
        ConvWeights {
            c_out: self.c_out,
            c_in: self.c_in,
            k: self.k,
            weight: self.weight.iter().map(|&w| w as f64).collect(),
            bias: self.bias.iter().map(|&b| b as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetConfig,
    pub layers: Vec<ConvLayer>,
}

/// He-initialized network; weights are a pure function of `(cfg, seed)`.
pub fn build_network(cfg: &NetConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = cfg
        .layer_shapes()
        .into_iter()
        .map(|(name, c_out, c_in, k)| {
            let fan_in = (c_in * k * k * k) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
                .map_err(|e| Error::Config(format!("init distribution: {e}")))?;
            let weight = (0..c_out * c_in * k * k * k)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            Ok(ConvLayer {
                name: name.to_string(),
                c_out,
                c_in,
                k,
                weight,
                bias: vec![0.0; c_out],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Network {
        config: cfg.clone(),
        layers,
    })
}

impl Network {
    pub fn params_f64(&self) -> Vec<ConvWeights> {
        self.layers.iter().map(ConvLayer::to_f64).collect()
    }

    /// Number of weighted layers on every input-to-logit path.
    pub fn depth(&self) -> usize {
        CONV_LAYERS + 3
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Applies `param -= lr * grad` in 64-bit, storing the result in 32-bit.
    pub(crate) fn apply_update(&mut self, grads: &[ConvWeights], lr: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            for (w, gw) in layer.weight.iter_mut().zip(&g.weight) {
                *w = (*w as f64 - lr * gw) as f32;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b = (*b as f64 - lr * gb) as f32;
            }
        }
    }

    /// Little-endian bytes of every weight then bias, layer by layer.
    pub fn weight_bytes(&self) -> Vec<u8> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }
}

/// Cached activations of one forward pass.
pub(crate) struct ForwardCache {
    /// Input of each layer (index = layer).
    inputs: Vec<FeatureMap>,
    /// Pre-activation output of each ReLU layer.
    preacts: Vec<Option<FeatureMap>>,
    low_out_dims: [usize; 3],
    maps: IndexMaps,
}

fn normalize_input(data: &[f32], edge: [usize; 3], cfg: &NetConfig) -> FeatureMap {
    FeatureMap {
        channels: 1,
        dims: edge,
        values: data
            .iter()
            .map(|&v| v as f64 * cfg.input_scale - cfg.input_shift)
            .collect(),
    }
}

fn check_params(params: &[ConvWeights], cfg: &NetConfig) -> Result<()> {
    let shapes = cfg.layer_shapes();
    if params.len() != shapes.len()
        || params
            .iter()
            .zip(&shapes)
            .any(|(p, s)| (p.c_out, p.c_in, p.k) != (s.1, s.2, s.3))
    {
        return Err(Error::Shape("parameter set does not match the network config".into()));
    }
    Ok(())
}

/// Runs both pathways, upsampling and the head. Returns the logits and,
/// when `keep` is set, everything backward needs.
pub(crate) fn forward_core(
    params: &[ConvWeights],
    cfg: &NetConfig,
    full_in: FeatureMap,
    low_in: FeatureMap,
    maps: IndexMaps,
    keep: bool,
) -> Result<(FeatureMap, Option<ForwardCache>)> {
    check_params(params, cfg)?;
    let mut inputs: Vec<FeatureMap> = Vec::new();
    let mut preacts: Vec<Option<FeatureMap>> = Vec::new();

    let mut run_path = |first: usize, x: FeatureMap| -> Result<FeatureMap> {
        let mut a = x;
        for l in first..first + CONV_LAYERS {
            let pre = conv3d_forward(&a, &params[l])?;
            let next = relu(&pre);
            if keep {
                inputs.push(std::mem::replace(&mut a, next));
                preacts.push(Some(pre));
            } else {
                a = next;
            }
        }
        Ok(a)
    };
    let full_out = run_path(FULL, full_in)?;
    let low_out = run_path(LOW, low_in)?;
    let low_out_dims = low_out.dims;
    let up = gather_nearest(&low_out, &maps)?;
    if up.dims != full_out.dims {
        return Err(Error::Shape(format!(
            "upsampled low pathway {:?} does not match full pathway output {:?}",
            up.dims, full_out.dims
        )));
    }
    let joined = concat_channels(&full_out, &up)?;

    let fc1_pre = conv3d_forward(&joined, &params[FC1])?;
    let fc1 = relu(&fc1_pre);
    let fc2_pre = conv3d_forward(&fc1, &params[FC2])?;
    let fc2 = relu(&fc2_pre);
    let logits = conv3d_forward(&fc2, &params[CLS])?;

    let cache = keep.then(|| {
        inputs.push(joined);
        preacts.push(Some(fc1_pre));
        inputs.push(fc1);
        preacts.push(Some(fc2_pre));
        inputs.push(fc2);
        preacts.push(None);
        ForwardCache {
            inputs,
            preacts,
            low_out_dims,
            maps,
        }
    });
    Ok((logits, cache))
}

/// Parameter gradients from the logit gradient.
pub(crate) fn backward_core(
    params: &[ConvWeights],
    cache: &ForwardCache,
    grad_logits: FeatureMap,
) -> Result<Vec<ConvWeights>> {
    let mut grads: Vec<ConvWeights> = params
        .iter()
        .map(|p| ConvWeights::zeros(p.c_out, p.c_in, p.k))
        .collect();
    let mut store = |l: usize, g: &super::ops::ConvGrads| {
        grads[l].weight.clone_from(&g.weight);
        grads[l].bias.clone_from(&g.bias);
    };

    // Head: classifier <- fc2 <- fc1.
    let mut upstream = grad_logits;
    for l in [CLS, FC2, FC1] {
        let g = conv3d_backward(&upstream, &cache.inputs[l], &params[l], true)?;
        store(l, &g);
        let input = &cache.inputs[l];
        let mut gin = FeatureMap {
            channels: input.channels,
            dims: input.dims,
            values: g.input,
        };
        if l != FC1 {
            // The input of CLS/FC2 is relu(preact of the previous layer).
            let pre = cache.preacts[l - 1].as_ref().expect("relu preact cached");
            gin.values = relu_backward(&gin.values, &pre.values);
        }
        upstream = gin;
    }

    // Split the concatenated gradient between the pathways.
    let c_full = params[FULL + CONV_LAYERS - 1].c_out;
    let n = upstream.spatial_len();
    let g_full_out = FeatureMap {
        channels: c_full,
        dims: upstream.dims,
        values: upstream.values[..c_full * n].to_vec(),
    };
    let g_up = FeatureMap {
        channels: upstream.channels - c_full,
        dims: upstream.dims,
        values: upstream.values[c_full * n..].to_vec(),
    };
    let g_low_out = gather_nearest_backward(&g_up, cache.low_out_dims, &cache.maps);

    for (first, g_out) in [(FULL, g_full_out), (LOW, g_low_out)] {
        let mut upstream = g_out;
        for l in (first..first + CONV_LAYERS).rev() {
            let pre = cache.preacts[l].as_ref().expect("relu preact cached");
            let g_pre = FeatureMap {
                channels: pre.channels,
                dims: pre.dims,
                values: relu_backward(&upstream.values, &pre.values),
            };
            let need_input = l != first;
            let g = conv3d_backward(&g_pre, &cache.inputs[l], &params[l], need_input)?;
            store(l, &g);
            if need_input {
                let input = &cache.inputs[l];
                upstream = FeatureMap {
                    channels: input.channels,
                    dims: input.dims,
                    values: g.input,
                };
            }
        }
    }
    Ok(grads)
}

/// Index maps from the full pathway's output voxels to the low pathway's
/// output voxels for a training patch pair.
pub fn patch_index_maps(cfg: &NetConfig, pair: &PatchPair) -> Result<IndexMaps> {
    let rf = cfg.receptive_field();
    let out_full = cfg.output_edge(pair.full_patch.edge).ok_or_else(|| {
        Error::Shape(format!("full patch edge {} below receptive field {rf}", pair.full_patch.edge))
    })?;
    let out_low = cfg.output_edge(pair.low_patch.edge).ok_or_else(|| {
        Error::Shape(format!("low patch edge {} below receptive field {rf}", pair.low_patch.edge))
    })?;
    let hf = (out_full / 2) as i64;
    let hl = (out_low / 2) as i64;
    let mut maps: IndexMaps = Default::default();
    for a in 0..3 {
        let low_first = pair.low_center[a] - hl;
        for i in 0..out_full as i64 {
            let g = pair.full_center[a] - hf + i;
            let l = pair.low_grid.map_index_from(&pair.full_grid, a, g) - low_first;
            if l < 0 || l >= out_low as i64 {
                return Err(Error::Shape(format!(
                    "low pathway output (edge {out_low}) does not cover the full pathway output \
                     (edge {out_full}) on axis {a}; enlarge p_low"
                )));
            }
            maps[a].push(l as usize);
        }
    }
    Ok(maps)
}

fn patch_input(p: &Patch, cfg: &NetConfig) -> FeatureMap {
    normalize_input(&p.data, [p.edge; 3], cfg)
}

/// Logits for one patch pair.
pub fn forward_patch(params: &[ConvWeights], cfg: &NetConfig, pair: &PatchPair) -> Result<FeatureMap> {
    let maps = patch_index_maps(cfg, pair)?;
    let (logits, _) = forward_core(
        params,
        cfg,
        patch_input(&pair.full_patch, cfg),
        patch_input(&pair.low_patch, cfg),
        maps,
        false,
    )?;
    Ok(logits)
}

/// Mean cross-entropy over a batch of labelled patch pairs and its exact
/// gradient with respect to every parameter (averaged over the batch).
pub fn batch_loss_and_gradients(
    params: &[ConvWeights],
    cfg: &NetConfig,
    batch: &[PatchPair],
) -> Result<(f64, Vec<ConvWeights>)> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let mut total: Vec<ConvWeights> = params
        .iter()
        .map(|p| ConvWeights::zeros(p.c_out, p.c_in, p.k))
        .collect();
    let mut loss = 0.0;
    for pair in batch {
        let labels = pair
            .label_patch
            .as_ref()
            .ok_or_else(|| Error::Label("training patch without labels".into()))?;
        let maps = patch_index_maps(cfg, pair)?;
        let (logits, cache) = forward_core(
            params,
            cfg,
            patch_input(&pair.full_patch, cfg),
            patch_input(&pair.low_patch, cfg),
            maps,
            true,
        )?;
        if labels.edge != logits.dims[0] {
            return Err(Error::Shape(format!(
                "label patch edge {} does not match network output edge {}",
                labels.edge, logits.dims[0]
            )));
        }
        let (l, grad_logits, _) = softmax_xent(&logits, &labels.data)?;
        loss += l;
        let grads = backward_core(params, cache.as_ref().unwrap(), grad_logits)?;
        for (t, g) in total.iter_mut().zip(&grads) {
            t.weight.iter_mut().zip(&g.weight).for_each(|(a, b)| *a += b);
            t.bias.iter_mut().zip(&g.bias).for_each(|(a, b)| *a += b);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for t in &mut total {
        t.weight.iter_mut().for_each(|v| *v *= inv);
        t.bias.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, total))
}

/// Checks that, for every centre voxel of `full`, the low pathway's output
/// spans every full-pathway output voxel under the shared index mapping.
pub fn check_pathway_coverage(cfg: &NetConfig, full: &Volume, low: &Volume) -> Result<()> {
    cfg.validate()?;
    let hf = (cfg.output_edge(cfg.p_full).unwrap() / 2) as i64;
    let hl = (cfg.output_edge(cfg.p_low).unwrap() / 2) as i64;
    for a in 0..3 {
        for c in 0..full.dims()[a] as i64 {
            let lc = low.grid().map_index_from(full.grid(), a, c);
            let reach = (c - hf..=c + hf)
                .map(|g| (low.grid().map_index_from(full.grid(), a, g) - lc).abs())
                .max()
                .unwrap_or(0);
            if reach > hl {
                return Err(Error::Config(format!(
                    "p_low = {} cannot cover p_full = {} along axis {a}: needs a low output \
                     half-width of {reach}, has {hl}",
                    cfg.p_low, cfg.p_full
                )));
            }
        }
    }
    Ok(())
}
