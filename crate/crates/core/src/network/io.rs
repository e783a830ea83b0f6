//! Trained-network files: a JSON topology descriptor next to a raw
//! little-endian f32 payload, bound together by the payload's SHA-256.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ConvLayer, NetConfig, Network};
use crate::error::{Error, Result};

const FORMAT: &str = "volseg-net";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    format: String,
    version: u32,
    config: NetConfig,
    layers: Vec<ConvLayer>,
    payload: String,
    payload_bytes: usize,
    sha256: String,
}

pub fn payload_sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `path` (JSON) and a sibling `.bin` payload; returns the payload path.
pub fn save_network(net: &Network, path: &Path) -> Result<PathBuf> {
    let payload = net.weight_bytes();
    let bin_path = path.with_extension("bin");
    let desc = Descriptor {
        format: FORMAT.into(),
        version: VERSION,
        config: net.config.clone(),
        layers: net.layers.clone(),
        payload: bin_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        payload_bytes: payload.len(),
        sha256: payload_sha256(&payload),
    };
    let json = serde_json::to_string_pretty(&desc).map_err(|e| Error::Model(e.to_string()))?;
    fs::write(&bin_path, &payload).map_err(|e| Error::io(&bin_path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(bin_path)
}

pub fn load_network(path: &Path) -> Result<Network> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let desc: Descriptor = serde_json::from_str(&text)
        .map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
    if desc.format != FORMAT || desc.version != VERSION {
        return Err(Error::Model(format!(
            "unsupported model format {} v{}",
            desc.format, desc.version
        )));
    }
    let bin_path = path.with_file_name(&desc.payload);
    let payload = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if payload.len() != desc.payload_bytes {
        return Err(Error::CorruptPayload {
            expected: desc.payload_bytes,
            found: payload.len(),
        });
    }
    let hash = payload_sha256(&payload);
    if hash != desc.sha256 {
        return Err(Error::Model(format!(
            "payload hash {hash} does not match descriptor {}",
            desc.sha256
        )));
    }
    let reference = super::model::build_network(&desc.config, 0)?;
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut layers = desc.layers;
    if layers.len() != reference.layers.len() {
        return Err(Error::Model("layer list does not match the config".into()));
    }
    for (layer, expect) in layers.iter_mut().zip(&reference.layers) {
        if (layer.c_out, layer.c_in, layer.k) != (expect.c_out, expect.c_in, expect.k) {
            return Err(Error::Model(format!("layer {} has an unexpected shape", layer.name)));
        }
        layer.weight = floats.by_ref().take(expect.weight.len()).collect();
        layer.bias = floats.by_ref().take(expect.bias.len()).collect();
        if layer.weight.len() != expect.weight.len() || layer.bias.len() != expect.bias.len() {
            return Err(Error::Model("payload shorter than the topology".into()));
        }
    }
    if floats.next().is_some() {
        return Err(Error::Model("payload longer than the topology".into()));
    }
    Ok(Network {
        config: desc.config,
        layers,
    })
}
