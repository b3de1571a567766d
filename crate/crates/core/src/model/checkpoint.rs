//! Checkpoint container.
//!
//! ```text
//! "DCKP" | u32 version (1) | u32 header_len | header JSON | f32 payload
//! ```
//!
//! The JSON header carries the `NetworkConfig`, the ordered tensor table
//! (`name`, `shape`) and free-form string metadata. The payload holds every
//! tensor in table order as little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig, ParamSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    tensors: Vec<ParamSpec>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

pub fn encode(net: &Network<f32>, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let header = Header {
        config: net.config().clone(),
        tensors: net.param_specs().to_vec(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in net.params() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Network<f32>, BTreeMap<String, String>)> {
    if bytes.len() < 12 {
        return Err(Error::Length { expected: 12, found: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(Error::Length { expected: body, found: bytes.len() });
    }
    let header: Header = serde_json::from_slice(&bytes[12..body])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let expected_specs = header.config.param_specs();
    if expected_specs != header.tensors {
        return Err(Error::Format("checkpoint tensor table disagrees with its config".into()));
    }
    let total: usize = header.tensors.iter().map(ParamSpec::len).sum();
    if bytes.len() != body + 4 * total {
        return Err(Error::Length { expected: body + 4 * total, found: bytes.len() });
    }
    let mut floats = bytes[body..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let params = header
        .tensors
        .iter()
        .map(|s| floats.by_ref().take(s.len()).collect())
        .collect();
    Ok((Network::from_params(header.config, params)?, header.metadata))
}

pub fn save(path: impl AsRef<Path>, net: &Network<f32>, metadata: &BTreeMap<String, String>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(net, metadata)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Network<f32>, BTreeMap<String, String>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitScheme;

    fn small() -> NetworkConfig {
        NetworkConfig {
            stage_channel_widths: vec![4, 6],
            stage_depths: vec![],
            downsample_factor: 2,
            fusion_taps: vec![0, 1],
            head_channels: vec![4, 1],
            seed: 3,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let net = Network::build(small()).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("role".into(), "teacher".into());
        let (back, m) = decode(&encode(&net, &meta)).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.config(), net.config());
        assert_eq!(m, meta);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let net = Network::build(small()).unwrap();
        let mut bytes = encode(&net, &BTreeMap::new());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes), Err(Error::Length { .. })));
    }

    #[test]
    fn pretrained_hook_copies_backbone() {
        let dir = tempfile::tempdir().unwrap();
        let donor = Network::build(NetworkConfig { seed: 99, ..small() }).unwrap();
        let path = dir.path().join("donor.ckpt");
        save(&path, &donor, &BTreeMap::new()).unwrap();
        let cfg = NetworkConfig {
            init_scheme: InitScheme::PretrainedBackbone,
            pretrained_path: Some(path.display().to_string()),
            ..small()
        };
        let net = Network::build(cfg).unwrap();
        for (spec, (a, b)) in net.param_specs().iter().zip(net.params().iter().zip(donor.params())) {
            if spec.name.starts_with("backbone.") {
                assert_eq!(a, b);
            } else if spec.name.ends_with("weight") {
                assert_ne!(a, b);
            }
        }
    }
}
