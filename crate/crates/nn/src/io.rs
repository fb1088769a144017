//! Versioned binary model format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "CRMAPNN\0"
//! version  u32
//! hlen     u32      length of the JSON header
//! header   hlen     {arch, seed, meta, pretrained}
//! tensors  f32...   per layer: weights then bias, in layer order
//! sha256   32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::ArchSpec;
use crate::error::{NnError, Result};
use crate::network::{LayerParams, Network};
use crate::params::{ModelParams, TrainingMeta};

const MAGIC: &[u8; 8] = b"CRMAPNN\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    seed: u64,
    meta: TrainingMeta,
    pretrained: Vec<bool>,
}

pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let header = Header {
        arch: params.arch().clone(),
        seed: params.seed,
        meta: params.meta.clone(),
        pretrained: params.pretrained.clone(),
    };
    let hjson = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + hjson.len() + params.net.param_count() * 4 + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    for p in &params.net.params {
        for v in p.weights.iter().chain(&p.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn corrupt(msg: impl Into<String>) -> NnError {
    NnError::CorruptModel(msg.into())
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 16 + DIGEST_LEN {
        return Err(corrupt("file too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[16..hend])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let template = Network::<f32>::zeros(header.arch.clone())?;
    if header.pretrained.len() != template.params.len() {
        return Err(corrupt("layer flag count does not match architecture"));
    }
    let mut floats = body[hend..].chunks_exact(4);
    if floats.remainder().len() != 0 || body[hend..].len() / 4 != template.param_count() {
        return Err(corrupt(format!(
            "expected {} parameters, found {} bytes of tensor data",
            template.param_count(),
            body.len() - hend
        )));
    }
    let mut take = |n: usize| -> Vec<f32> {
        (&mut floats)
            .take(n)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    };
    let layers: Vec<LayerParams<f32>> = template
        .params
        .iter()
        .map(|p| {
            let weights = take(p.weights.len());
            let bias = take(p.bias.len());
            LayerParams { weights, bias }
        })
        .collect();
    let net = Network::from_params(header.arch, layers)?;
    let params = ModelParams {
        net,
        seed: header.seed,
        meta: header.meta,
        pretrained: header.pretrained,
    };
    if !params.all_finite() {
        return Err(corrupt("non-finite parameter"));
    }
    Ok(params)
}

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode_params(&fs::read(path)?)
}
