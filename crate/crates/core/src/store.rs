//! File framing shared by checkpoints, sample tensors and caches.
//!
//! Tensor collections use safetensors with a single `pivit` metadata entry
//! holding a JSON document, which keeps the byte layout deterministic.
//! Caches use a small framed layout: 8 magic bytes, a little-endian `u32`
//! header length, a JSON header, then the raw payload.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

const META_KEY: &str = "pivit";

fn st_dtype(dtype: DType) -> Result<StDtype> {
    match dtype {
        DType::F32 => Ok(StDtype::F32),
        DType::F64 => Ok(StDtype::F64),
        other => Err(Error::Contract(format!("unsupported tensor dtype {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Contract(format!("unsupported tensor dtype {other:?}"))),
    })
}

/// Writes named tensors plus a JSON metadata record.
pub fn save_tensors<M: Serialize>(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    meta: &M,
) -> Result<()> {
    let mut encoded = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        encoded.push((name.as_str(), st_dtype(t.dtype())?, t.dims().to_vec(), tensor_bytes(t)?));
    }
    let views = encoded
        .iter()
        .map(|(name, dtype, shape, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (*name, v))
                .map_err(|e| Error::format(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    safetensors::serialize_to_file(views, Some(info), path)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads every tensor in the file at its stored precision.
pub fn load_tensors<M: DeserializeOwned>(path: &Path) -> Result<(BTreeMap<String, Tensor>, M)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path, msg);
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta_json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad("missing metadata record".into()))?;
    let meta: M = serde_json::from_str(meta_json).map_err(|e| bad(format!("metadata: {e}")))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            StDtype::F32 => Tensor::from_vec(
                data.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<_>>(),
                shape,
                &Device::Cpu,
            )?,
            StDtype::F64 => Tensor::from_vec(
                data.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<_>>(),
                shape,
                &Device::Cpu,
            )?,
            other => return Err(bad(format!("tensor {name}: unsupported dtype {other:?}"))),
        };
        out.insert(name, t);
    }
    Ok((out, meta))
}

pub(crate) fn write_framed<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    header: &H,
    payload: &[u8],
) -> Result<()> {
    let header = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(12 + header.len() + payload.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(payload);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_framed<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::format(path, "bad magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + len {
        return Err(Error::format(path, "truncated header"));
    }
    let header = serde_json::from_slice(&bytes[12..12 + len])
        .map_err(|e| Error::format(path, format!("header: {e}")))?;
    Ok((header, bytes[12 + len..].to_vec()))
}
