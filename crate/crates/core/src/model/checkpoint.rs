//! Tensor files: an 8-byte magic, a `u32` length-prefixed canonical JSON
//! header (sorted keys), then tensors until end of file, each as `u32` name
//! length, UTF-8 name, `u32` rank, `u32` dims and little-endian `f32` data.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{ModelConfig, ModelParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io_util::{self, put_f32s, put_u32, to_u32, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FRCKPT1\0";
pub const FEATURES_MAGIC: &[u8; 8] = b"FRFEAT1\0";

/// JSON with object keys sorted, independent of struct field order.
pub fn canonical_json<S: Serialize>(value: &S) -> Result<String> {
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

pub fn encode_tensor_file<'t, H: Serialize>(
    magic: &[u8; 8],
    header: &H,
    tensors: impl IntoIterator<Item = (&'t str, &'t Tensor<f32>)>,
) -> Result<Vec<u8>> {
    let mut out = magic.to_vec();
    let json = canonical_json(header)?;
    put_u32(&mut out, to_u32(json.len(), "header length")?);
    out.extend_from_slice(json.as_bytes());
    for (name, t) in tensors {
        put_u32(&mut out, to_u32(name.len(), "tensor name length")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, to_u32(t.shape().len(), "tensor rank")?);
        for &d in t.shape() {
            put_u32(&mut out, to_u32(d, "tensor dimension")?);
        }
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub type TensorFile<H> = (H, Vec<(String, Tensor<f32>)>);

pub fn decode_tensor_file<H: DeserializeOwned>(
    bytes: &[u8],
    magic: &[u8; 8],
    kind: &'static str,
) -> Result<TensorFile<H>> {
    let mut r = Reader::new(bytes, kind);
    r.expect_magic(magic)?;
    let len = r.u32()? as usize;
    let header: H = serde_json::from_slice(r.bytes(len)?).map_err(|e| Error::format(kind, e.to_string()))?;
    let mut tensors = Vec::new();
    while !r.is_empty() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(len)?.to_vec()).map_err(|e| Error::format(kind, e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(kind, format!("tensor {name} is too large")))?;
        let data = r.f32s(numel)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::format(kind, e.to_string()))?;
        tensors.push((name, t));
    }
    Ok((header, tensors))
}

pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParams<f32>) -> Result<Vec<u8>> {
    encode_tensor_file(CHECKPOINT_MAGIC, config, params.iter())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<f32>)> {
    let (config, tensors): (ModelConfig, _) = decode_tensor_file(bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    config.validate()?;
    let params = ModelParams::from_tensors(tensors)?;
    params.check_against(&config)?;
    Ok((config, params))
}

pub fn write_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams<f32>) -> Result<()> {
    io_util::write_atomic(path, &encode_checkpoint(config, params)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    decode_checkpoint(&io_util::read(path)?)
}
