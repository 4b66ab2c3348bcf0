//! `FRFLOW1` flow files: the 8-byte magic `FRFLOW1\0`, little-endian `u32`
//! height and width, then `height·width` little-endian `f32` values of the
//! horizontal component in row-major order followed by the vertical one.

use std::path::Path;

use super::FlowField;
use crate::error::Result;
use crate::io_util::{self, put_f32s, put_u32, Reader};

pub const FLOW_MAGIC: &[u8; 8] = b"FRFLOW1\0";

pub fn encode_flow(field: &FlowField) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 8 * field.u().len());
    out.extend_from_slice(FLOW_MAGIC);
    put_u32(&mut out, io_util::to_u32(field.height(), "flow height")?);
    put_u32(&mut out, io_util::to_u32(field.width(), "flow width")?);
    put_f32s(&mut out, field.u());
    put_f32s(&mut out, field.v());
    Ok(out)
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    let mut r = Reader::new(bytes, "flow");
    r.expect_magic(FLOW_MAGIC)?;
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| crate::Error::format("flow", "dimensions overflow"))?;
    let u = r.f32s(n)?;
    let v = r.f32s(n)?;
    if !r.is_empty() {
        return Err(crate::Error::format("flow", "trailing bytes"));
    }
    FlowField::new(h, w, u, v)
}

pub fn write_flow(path: &Path, field: &FlowField) -> Result<()> {
    io_util::write_atomic(path, &encode_flow(field)?)
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    decode_flow(&io_util::read(path)?)
}
