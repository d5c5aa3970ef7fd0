//! Binary container for the medium network and scene extent.
//!
//! Layout (little endian): magic `AQMEDNET`, `u32` version, `u32` encoding
//! degree, `u32` hidden width, `f64` scene extent, `u32` tensor count, then
//! `(rows, cols)` as `u32` pairs per tensor, then every tensor as `f32` in
//! column-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::medium::MediumNetwork;

pub const MAGIC: &[u8; 8] = b"AQMEDNET";
pub const VERSION: u32 = 1;

pub fn encode_sidecar(net: &MediumNetwork, scene_extent: f64) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(net.encoding_degree as u32).to_le_bytes());
    b.extend_from_slice(&(net.hidden() as u32).to_le_bytes());
    b.extend_from_slice(&scene_extent.to_le_bytes());
    b.extend_from_slice(&(2 * net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        for (r, c) in [(l.weight.nrows(), l.weight.ncols()), (l.bias.len(), 1)] {
            b.extend_from_slice(&(r as u32).to_le_bytes());
            b.extend_from_slice(&(c as u32).to_le_bytes());
        }
    }
    for t in net.tensors() {
        t.iter().for_each(|v| b.extend_from_slice(&(*v as f32).to_le_bytes()));
    }
    b
}

pub fn write_sidecar(path: &Path, net: &MediumNetwork, scene_extent: f64) -> Result<()> {
    std::fs::write(path, encode_sidecar(net, scene_extent)).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(path: &Path) -> Result<(MediumNetwork, f64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sidecar(&bytes, path)
}

pub fn decode_sidecar(bytes: &[u8], path: &Path) -> Result<(MediumNetwork, f64)> {
    let bad = |m: String| Error::format(path, m);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| bad(format!("truncated medium file ({} bytes)", bytes.len())))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(bad("not a medium network file (bad magic)".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(bad(format!("unsupported medium file version {version}")));
    }
    let degree = u32_at(take(4)?) as usize;
    let hidden = u32_at(take(4)?) as usize;
    let extent = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let count = u32_at(take(4)?) as usize;

    let mut net = MediumNetwork::zeros(degree, hidden);
    let expected: Vec<(usize, usize)> = net
        .layers
        .iter()
        .flat_map(|l| [(l.weight.nrows(), l.weight.ncols()), (l.bias.len(), 1)])
        .collect();
    if count != expected.len() {
        return Err(bad(format!("expected {} tensors, found {count}", expected.len())));
    }
    for (i, want) in expected.iter().enumerate() {
        let dims = (u32_at(take(4)?) as usize, u32_at(take(4)?) as usize);
        if dims != *want {
            return Err(bad(format!("tensor {i} has shape {dims:?}, expected {want:?}")));
        }
    }
    let total: usize = expected.iter().map(|(r, c)| r * c).sum();
    let data = take(total * 4)?;
    drop(take);
    if pos != bytes.len() {
        return Err(bad(format!("{} bytes of trailing data", bytes.len() - pos)));
    }
    let mut vals = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for t in net.tensors_mut() {
        t.iter_mut().for_each(|v| *v = vals.next().unwrap());
    }
    Ok((net, extent))
}
