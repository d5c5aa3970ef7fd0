//! Gaussians as binary little-endian PLY in the layout common splatting
//! viewers expect.

use std::path::Path;

use nalgebra::{Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene::Gaussian;
use crate::sh;

/// Property names for Gaussians with `coeffs` SH coefficients per channel.
pub fn property_names(coeffs: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3 * (coeffs - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|i| format!("scale_{i}")));
    names.extend((0..4).map(|i| format!("rot_{i}")));
    names
}

fn vertex_values(g: &Gaussian, out: &mut Vec<f32>) {
    let k = g.sh.len();
    out.extend(g.position.iter().map(|&v| v as f32));
    out.extend([0.0; 3]);
    out.extend(g.sh[0].iter().map(|&v| v as f32));
    // Rest coefficients channel-major: all red, then green, then blue.
    for c in 0..3 {
        out.extend(g.sh[1..k].iter().map(|coef| coef[c] as f32));
    }
    out.push(g.opacity_logit as f32);
    out.extend(g.log_scale.iter().map(|&v| v as f32));
    let q = &g.rotation;
    out.extend([q.w, q.i, q.j, q.k].map(|v| v as f32));
}

pub fn encode_ply(gaussians: &[Gaussian]) -> Result<Vec<u8>> {
    let coeffs = gaussians.first().map_or(1, |g| g.sh.len());
    if let Some(i) = gaussians.iter().position(|g| g.sh.len() != coeffs) {
        return Err(Error::InvalidInput(format!("gaussian {i} has a different SH degree")));
    }
    let names = property_names(coeffs);
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", gaussians.len());
    for n in &names {
        header.push_str(&format!("property float {n}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    let mut values = Vec::with_capacity(names.len());
    for g in gaussians {
        values.clear();
        vertex_values(g, &mut values);
        debug_assert_eq!(values.len(), names.len());
        for v in &values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_ply(path: &Path, gaussians: &[Gaussian]) -> Result<()> {
    let bytes = encode_ply(gaussians)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<Vec<Gaussian>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ply(&bytes, path)
}

pub fn decode_ply(bytes: &[u8], path: &Path) -> Result<Vec<Gaussian>> {
    let bad = |m: String| Error::format(path, m);
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| bad("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let body = &bytes[end + END.len()..];

    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(bad("not a PLY file".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", f, ..] => return Err(bad(format!("unsupported PLY format {f}"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] if count.is_none() => {
                count = Some(n.parse::<usize>().map_err(|_| bad(format!("bad vertex count {n}")))?);
            }
            ["element", e, ..] => return Err(bad(format!("unexpected element {e}"))),
            ["property", "float", name] if count.is_some() => props.push(name.to_string()),
            ["property", ty, ..] => return Err(bad(format!("unsupported property type {ty}"))),
            [] => {}
            _ => return Err(bad(format!("unrecognized header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element".into()))?;
    // 9 leading, 1 + 3 + 4 trailing, and 3·(k−1) rest coefficients.
    let rest = props.len().checked_sub(17).filter(|r| r % 3 == 0);
    let coeffs = rest.map(|r| r / 3 + 1).filter(|&k| sh::degree_for_count(k).is_some());
    let coeffs = match coeffs {
        Some(k) if props == property_names(k) => k,
        _ => {
            return Err(bad(format!(
                "property list does not match the Gaussian layout ({} properties)",
                props.len()
            )))
        }
    };
    let stride = props.len() * 4;
    if body.len() != count * stride {
        return Err(bad(format!(
            "expected {} bytes of vertex data, found {}",
            count * stride,
            body.len()
        )));
    }
    let gaussians = body
        .chunks_exact(stride)
        .map(|v| {
            let f = |i: usize| f32::from_le_bytes(v[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            let rest_at = |c: usize, k: usize| f(9 + c * (coeffs - 1) + (k - 1));
            let mut shc = vec![Vector3::new(f(6), f(7), f(8))];
            shc.extend((1..coeffs).map(|k| Vector3::new(rest_at(0, k), rest_at(1, k), rest_at(2, k))));
            let t = 9 + 3 * (coeffs - 1);
            Gaussian {
                position: Vector3::new(f(0), f(1), f(2)),
                log_scale: Vector3::new(f(t + 1), f(t + 2), f(t + 3)),
                rotation: Quaternion::new(f(t + 4), f(t + 5), f(t + 6), f(t + 7)),
                opacity_logit: f(t),
                sh: shc,
            }
        })
        .collect();
    Ok(gaussians)
}
