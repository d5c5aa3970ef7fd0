//! PNG (8-bit sRGB ↔ linear) and PFM (32-bit float) images, plus the
//! per-channel white balance applied to training photos.

use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1- or 3-channel image as 8-bit PNG. With `srgb` the linear
/// values are gamma encoded first; otherwise they are quantized directly.
pub fn encode_png(img: &ImageBuffer, srgb: bool) -> Result<Vec<u8>> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::InvalidInput(format!("cannot encode {c}-channel image as PNG"))),
    };
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| quantize(if srgb { linear_to_srgb(v) } else { v }))
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width() as u32, img.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidInput(format!("PNG encoding failed: {e}")))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::InvalidInput(format!("PNG encoding failed: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::InvalidInput(format!("PNG encoding failed: {e}")))?;
    }
    Ok(out)
}

/// Decodes a PNG into a linear 3-channel image (gray is replicated, alpha
/// dropped, 16-bit reduced to 8-bit). `label` names the source in errors.
pub fn decode_png(bytes: &[u8], srgb: bool, label: &Path) -> Result<ImageBuffer> {
    let fail = |e: png::DecodingError| Error::format(label, e.to_string());
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(label, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(label, "unexpanded palette image")),
    };
    let decode = |b: u8| {
        let v = b as f64 / 255.0;
        if srgb {
            srgb_to_linear(v)
        } else {
            v
        }
    };
    Ok(ImageBuffer::from_fn(w, h, 3, |x, y, c| {
        let base = (y * w + x) * stride;
        let offset = if stride >= 3 { c } else { 0 };
        decode(buf[base + offset])
    }))
}

/// Writes a linear image as an sRGB-encoded 8-bit PNG.
pub fn write_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    let bytes = encode_png(img, true)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit sRGB PNG into linear color.
pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png(&bytes, true, path)
}

/// Writes a PFM (little-endian, bottom-to-top rows). Infinite values are
/// allowed, which encodes background depth.
pub fn write_pfm(path: &Path, img: &ImageBuffer) -> Result<()> {
    let tag = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::InvalidInput(format!("cannot write {c}-channel PFM"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    let row = img.width() * img.channels();
    for y in (0..img.height()).rev() {
        for v in &img.data()[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<ImageBuffer> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = Vec::new();
    for _ in 0..3 {
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        header.push(line.trim().to_string());
    }
    let channels = match header[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format(path, format!("bad PFM tag {other:?}"))),
    };
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::format(path, "bad PFM size")))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(Error::format(path, "bad PFM size line"));
    }
    let (w, h) = (dims[0], dims[1]);
    let scale: f64 = header[2].parse().map_err(|_| Error::format(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    let n = w * h * channels;
    if raw.len() != n * 4 {
        return Err(Error::format(path, format!("expected {} data bytes, found {}", n * 4, raw.len())));
    }
    let mut data = vec![0.0; n];
    let row = w * channels;
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (yy, rest) = (i / row, i % row);
        data[(h - 1 - yy) * row + rest] = v as f64;
    }
    // Infinite depth is legal here, so bypass the finiteness check.
    ImageBuffer::from_vec_unchecked(w, h, channels, data).ok_or_else(|| Error::format(path, "NaN in PFM data"))
}

/// Divides each channel by its `(1 − clip_fraction)` quantile and clamps to
/// `[0, 1]`. The quantile is the order statistic at index
/// `ceil((1 − clip_fraction)·n) − 1` of the sorted channel.
pub fn white_balance(img: &ImageBuffer, clip_fraction: f64) -> Result<ImageBuffer> {
    if !(0.0..1.0).contains(&clip_fraction) {
        return Err(Error::InvalidInput(format!("clip fraction {clip_fraction} outside [0, 1)")));
    }
    let ch = img.channels();
    let mut out = img.clone();
    for c in 0..ch {
        let q = channel_quantile(img, c, 1.0 - clip_fraction);
        if !(q > 0.0) {
            return Err(Error::Degenerate(format!("channel {c} is all zero")));
        }
        for v in out.data_mut().iter_mut().skip(c).step_by(ch) {
            *v = (*v / q).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

pub fn channel_quantile(img: &ImageBuffer, c: usize, q: f64) -> f64 {
    let mut vals: Vec<f64> = img.data().iter().skip(c).step_by(img.channels()).copied().collect();
    let n = vals.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    let (_, v, _) = vals.select_nth_unstable_by(k, f64::total_cmp);
    *v
}
