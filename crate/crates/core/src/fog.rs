//! Synthetic scattering media from clear images and depth maps.
//!
//! Per pixel and channel `I = O·e^{-β_D z} + B∞·(1 − e^{-β_B z})`, clamped to
//! the unit range.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::io;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FogParams {
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub b_inf: [f64; 3],
}

impl FogParams {
    pub fn uniform(beta_d: f64, beta_b: f64, b_inf: f64) -> Self {
        Self {
            beta_d: [beta_d; 3],
            beta_b: [beta_b; 3],
            b_inf: [b_inf; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.beta_d.iter().chain(&self.beta_b).all(|b| *b >= 0.0 && b.is_finite())
            && self.b_inf.iter().all(|b| (0.0..=1.0).contains(b));
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid fog parameters {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FogPreset {
    Easy,
    Hard,
}

impl FogPreset {
    pub fn params(self) -> FogParams {
        match self {
            FogPreset::Easy => FogParams::uniform(0.6, 0.6, 0.5),
            FogPreset::Hard => FogParams::uniform(0.8, 0.6, 0.5),
        }
    }
}

impl fmt::Display for FogPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FogPreset::Easy => "easy",
            FogPreset::Hard => "hard",
        })
    }
}

impl FromStr for FogPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "easy" => Ok(FogPreset::Easy),
            "hard" => Ok(FogPreset::Hard),
            other => Err(Error::InvalidInput(format!("unknown fog preset {other:?}"))),
        }
    }
}

/// `e^{-β z}`, with the zero-density case defined as 1 even at infinite depth.
fn transmission(beta: f64, z: f64) -> f64 {
    if beta == 0.0 {
        1.0
    } else {
        (-beta * z).exp()
    }
}

fn check_inputs(image: &ImageBuffer, depth: &ImageBuffer, p: &FogParams) -> Result<()> {
    p.validate()?;
    if image.channels() != 3 || depth.channels() != 1 || image.width() != depth.width() || image.height() != depth.height() {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{}x{} and depth {}x{}x{}",
            image.width(),
            image.height(),
            image.channels(),
            depth.width(),
            depth.height(),
            depth.channels()
        )));
    }
    if let Some(z) = depth.data().iter().find(|z| !(**z >= 0.0)) {
        return Err(Error::InvalidInput(format!("depth must be non-negative, found {z}")));
    }
    Ok(())
}

/// Fogged image and the number of values that had to be clamped.
pub fn apply_fog_counted(clear: &ImageBuffer, depth: &ImageBuffer, p: &FogParams) -> Result<(ImageBuffer, usize)> {
    check_inputs(clear, depth, p)?;
    let mut out = clear.clone();
    let mut clamped = 0;
    let w = clear.width();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (pix, c) = (i / 3, i % 3);
        let z = depth.get(pix % w, pix / w, 0);
        let raw = *v * transmission(p.beta_d[c], z) + p.b_inf[c] * (1.0 - transmission(p.beta_b[c], z));
        let fogged = raw.clamp(0.0, 1.0);
        if fogged != raw {
            clamped += 1;
        }
        *v = fogged;
    }
    Ok((out, clamped))
}

pub fn apply_fog(clear: &ImageBuffer, depth: &ImageBuffer, p: &FogParams) -> Result<ImageBuffer> {
    Ok(apply_fog_counted(clear, depth, p)?.0)
}

/// Inverts [`apply_fog`] where it did not clamp:
/// `O = (I − B∞(1 − e^{-β_B z}))·e^{β_D z}`.
pub fn remove_fog(foggy: &ImageBuffer, depth: &ImageBuffer, p: &FogParams) -> Result<ImageBuffer> {
    check_inputs(foggy, depth, p)?;
    let w = foggy.width();
    let mut out = foggy.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (pix, c) = (i / 3, i % 3);
        let z = depth.get(pix % w, pix / w, 0);
        *v = (*v - p.b_inf[c] * (1.0 - transmission(p.beta_b[c], z))) / transmission(p.beta_d[c], z);
    }
    Ok(out)
}

/// Fogs every clear view with the preset's parameters. Every view needs a
/// depth map.
pub fn make_benchmark(clear: &[ImageBuffer], depths: &[Option<ImageBuffer>], preset: FogPreset) -> Result<Vec<ImageBuffer>> {
    if clear.len() != depths.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} clear views but {} depth entries",
            clear.len(),
            depths.len()
        )));
    }
    let p = preset.params();
    clear
        .iter()
        .zip(depths)
        .enumerate()
        .map(|(i, (c, d))| {
            let d = d
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("view {i} has no depth map")))?;
            apply_fog(c, d, &p)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub image: PathBuf,
    pub depth: PathBuf,
    pub clear: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FogManifest {
    pub views: Vec<ManifestView>,
    pub params: FogParams,
    pub preset: Option<FogPreset>,
    /// Values clamped to `[0, 1]` during synthesis, over all views.
    #[serde(default)]
    pub clamped_values: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl FogManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One view of a benchmark on disk.
pub struct BenchmarkView<'a> {
    pub name: &'a str,
    pub clear: &'a ImageBuffer,
    pub depth: &'a ImageBuffer,
}

/// Writes fogged images (PNG), depth maps (PFM), clear ground truth (PNG)
/// and `manifest.json` into `out_dir`. Paths in the manifest are relative
/// to `out_dir`.
pub fn write_benchmark(out_dir: &Path, views: &[BenchmarkView<'_>], preset: FogPreset) -> Result<FogManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for sub in ["images", "depth", "clear"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let params = preset.params();
    let mut manifest = FogManifest {
        views: Vec::new(),
        params,
        preset: Some(preset),
        clamped_values: 0,
    };
    for v in views {
        let (fogged, clamped) = apply_fog_counted(v.clear, v.depth, &params)?;
        manifest.clamped_values += clamped;
        let entry = ManifestView {
            image: PathBuf::from("images").join(format!("{}.png", v.name)),
            depth: PathBuf::from("depth").join(format!("{}.pfm", v.name)),
            clear: PathBuf::from("clear").join(format!("{}.png", v.name)),
        };
        io::images::write_png(&out_dir.join(&entry.image), &fogged)?;
        io::images::write_pfm(&out_dir.join(&entry.depth), v.depth)?;
        io::images::write_png(&out_dir.join(&entry.clear), v.clear)?;
        manifest.views.push(entry);
    }
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
