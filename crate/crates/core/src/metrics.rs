//! Image-quality scores and scene evaluation reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::compositor::{render, RenderSettings};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::losses::{self, SsimConfig};
use crate::scene::GaussianScene;

pub const PSNR_CAP: f64 = 100.0;

/// `10·log10(1 / MSE)`, capped at 100 dB when the MSE is below 1e-10.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Windowed SSIM with the default 11×11 Gaussian window; the same code path
/// as the training loss.
pub fn ssim_metric(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    losses::ssim(a, b, &SsimConfig::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScores {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub view: usize,
    pub full: ViewScores,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub restoration: Option<ViewScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub restoration: Option<ViewScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_view: Vec<ViewReport>,
    pub mean: MeanReport,
}

impl EvalReport {
    pub fn from_views(per_view: Vec<ViewReport>) -> Self {
        let n = per_view.len().max(1) as f64;
        let mean_of = |f: &dyn Fn(&ViewReport) -> f64| per_view.iter().map(f).sum::<f64>() / n;
        let restoration = per_view
            .iter()
            .all(|v| v.restoration.is_some())
            .then(|| ViewScores {
                psnr: mean_of(&|v| v.restoration.map_or(0.0, |r| r.psnr)),
                ssim: mean_of(&|v| v.restoration.map_or(0.0, |r| r.ssim)),
            })
            .filter(|_| !per_view.is_empty());
        let mean = MeanReport {
            psnr: mean_of(&|v| v.full.psnr),
            ssim: mean_of(&|v| v.full.ssim),
            restoration,
        };
        Self { per_view, mean }
    }
}

fn scores(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<ViewScores> {
    Ok(ViewScores {
        psnr: psnr(pred, gt)?,
        ssim: ssim_metric(pred, gt)?,
    })
}

/// Scores full renders against `gt`, and clear renders against `clear_gt`
/// when given. Renders are clamped to the unit range first, as they would
/// be when written to disk.
pub fn evaluate(
    scene: &GaussianScene,
    views: &[Camera],
    gt: &[ImageBuffer],
    clear_gt: Option<&[ImageBuffer]>,
) -> Result<EvalReport> {
    evaluate_with(scene, views, gt, clear_gt, &RenderSettings::default())
}

pub fn evaluate_with(
    scene: &GaussianScene,
    views: &[Camera],
    gt: &[ImageBuffer],
    clear_gt: Option<&[ImageBuffer]>,
    settings: &RenderSettings,
) -> Result<EvalReport> {
    if views.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} views but {} ground-truth images",
            views.len(),
            gt.len()
        )));
    }
    if let Some(c) = clear_gt {
        if c.len() != views.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} views but {} clear ground-truth images",
                views.len(),
                c.len()
            )));
        }
    }
    let per_view = views
        .par_iter()
        .enumerate()
        .map(|(i, cam)| {
            let out = render(scene, cam, settings);
            let full = scores(&out.full.map(|v| v.clamp(0.0, 1.0)), &gt[i])?;
            let restoration = clear_gt
                .map(|c| scores(&out.clear.map(|v| v.clamp(0.0, 1.0)), &c[i]))
                .transpose()?;
            Ok(ViewReport {
                view: i,
                full,
                restoration,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_views(per_view))
}
