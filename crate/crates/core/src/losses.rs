//! Photometric losses: L1, L2, D-SSIM, their brightness-regularized
//! variants and the weighted combination used for training.
//!
//! The regularized losses scale residuals by `w = 1 / (sg(ŷ) + ε)`, where
//! `sg` stops the gradient, so dark regions (strongly attenuated by the
//! medium) are not drowned out by bright ones.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Scalar loss value and its gradient with respect to the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: ImageBuffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelLoss {
    L1,
    L2,
    RegL1,
    RegL2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameLoss {
    Dssim,
    RegDssim,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    /// Odd window side length.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1D Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let x = i as f64 - r;
                (-x * x / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub pixel: PixelLoss,
    pub frame: FrameLoss,
    pub ssim: SsimConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            pixel: PixelLoss::RegL2,
            frame: FrameLoss::RegDssim,
            ssim: SsimConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn new(pixel: PixelLoss, frame: FrameLoss) -> Self {
        Self {
            pixel,
            frame,
            ..Default::default()
        }
    }

    /// Every pixel/frame pairing, in the order of the ablation grid.
    pub fn presets() -> Vec<LossConfig> {
        use FrameLoss::*;
        use PixelLoss::*;
        [L1, L2, RegL1, RegL2]
            .into_iter()
            .flat_map(|p| [Dssim, RegDssim].map(move |f| LossConfig::new(p, f)))
            .collect()
    }

    /// Preset name such as `regl2+regdssim`.
    pub fn preset_name(&self) -> String {
        format!("{}+{}", self.pixel, self.frame)
    }
}

impl fmt::Display for PixelLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PixelLoss::L1 => "l1",
            PixelLoss::L2 => "l2",
            PixelLoss::RegL1 => "regl1",
            PixelLoss::RegL2 => "regl2",
        })
    }
}

impl fmt::Display for FrameLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameLoss::Dssim => "dssim",
            FrameLoss::RegDssim => "regdssim",
        })
    }
}

impl FromStr for LossConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (p, f) = lower
            .split_once('+')
            .ok_or_else(|| Error::InvalidInput(format!("loss preset {s:?} is not of the form pixel+frame")))?;
        let pixel = match p {
            "l1" => PixelLoss::L1,
            "l2" => PixelLoss::L2,
            "regl1" => PixelLoss::RegL1,
            "regl2" => PixelLoss::RegL2,
            _ => return Err(Error::InvalidInput(format!("unknown pixel loss {p:?}"))),
        };
        let frame = match f {
            "dssim" => FrameLoss::Dssim,
            "regdssim" => FrameLoss::RegDssim,
            _ => return Err(Error::InvalidInput(format!("unknown frame loss {f:?}"))),
        };
        Ok(LossConfig::new(pixel, frame))
    }
}

/// `w = 1 / (ŷ + ε)` per pixel and channel. Treated as a constant by every
/// gradient in this module.
pub fn weight_map(prediction: &ImageBuffer, epsilon: f64) -> ImageBuffer {
    prediction.map(|v| 1.0 / (v + epsilon))
}

fn residual_loss(
    prediction: &ImageBuffer,
    target: &ImageBuffer,
    weights: Option<&ImageBuffer>,
    squared: bool,
) -> Result<LossOutput> {
    prediction.ensure_same_shape(target)?;
    let n = prediction.len() as f64;
    let mut grad = ImageBuffer::new(prediction.width(), prediction.height(), prediction.channels());
    let mut total = 0.0;
    for (i, (g, (&p, &t))) in grad
        .data_mut()
        .iter_mut()
        .zip(prediction.data().iter().zip(target.data()))
        .enumerate()
    {
        let w = weights.map_or(1.0, |w| w.data()[i]);
        let r = p - t;
        if squared {
            total += (w * r) * (w * r);
            *g = 2.0 * w * w * r / n;
        } else {
            total += (w * r).abs();
            *g = if r == 0.0 { 0.0 } else { w * r.signum() / n };
        }
    }
    Ok(LossOutput { value: total / n, grad })
}

pub fn l1(prediction: &ImageBuffer, target: &ImageBuffer) -> Result<LossOutput> {
    residual_loss(prediction, target, None, false)
}

pub fn l2(prediction: &ImageBuffer, target: &ImageBuffer) -> Result<LossOutput> {
    residual_loss(prediction, target, None, true)
}

/// Mean of `(w·(ŷ − y))²`.
pub fn reg_l2(prediction: &ImageBuffer, target: &ImageBuffer, epsilon: f64) -> Result<LossOutput> {
    residual_loss(prediction, target, Some(&weight_map(prediction, epsilon)), true)
}

/// Mean of `|w·(ŷ − y)|`.
pub fn reg_l1(prediction: &ImageBuffer, target: &ImageBuffer, epsilon: f64) -> Result<LossOutput> {
    residual_loss(prediction, target, Some(&weight_map(prediction, epsilon)), false)
}

/// Valid-mode separable filtering of one channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for (i, t) in taps.iter().enumerate() {
                rows[(y + i) * ow + x] += t * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            let dst = &mut out[y * w + x..y * w + x + k];
            for (d, t) in dst.iter_mut().zip(taps) {
                *d += t * v;
            }
        }
    }
    out
}

fn plane(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(img.channels()).copied().collect()
}

/// Mean windowed SSIM over all valid windows and channels, with the
/// gradient with respect to `a` when requested.
fn ssim_impl(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig, want_grad: bool) -> Result<(f64, Option<ImageBuffer>)> {
    a.ensure_same_shape(b)?;
    if cfg.window == 0 || cfg.window % 2 == 0 {
        return Err(Error::InvalidInput(format!("SSIM window must be odd, got {}", cfg.window)));
    }
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if w < cfg.window || h < cfg.window {
        return Err(Error::InvalidInput(format!(
            "image {w}x{h} is smaller than the {}x{} SSIM window",
            cfg.window, cfg.window
        )));
    }
    let taps = cfg.taps();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let count = ((w + 1 - cfg.window) * (h + 1 - cfg.window) * ch) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| ImageBuffer::new(w, h, ch));

    for c in 0..ch {
        let pa = plane(a, c);
        let pb = plane(b, c);
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, w, h, &taps);
        let mu_b = filter_valid(&pb, w, h, &taps);
        let e_aa = filter_valid(&aa, w, h, &taps);
        let e_bb = filter_valid(&bb, w, h, &taps);
        let e_ab = filter_valid(&ab, w, h, &taps);

        let n = mu_a.len();
        let mut d_mu = vec![0.0; n];
        let mut d_eaa = vec![0.0; n];
        let mut d_eab = vec![0.0; n];
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let n1 = 2.0 * ma * mb + c1;
            let n2 = 2.0 * cov + c2;
            let d1 = ma * ma + mb * mb + c1;
            let d2 = var_a + var_b + c2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                d_mu[i] = s * (2.0 * mb / n1 - 2.0 * mb / n2 - 2.0 * ma / d1 + 2.0 * ma / d2) / count;
                d_eaa[i] = -s / d2 / count;
                d_eab[i] = 2.0 * s / n2 / count;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mu = filter_valid_adjoint(&d_mu, w, h, &taps);
            let g_aa = filter_valid_adjoint(&d_eaa, w, h, &taps);
            let g_ab = filter_valid_adjoint(&d_eab, w, h, &taps);
            for p in 0..w * h {
                g.data_mut()[p * ch + c] = g_mu[p] + 2.0 * pa[p] * g_aa[p] + pb[p] * g_ab[p];
            }
        }
    }
    Ok((total / count, grad))
}

/// Mean windowed SSIM, in `[-1, 1]`.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_impl(a, b, cfg, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &ImageBuffer, b: &ImageBuffer, cfg: &SsimConfig) -> Result<(f64, ImageBuffer)> {
    let (v, g) = ssim_impl(a, b, cfg, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// `(1 − ssim) / 2`.
pub fn dssim(prediction: &ImageBuffer, target: &ImageBuffer, cfg: &SsimConfig) -> Result<LossOutput> {
    let (s, g) = ssim_with_grad(prediction, target, cfg)?;
    Ok(LossOutput {
        value: (1.0 - s) / 2.0,
        grad: g.map(|v| -0.5 * v),
    })
}

/// D-SSIM of `W ⊙ ŷ` against `W ⊙ y` with `W` from [`weight_map`].
pub fn reg_dssim(prediction: &ImageBuffer, target: &ImageBuffer, epsilon: f64, cfg: &SsimConfig) -> Result<LossOutput> {
    prediction.ensure_same_shape(target)?;
    let w = weight_map(prediction, epsilon);
    let wp = prediction.zip_map(&w, |p, w| p * w)?;
    let wt = target.zip_map(&w, |t, w| t * w)?;
    let inner = dssim(&wp, &wt, cfg)?;
    Ok(LossOutput {
        value: inner.value,
        grad: inner.grad.zip_map(&w, |g, w| g * w)?,
    })
}

pub fn pixel_loss(prediction: &ImageBuffer, target: &ImageBuffer, cfg: &LossConfig) -> Result<LossOutput> {
    match cfg.pixel {
        PixelLoss::L1 => l1(prediction, target),
        PixelLoss::L2 => l2(prediction, target),
        PixelLoss::RegL1 => reg_l1(prediction, target, cfg.epsilon),
        PixelLoss::RegL2 => reg_l2(prediction, target, cfg.epsilon),
    }
}

pub fn frame_loss(prediction: &ImageBuffer, target: &ImageBuffer, cfg: &LossConfig) -> Result<LossOutput> {
    match cfg.frame {
        FrameLoss::Dssim => dssim(prediction, target, &cfg.ssim),
        FrameLoss::RegDssim => reg_dssim(prediction, target, cfg.epsilon, &cfg.ssim),
    }
}

/// `(1 − λ)·pixel + λ·frame`.
pub fn combined_loss(prediction: &ImageBuffer, target: &ImageBuffer, cfg: &LossConfig) -> Result<LossOutput> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::InvalidInput(format!("lambda {} outside [0, 1]", cfg.lambda)));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    let lam = cfg.lambda;
    let mut value = 0.0;
    let mut grad = ImageBuffer::new(prediction.width(), prediction.height(), prediction.channels());
    if lam < 1.0 {
        let p = pixel_loss(prediction, target, cfg)?;
        value += (1.0 - lam) * p.value;
        grad = grad.zip_map(&p.grad, |g, d| g + (1.0 - lam) * d)?;
    }
    if lam > 0.0 {
        let f = frame_loss(prediction, target, cfg)?;
        value += lam * f.value;
        grad = grad.zip_map(&f.grad, |g, d| g + lam * d)?;
    }
    Ok(LossOutput { value, grad })
}
