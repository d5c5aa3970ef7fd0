//! Optimization loop: Adam per parameter group, densification, pruning,
//! opacity resets and medium optimizer resets.

mod adam;
mod config;
mod init;

use std::fmt;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

pub use adam::{AdamHyper, AdamState};
pub use config::{LearningRates, TrainConfig};
pub use init::{initialize_random, initialize_scene, mean_neighbor_distance, scene_extent_from_cameras, InitConfig};

use crate::camera::Camera;
use crate::compositor::{render, render_cached, RenderSettings};
use crate::error::{Error, Result};
use crate::gradients::backward_cached;
use crate::image::ImageBuffer;
use crate::losses::combined_loss;
use crate::metrics::psnr;
use crate::scene::{logit, Gaussian, GaussianScene};

/// One training image with its pose.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub name: String,
    pub camera: Camera,
    pub image: ImageBuffer,
}

impl TrainView {
    pub fn new(name: impl Into<String>, camera: Camera, image: ImageBuffer) -> Result<Self> {
        if image.width() != camera.width || image.height() != camera.height || image.channels() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{}x{} does not match camera {}x{}",
                image.width(),
                image.height(),
                image.channels(),
                camera.width,
                camera.height
            )));
        }
        Ok(Self {
            name: name.into(),
            camera,
            image,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DensifyReport {
    pub before: usize,
    pub split: usize,
    pub duplicated: usize,
    pub pruned: usize,
    pub after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    /// Steps completed, including this one.
    pub step: usize,
    pub loss: f64,
    pub gaussians: usize,
    pub densify: Option<DensifyReport>,
    pub opacity_reset: bool,
}

/// Progress line in `key=value` form.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    pub step: usize,
    pub loss: f64,
    pub gaussians: usize,
    pub psnr: Option<f64>,
}

impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} loss={:.6} gaussians={}", self.step, self.loss, self.gaussians)?;
        if let Some(p) = self.psnr {
            write!(f, " psnr={p:.3}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Optimizers {
    position: AdamState,
    log_scale: AdamState,
    rotation: AdamState,
    opacity: AdamState,
    sh: AdamState,
    medium: Vec<AdamState>,
}

impl Optimizers {
    fn new(scene: &GaussianScene) -> Self {
        let n = scene.len();
        let g = AdamHyper::GAUSSIAN;
        let k = scene.gaussians.first().map_or(1, |g| g.sh.len());
        Self {
            position: AdamState::new(g, n, 3),
            log_scale: AdamState::new(g, n, 3),
            rotation: AdamState::new(g, n, 4),
            opacity: AdamState::new(g, n, 1),
            sh: AdamState::new(g, n, 3 * k),
            medium: scene
                .medium
                .tensors()
                .iter()
                .map(|t| AdamState::new(AdamHyper::MEDIUM, 1, t.len()))
                .collect(),
        }
    }

    fn gaussian_groups(&mut self) -> [&mut AdamState; 5] {
        [
            &mut self.position,
            &mut self.log_scale,
            &mut self.rotation,
            &mut self.opacity,
            &mut self.sh,
        ]
    }

    fn remap(&mut self, sources: &[Option<usize>]) {
        for g in self.gaussian_groups() {
            g.remap(sources);
        }
    }

    fn rows(&self) -> usize {
        self.position.rows()
    }
}

pub struct Trainer {
    scene: GaussianScene,
    config: TrainConfig,
    optim: Optimizers,
    grad_accum: Vec<f64>,
    grad_count: Vec<u32>,
    step: usize,
    sh_degree: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Takes ownership of an initialized scene. Parameters are rounded to
    /// the `f32` grid, where training keeps them.
    pub fn new(mut scene: GaussianScene, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        scene.validate()?;
        if scene.is_empty() {
            return Err(Error::Degenerate("cannot train an empty scene".into()));
        }
        scene.quantize_to_f32();
        let n = scene.len();
        Ok(Self {
            optim: Optimizers::new(&scene),
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
            step: 0,
            sh_degree: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            scene,
            config,
        })
    }

    pub fn scene(&self) -> &GaussianScene {
        &self.scene
    }

    pub fn into_scene(self) -> GaussianScene {
        self.scene
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn active_sh_degree(&self) -> usize {
        self.sh_degree.min(self.scene.sh_degree())
    }

    /// Settings matching the current state of training.
    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            sh_degree: Some(self.active_sh_degree()),
            with_medium: self.config.with_medium,
            ..RenderSettings::default()
        }
    }

    /// Render, loss, backward and one Adam update, followed by whatever
    /// schedule events fall on the new step count.
    pub fn train_step(&mut self, view: &TrainView) -> Result<StepReport> {
        let settings = self.render_settings();
        let (out, frame) = render_cached(&self.scene, &view.camera, &settings);
        let loss = combined_loss(&out.full, &view.image, &self.config.loss)?;
        if !loss.value.is_finite() {
            return Err(Error::Numerical(format!(
                "loss is {} at step {} on view {}",
                loss.value, self.step, view.name
            )));
        }
        let grads = backward_cached(&self.scene, &view.camera, &frame, &loss.grad)?;
        drop(frame);
        if !grads.all_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at step {}", self.step)));
        }
        self.apply_gradients(&grads);

        self.step += 1;
        let s = self.step;
        let c = &self.config;
        let in_window = s < c.densify_until;
        if in_window {
            for (i, (&norm, &hits)) in grads.mean2d_norm.iter().zip(&grads.contributions).enumerate() {
                if hits > 0 {
                    self.grad_accum[i] += norm;
                    self.grad_count[i] += 1;
                }
            }
        }
        if s % c.sh_degree_interval == 0 && self.sh_degree < c.max_sh_degree {
            self.sh_degree += 1;
        }
        let after_start = s >= c.densify_from && in_window;
        let densify = after_start && s % c.densify_interval == 0;
        let prune = after_start && s % c.prune_interval == 0;
        let reset = in_window && s % c.opacity_reset_interval == 0;
        // Resetting first means a coinciding prune only sees opacities that
        // have had a full prune interval to recover.
        if reset {
            self.reset_opacity();
        }
        let report = if densify || prune {
            Some(self.densify_and_prune_with(densify, prune)?)
        } else {
            None
        };
        Ok(StepReport {
            step: s,
            loss: loss.value,
            gaussians: self.scene.len(),
            densify: report,
            opacity_reset: reset,
        })
    }

    fn apply_gradients(&mut self, grads: &crate::gradients::GradientBuffers) {
        let lr = &self.config.lr;
        let lr_pos = lr.position_at(self.step, self.config.iterations, self.scene.scene_extent);
        let o = &mut self.optim;
        let kp = o.position.begin_step();
        let ks = o.log_scale.begin_step();
        let kr = o.rotation.begin_step();
        let ko = o.opacity.begin_step();
        let kh = o.sh.begin_step();
        let sh_width = o.sh.width;
        let renormalize = lr.rotation > 0.0;
        for (i, g) in self.scene.gaussians.iter_mut().enumerate() {
            o.position
                .update(&kp, 3 * i, g.position.as_mut_slice(), grads.position[i].as_slice(), lr_pos);
            o.log_scale
                .update(&ks, 3 * i, g.log_scale.as_mut_slice(), grads.log_scale[i].as_slice(), lr.log_scale);
            o.rotation.update(
                &kr,
                4 * i,
                g.rotation.coords.as_mut_slice(),
                grads.rotation[i].coords.as_slice(),
                lr.rotation,
            );
            if renormalize {
                let n = g.rotation.norm();
                if n > 0.0 {
                    g.rotation /= n;
                }
            }
            o.opacity.update(
                &ko,
                i,
                std::slice::from_mut(&mut g.opacity_logit),
                &[grads.opacity_logit[i]],
                lr.opacity,
            );
            for (j, (coef, gc)) in g.sh.iter_mut().zip(&grads.sh[i]).enumerate() {
                let rate = if j == 0 { lr.sh } else { lr.sh * lr.sh_rest_factor };
                o.sh.update(&kh, sh_width * i + 3 * j, coef.as_mut_slice(), gc.as_slice(), rate);
            }
        }
        if self.config.with_medium {
            let grads_t = grads.medium.tensors();
            for ((state, p), gt) in o.medium.iter_mut().zip(self.scene.medium.tensors_mut()).zip(grads_t) {
                let k = state.begin_step();
                state.update(&k, 0, p, gt, lr.medium);
            }
        }
        self.scene.quantize_to_f32();
    }

    /// Splits or duplicates high-gradient Gaussians, prunes transparent
    /// ones, resets the medium optimizer moments and clears statistics.
    pub fn densify_and_prune(&mut self) -> Result<DensifyReport> {
        self.densify_and_prune_with(true, true)
    }

    fn densify_and_prune_with(&mut self, densify: bool, prune: bool) -> Result<DensifyReport> {
        let c = &self.config;
        let n = self.scene.len();
        let mut report = DensifyReport {
            before: n,
            ..Default::default()
        };
        // Per output row: the Gaussian and where its optimizer state comes
        // from (`None` for fresh rows).
        let mut rows: Vec<(Gaussian, Option<usize>)> = Vec::with_capacity(n);
        let mut action = vec![Action::Keep; n];
        if densify {
            let mut candidates: Vec<(usize, f64)> = (0..n)
                .filter_map(|i| {
                    let cnt = self.grad_count[i];
                    let avg = if cnt > 0 { self.grad_accum[i] / cnt as f64 } else { 0.0 };
                    (avg > c.grad_threshold).then_some((i, avg))
                })
                .collect();
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let limit = c.split_scale_threshold * self.scene.scene_extent;
            let mut budget = c.max_gaussians.map_or(usize::MAX, |m| m.saturating_sub(n));
            for (i, _) in candidates {
                let split = self.scene.gaussians[i].scale().max() > limit;
                let growth = if split { c.split_count - 1 } else { 1 };
                if growth > budget {
                    continue;
                }
                budget -= growth;
                action[i] = if split { Action::Split } else { Action::Duplicate };
            }
        }
        for (i, g) in self.scene.gaussians.iter().enumerate() {
            match action[i] {
                Action::Keep => rows.push((g.clone(), Some(i))),
                Action::Duplicate => {
                    rows.push((g.clone(), Some(i)));
                    rows.push((g.clone(), None));
                    report.duplicated += 1;
                }
                Action::Split => {
                    let r = g.rotation_matrix();
                    let s = g.scale();
                    for _ in 0..c.split_count {
                        let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut self.rng));
                        let mut child = g.clone();
                        child.position = g.position + r * s.component_mul(&z);
                        child.log_scale = (s / c.split_scale_divisor).map(f64::ln);
                        rows.push((child, None));
                    }
                    report.split += 1;
                }
            }
        }
        if prune {
            let before = rows.len();
            rows.retain(|(g, _)| g.opacity() >= c.prune_opacity);
            report.pruned = before - rows.len();
            if rows.is_empty() {
                return Err(Error::Degenerate(format!(
                    "pruning at step {} would remove all {before} Gaussians",
                    self.step
                )));
            }
        }
        let sources: Vec<Option<usize>> = rows.iter().map(|r| r.1).collect();
        self.scene.gaussians = rows.into_iter().map(|r| r.0).collect();
        self.scene.quantize_to_f32();
        self.optim.remap(&sources);
        self.optim.medium.iter_mut().for_each(AdamState::reset);
        let m = self.scene.len();
        self.grad_accum = vec![0.0; m];
        self.grad_count = vec![0; m];
        report.after = m;
        debug_assert_eq!(self.optim.rows(), m);
        Ok(report)
    }

    /// Sets every opacity to the reset value and zeroes the opacity moments.
    pub fn reset_opacity(&mut self) {
        let v = logit(self.config.opacity_reset_value) as f32 as f64;
        self.scene.gaussians.iter_mut().for_each(|g| g.opacity_logit = v);
        self.optim.opacity.zero_moments();
    }

    /// PSNR of the clamped full render against a view's image.
    pub fn view_psnr(&self, view: &TrainView) -> Result<f64> {
        let out = render(&self.scene, &view.camera, &self.render_settings());
        psnr(&out.full.map(|v| v.clamp(0.0, 1.0)), &view.image)
    }

    pub fn log_line(&self, report: &StepReport, heldout: Option<&TrainView>) -> Result<TrainLog> {
        Ok(TrainLog {
            step: report.step,
            loss: report.loss,
            gaussians: report.gaussians,
            psnr: heldout.map(|v| self.view_psnr(v)).transpose()?,
        })
    }

    /// Runs the remaining iterations, one view per step. Views are visited
    /// in a fresh seeded permutation every epoch. `on_step` sees the
    /// trainer after every step and may abort by returning an error.
    pub fn run(
        &mut self,
        views: &[TrainView],
        mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
    ) -> Result<()> {
        if views.is_empty() {
            return Err(Error::InvalidInput("no training views".into()));
        }
        let mut order: Vec<usize> = Vec::new();
        while self.step < self.config.iterations {
            if order.is_empty() {
                order = (0..views.len()).collect();
                order.shuffle(&mut self.rng);
                order.reverse();
            }
            let v = order.pop().expect("refilled above");
            let report = self.train_step(&views[v])?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    #[cfg(test)]
    fn optimizer_rows(&self) -> usize {
        self.optim.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Action {
    Keep,
    Duplicate,
    Split,
}
