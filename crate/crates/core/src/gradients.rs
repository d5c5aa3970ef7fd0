//! Reverse-mode derivatives of the full render.
//!
//! The backward pass replays each pixel's forward composite (same skip and
//! termination decisions), walks the processed splats back to front and
//! chains through the kernel, the EWA projection, the SH color model and the
//! medium network. Work is split by tile; every tile accumulates into its
//! own buffers, which are merged in tile order so the result does not depend
//! on the thread count.

use nalgebra::{Matrix2, Matrix3, Quaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::camera::Camera;
use crate::compositor::{render_cached, splat_alpha, FrameCache, RenderSettings, ALPHA_MIN, TRANSMITTANCE_CUTOFF};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::medium::{MediumGradients, MediumNetwork, MediumSampleGrad};
use crate::projection::{projection_jacobian, ProjectedGaussian};
use crate::scene::{rotation_from_quaternion, Gaussian, GaussianScene};
use crate::sh;

/// Derivatives of a scalar loss with respect to every scene parameter, plus
/// the densification statistics gathered along the way.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffers {
    pub position: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    /// Gradient with respect to the stored (unnormalized) quaternion.
    pub rotation: Vec<Quaternion<f64>>,
    pub opacity_logit: Vec<f64>,
    pub sh: Vec<Vec<Vector3<f64>>>,
    pub medium: MediumGradients,
    /// Screen-space mean gradient summed over pixels.
    pub mean2d: Vec<Vector2<f64>>,
    /// Sum over pixels of the per-pixel gradient norm with respect to the
    /// mean in normalized device coordinates (pixel gradient scaled by
    /// `(W/2, H/2)`), the usual scale for densification thresholds.
    pub mean2d_norm: Vec<f64>,
    /// Number of views in which the Gaussian touched at least one pixel.
    pub contributions: Vec<u32>,
}

impl GradientBuffers {
    pub fn zeros_like(scene: &GaussianScene) -> Self {
        let n = scene.len();
        Self {
            position: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![Quaternion::new(0.0, 0.0, 0.0, 0.0); n],
            opacity_logit: vec![0.0; n],
            sh: scene.gaussians.iter().map(|g| vec![Vector3::zeros(); g.sh.len()]).collect(),
            medium: scene.medium.zeros_like(),
            mean2d: vec![Vector2::zeros(); n],
            mean2d_norm: vec![0.0; n],
            contributions: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        let v3 = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        self.position.iter().all(v3)
            && self.log_scale.iter().all(v3)
            && self.rotation.iter().all(|q| q.coords.iter().all(|x| x.is_finite()))
            && self.opacity_logit.iter().all(|x| x.is_finite())
            && self.sh.iter().flatten().all(v3)
            && self.medium.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Per-splat screen-space partials accumulated inside one tile.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
    mean2d_norm: f64,
    touched: bool,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
        self.mean2d_norm += o.mean2d_norm;
        self.touched |= o.touched;
    }
}

struct Record {
    entry: usize,
    alpha: f64,
    kernel: f64,
    transmittance: f64,
    attn: Vector3<f64>,
    bs: Vector3<f64>,
}

/// Derivatives of `Σ grad_full ⊙ full` for the default render settings.
pub fn backward(scene: &GaussianScene, cam: &Camera, grad_full: &ImageBuffer) -> Result<GradientBuffers> {
    backward_with(scene, cam, &RenderSettings::default(), grad_full)
}

pub fn backward_with(
    scene: &GaussianScene,
    cam: &Camera,
    settings: &RenderSettings,
    grad_full: &ImageBuffer,
) -> Result<GradientBuffers> {
    let (_, frame) = render_cached(scene, cam, settings);
    backward_cached(scene, cam, &frame, grad_full)
}

/// Backward pass reusing the state of a previous [`render_cached`] call with
/// the same scene and camera.
pub fn backward_cached(
    scene: &GaussianScene,
    cam: &Camera,
    frame: &FrameCache,
    grad_full: &ImageBuffer,
) -> Result<GradientBuffers> {
    if grad_full.width() != cam.width || grad_full.height() != cam.height || grad_full.channels() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient is {}x{}x{}, render is {}x{}x3",
            grad_full.width(),
            grad_full.height(),
            grad_full.channels(),
            cam.width,
            cam.height
        )));
    }
    if frame.width != cam.width || frame.height != cam.height {
        return Err(Error::ShapeMismatch("frame cache belongs to another camera".into()));
    }

    let per_tile: Vec<(Vec<SplatGrad>, Vec<MediumSampleGrad>)> = (0..frame.tiles.num_tiles())
        .into_par_iter()
        .map(|tile| backward_tile(frame, tile, grad_full))
        .collect();

    // Merge in tile order.
    let mut splat = vec![SplatGrad::default(); frame.projected.len()];
    let mut pixel_medium = vec![MediumSampleGrad::default(); cam.pixel_count()];
    for (tile, (grads, media)) in per_tile.iter().enumerate() {
        for (&slot, g) in frame.tiles.lists[tile].iter().zip(grads) {
            splat[slot as usize].add(g);
        }
        for ((x, y), m) in frame.tile_pixels(tile).zip(media) {
            pixel_medium[y * cam.width + x] = *m;
        }
    }

    let mut out = GradientBuffers::zeros_like(scene);
    let chained: Vec<(usize, GaussianGrad)> = frame
        .projected
        .par_iter()
        .zip(splat.par_iter())
        .filter(|(_, g)| g.touched)
        .map(|(pg, g)| (pg.index, chain_gaussian(&scene.gaussians[pg.index], pg, g, cam)))
        .collect();
    for (index, g) in chained {
        out.position[index] = g.position;
        out.log_scale[index] = g.log_scale;
        out.rotation[index] = g.rotation;
        out.opacity_logit[index] = g.opacity_logit;
        out.sh[index] = g.sh;
        out.mean2d[index] = g.mean2d;
        out.mean2d_norm[index] = g.mean2d_norm;
        out.contributions[index] = 1;
    }
    if frame.with_medium {
        out.medium = match &frame.activations {
            Some(acts) => scene.medium.backward_cached(acts, &pixel_medium),
            None => scene.medium.backward_batch(&frame.dirs, &pixel_medium),
        };
    }
    Ok(out)
}

fn backward_tile(frame: &FrameCache, tile: usize, grad_full: &ImageBuffer) -> (Vec<SplatGrad>, Vec<MediumSampleGrad>) {
    let list = &frame.tiles.lists[tile];
    let mut grads = vec![SplatGrad::default(); list.len()];
    let mut media = Vec::new();
    let mut records: Vec<Record> = Vec::new();
    let scale = frame.medium_scale;
    let ndc_scale = Vector2::new(frame.width as f64 / 2.0, frame.height as f64 / 2.0);

    for (x, y) in frame.tile_pixels(tile) {
        let up = Vector3::new(grad_full.get(x, y, 0), grad_full.get(x, y, 1), grad_full.get(x, y, 2));
        let med = &frame.media[y * frame.width + x];
        if up == Vector3::zeros() {
            media.push(MediumSampleGrad::default());
            // Contribution flags still follow the forward decisions.
            mark_touched(frame, list, &mut grads, x, y);
            continue;
        }
        let pixel = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        let sa = med.sigma_attn * scale;
        let sb = med.sigma_bs * scale;

        // Forward replay.
        records.clear();
        let mut t = 1.0;
        for (entry, &slot) in list.iter().enumerate() {
            let pg = &frame.projected[slot as usize];
            let (alpha, kernel, clamped) = splat_alpha(pg, pixel);
            if alpha < ALPHA_MIN {
                continue;
            }
            records.push(Record {
                entry,
                // A clamped alpha is constant in every parameter.
                alpha: if clamped { -alpha } else { alpha },
                kernel,
                transmittance: t,
                attn: sa.map(|s| (-s * pg.depth).exp()),
                bs: sb.map(|s| (-s * pg.depth).exp()),
            });
            t *= 1.0 - alpha;
            if t < TRANSMITTANCE_CUTOFF {
                break;
            }
        }
        let t_final = t;
        let eb_last = records.last().map_or(Vector3::repeat(1.0), |r| r.bs);
        let s_last = records.last().map_or(0.0, |r| frame.projected[list[r.entry] as usize].depth);

        let background = med.c_med.component_mul(&eb_last) * t_final;
        let mut suffix = up.dot(&background);
        let mut d_cmed = eb_last * t_final;
        let mut d_sa = Vector3::zeros();
        let mut d_sb = -med.c_med.component_mul(&eb_last) * (t_final * s_last);

        for k in (0..records.len()).rev() {
            let r = &records[k];
            let pg = &frame.projected[list[r.entry] as usize];
            let alpha = r.alpha.abs();
            let ti = r.transmittance;
            let depth = pg.depth;
            let (eb_prev, s_prev) = if k == 0 {
                (Vector3::repeat(1.0), 0.0)
            } else {
                let p = &records[k - 1];
                (p.bs, frame.projected[list[p.entry] as usize].depth)
            };

            let obj_color = pg.color.component_mul(&r.attn);
            let obj = obj_color * (ti * alpha);
            let seg = med.c_med.component_mul(&(eb_prev - r.bs)) * ti;

            let d_alpha = ti * up.dot(&obj_color) - suffix / (1.0 - alpha);
            suffix += up.dot(&obj) + up.dot(&seg);

            let g = &mut grads[r.entry];
            g.touched = true;
            g.color += up.component_mul(&r.attn) * (ti * alpha);
            let d_depth_vec = -sa.component_mul(&obj) + sb.component_mul(&med.c_med).component_mul(&r.bs) * (ti * alpha);
            g.depth += up.dot(&d_depth_vec);

            if r.alpha > 0.0 {
                let d = pixel - pg.mean2d;
                let a = &pg.inv_cov2d;
                let dg = d_alpha * pg.opacity;
                g.opacity += d_alpha * r.kernel;
                let dmean = (a * d) * (dg * r.kernel);
                g.mean2d += dmean;
                g.mean2d_norm += dmean.component_mul(&ndc_scale).norm();
                g.conic += (d * d.transpose()) * (-0.5 * dg * r.kernel);
            }

            d_cmed += (eb_prev - r.bs) * ti;
            d_sa -= obj * depth;
            d_sb += med.c_med.component_mul(&(r.bs * depth - eb_prev * s_prev)) * ti;
        }
        if !frame.with_medium {
            media.push(MediumSampleGrad::default());
            continue;
        }
        media.push(MediumSampleGrad {
            c_med: up.component_mul(&d_cmed),
            sigma_attn: up.component_mul(&d_sa) * scale,
            sigma_bs: up.component_mul(&d_sb) * scale,
        });
    }
    (grads, media)
}

fn mark_touched(frame: &FrameCache, list: &[u32], grads: &mut [SplatGrad], x: usize, y: usize) {
    let pixel = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
    let mut t = 1.0;
    for (entry, &slot) in list.iter().enumerate() {
        let (alpha, _, _) = splat_alpha(&frame.projected[slot as usize], pixel);
        if alpha < ALPHA_MIN {
            continue;
        }
        grads[entry].touched = true;
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
}

struct GaussianGrad {
    position: Vector3<f64>,
    log_scale: Vector3<f64>,
    rotation: Quaternion<f64>,
    opacity_logit: f64,
    sh: Vec<Vector3<f64>>,
    mean2d: Vector2<f64>,
    mean2d_norm: f64,
}

fn chain_gaussian(g: &Gaussian, pg: &ProjectedGaussian, sg: &SplatGrad, cam: &Camera) -> GaussianGrad {
    let rc = &cam.rotation;
    let t = cam.to_camera(&g.position);
    let (tx, ty, tz) = (t.x, t.y, t.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let j = projection_jacobian(cam, &t);

    // Conic → 2D covariance.
    let a = &pg.inv_cov2d;
    let d_cov2d = -(a * sg.conic * a);

    // 2D mean and Jacobian → camera-space point.
    let mut dt = Vector3::new(
        sg.mean2d.x * fx / tz,
        sg.mean2d.y * fy / tz,
        -sg.mean2d.x * fx * tx / (tz * tz) - sg.mean2d.y * fy * ty / (tz * tz),
    );
    dt.z += sg.depth;

    let q_unit = g.unit_rotation();
    let r = rotation_from_quaternion(&q_unit);
    let s = g.scale();
    let m = r * Matrix3::from_diagonal(&s);
    let sigma = m * m.transpose();
    let sigma_cam = rc * sigma * rc.transpose();

    let d_j = (d_cov2d + d_cov2d.transpose()) * j * sigma_cam;
    let iz2 = 1.0 / (tz * tz);
    let iz3 = iz2 / tz;
    dt.x += d_j[(0, 2)] * (-fx * iz2);
    dt.y += d_j[(1, 2)] * (-fy * iz2);
    dt.z += d_j[(0, 0)] * (-fx * iz2) + d_j[(0, 2)] * (2.0 * fx * tx * iz3) + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * ty * iz3);
    let mut d_position = rc.transpose() * dt;

    // Σ_cam → Σ → (R, s).
    let d_sigma_cam = j.transpose() * d_cov2d * j;
    let d_sigma = rc.transpose() * d_sigma_cam * rc;
    let d_m = (d_sigma + d_sigma.transpose()) * m;
    let d_r = d_m * Matrix3::from_diagonal(&s);
    let d_scale = Vector3::from_fn(|jj, _| (0..3).map(|i| d_m[(i, jj)] * r[(i, jj)]).sum::<f64>());
    let d_log_scale = d_scale.component_mul(&s);
    let d_q_unit = rotation_matrix_vjp(&q_unit, &d_r);
    let qn = g.rotation.norm();
    let d_rotation = (d_q_unit - q_unit * q_unit.coords.dot(&d_q_unit.coords)) / qn;

    // Color through SH, including the view direction.
    let degree = sh::degree_for_count(sh_len_used(pg, g)).unwrap_or(0);
    let view = g.position - cam.center();
    let vnorm = view.norm();
    let dir = view / vnorm;
    let mut basis = [0.0; 16];
    let mut basis_grad = [Vector3::zeros(); 16];
    sh::eval_basis(degree, &dir, &mut basis);
    sh::eval_basis_grad(degree, &dir, &mut basis_grad);
    let mask = Vector3::from_fn(|c, _| if pg.color_clamped[c] { 0.0 } else { 1.0 });
    let d_color = sg.color.component_mul(&mask);
    let mut d_sh = vec![Vector3::zeros(); g.sh.len()];
    let mut d_dir = Vector3::zeros();
    for k in 0..sh::num_coeffs(degree) {
        d_sh[k] = d_color * basis[k];
        d_dir += basis_grad[k] * g.sh[k].dot(&d_color);
    }
    d_position += (d_dir - dir * dir.dot(&d_dir)) / vnorm;

    let o = pg.opacity;
    GaussianGrad {
        position: d_position,
        log_scale: d_log_scale,
        rotation: d_rotation,
        opacity_logit: sg.opacity * o * (1.0 - o),
        sh: d_sh,
        mean2d: sg.mean2d,
        mean2d_norm: sg.mean2d_norm,
    }
}

/// Number of SH coefficients that entered the projected color.
fn sh_len_used(pg: &ProjectedGaussian, g: &Gaussian) -> usize {
    sh::num_coeffs(pg.sh_degree.min(g.sh_degree()))
}

/// Pulls a gradient on `R(q)` back to the components of a unit quaternion.
fn rotation_matrix_vjp(q: &Quaternion<f64>, d: &Matrix3<f64>) -> Quaternion<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let dw = 2.0 * (-z * d[(0, 1)] + y * d[(0, 2)] + z * d[(1, 0)] - x * d[(1, 2)] - y * d[(2, 0)] + x * d[(2, 1)]);
    let dx = 2.0
        * (y * d[(0, 1)] + z * d[(0, 2)] + y * d[(1, 0)] - 2.0 * x * d[(1, 1)] - w * d[(1, 2)] + z * d[(2, 0)]
            + w * d[(2, 1)]
            - 2.0 * x * d[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * d[(0, 0)] + x * d[(0, 1)] + w * d[(0, 2)] + x * d[(1, 0)] + z * d[(1, 2)] - w * d[(2, 0)]
            + z * d[(2, 1)]
            - 2.0 * y * d[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * d[(0, 0)] - w * d[(0, 1)] + x * d[(0, 2)] + w * d[(1, 0)] - 2.0 * z * d[(1, 1)] + y * d[(1, 2)]
            + x * d[(2, 0)]
            + y * d[(2, 1)]);
    Quaternion::new(dw, dx, dy, dz)
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Differences below this are counted as exact.
    pub absolute_floor: f64,
    /// Entries probed per medium tensor; `None` probes every entry.
    pub medium_samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-5,
            step: 1e-4,
            absolute_floor: 1e-8,
            medium_samples: Some(48),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
    /// Largest `|analytic - numeric|`, floor not applied.
    pub max_abs_error: f64,
    /// Largest analytic magnitude, for scale.
    pub max_gradient: f64,
    /// Worst analytic and numeric pair.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_relative_error).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<24} checked={:<5} max_rel_err={:.3e} max_abs_err={:.3e} max_grad={:.3e}",
                g.name, g.checked, g.max_relative_error, g.max_abs_error, g.max_gradient
            )?;
        }
        write!(
            f,
            "{} (tolerance {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.tolerance
        )
    }
}

/// Compares [`backward`] against central finite differences of
/// `Σ U ⊙ render(scene).full` for a random upstream image `U`.
pub fn check_gradients(scene: &GaussianScene, cam: &Camera, tolerance: f64) -> GradCheckReport {
    let opts = GradCheckOptions {
        tolerance,
        ..Default::default()
    };
    check_gradients_with(scene, cam, &opts)
}

pub fn check_gradients_with(scene: &GaussianScene, cam: &Camera, opts: &GradCheckOptions) -> GradCheckReport {
    let settings = RenderSettings::default();
    check_gradients_against(scene, cam, opts, |s, c| crate::compositor::render(s, c, &settings).full)
}

/// Runs the oracle with the numeric side evaluated through `forward`. With
/// the stock renderer this is [`check_gradients_with`]; any other forward
/// model exposes analytic gradients that do not belong to it.
pub fn check_gradients_against(
    scene: &GaussianScene,
    cam: &Camera,
    opts: &GradCheckOptions,
    forward: impl Fn(&GaussianScene, &Camera) -> ImageBuffer,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let upstream = ImageBuffer::from_fn(cam.width, cam.height, 3, |_, _, _| rng.random_range(-1.0..1.0));
    let analytic = backward(scene, cam, &upstream).expect("upstream shape matches camera");

    let objective = |s: &GaussianScene| -> f64 {
        let img = forward(s, cam);
        img.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
    };
    let h = opts.step;
    let numeric = |edit: &dyn Fn(&mut GaussianScene, f64)| -> f64 {
        let mut plus = scene.clone();
        edit(&mut plus, h);
        let mut minus = scene.clone();
        edit(&mut minus, -h);
        (objective(&plus) - objective(&minus)) / (2.0 * h)
    };

    let mut groups = Vec::new();
    let mut record = |name: &str, pairs: Vec<(f64, f64)>| {
        let mut worst = (0.0, 0.0);
        let mut max_err = 0.0;
        let mut max_abs = 0.0f64;
        let mut max_grad = 0.0f64;
        for &(a, n) in &pairs {
            max_abs = max_abs.max((a - n).abs());
            max_grad = max_grad.max(a.abs());
            let err = relative_error(a, n, opts.absolute_floor);
            if err > max_err || err.is_nan() {
                max_err = if err.is_nan() { f64::INFINITY } else { err };
                worst = (a, n);
            }
        }
        groups.push(GroupReport {
            name: name.to_string(),
            checked: pairs.len(),
            max_relative_error: max_err,
            max_abs_error: max_abs,
            max_gradient: max_grad,
            worst,
        });
    };

    let n = scene.len();
    let mut pos = Vec::new();
    let mut scale = Vec::new();
    let mut rot = Vec::new();
    let mut opa = Vec::new();
    let mut shc = Vec::new();
    for i in 0..n {
        for a in 0..3 {
            pos.push((
                analytic.position[i][a],
                numeric(&|s, d| s.gaussians[i].position[a] += d),
            ));
            scale.push((
                analytic.log_scale[i][a],
                numeric(&|s, d| s.gaussians[i].log_scale[a] += d),
            ));
        }
        for a in 0..4 {
            rot.push((
                analytic.rotation[i].coords[a],
                numeric(&|s, d| s.gaussians[i].rotation.coords[a] += d),
            ));
        }
        opa.push((analytic.opacity_logit[i], numeric(&|s, d| s.gaussians[i].opacity_logit += d)));
        for k in 0..scene.gaussians[i].sh.len() {
            for c in 0..3 {
                shc.push((analytic.sh[i][k][c], numeric(&|s, d| s.gaussians[i].sh[k][c] += d)));
            }
        }
    }
    record("position", pos);
    record("log_scale", scale);
    record("rotation", rot);
    record("opacity_logit", opa);
    record("sh_coeffs", shc);

    let names = scene.medium.tensor_names();
    let analytic_tensors = analytic.medium.tensors();
    for (t, name) in names.iter().enumerate() {
        let len = analytic_tensors[t].len();
        let indices: Vec<usize> = match opts.medium_samples {
            Some(k) if k < len => rand::seq::index::sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        let pairs = indices
            .iter()
            .map(|&e| {
                let edit = |s: &mut GaussianScene, d: f64| s.medium.tensors_mut()[t][e] += d;
                (analytic_tensors[t][e], numeric(&edit))
            })
            .collect();
        record(name, pairs);
    }

    let passed = groups.iter().all(|g| g.max_relative_error <= opts.tolerance);
    GradCheckReport {
        tolerance: opts.tolerance,
        groups,
        passed,
    }
}

/// `|a − n| / max(|a|, |n|)`, or 0 when `|a − n|` is within `floor`.
pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    let diff = (a - n).abs();
    if diff <= floor {
        0.0
    } else {
        diff / a.abs().max(n.abs())
    }
}

/// A small scene whose composite is smooth in every parameter: large,
/// well separated Gaussians covering a single 16×16 tile, opacities away
/// from the skip and clamp thresholds and colors away from the zero floor.
pub fn gradient_test_scene(seed: u64, count: usize) -> (GaussianScene, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussians = (0..count)
        .map(|i| {
            let depth = 2.0 + 0.35 * i as f64;
            let mut g = Gaussian::new(
                Vector3::new(rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25), depth),
                1.0,
                rng.random_range(0.25..0.55),
                Vector3::new(
                    rng.random_range(0.3..0.8),
                    rng.random_range(0.3..0.8),
                    rng.random_range(0.3..0.8),
                ),
                sh::MAX_COLOR_DEGREE,
            );
            g.log_scale = Vector3::from_fn(|_, _| rng.random_range(1.2f64..2.0).ln());
            g.rotation = Quaternion::new(
                rng.random_range(0.5..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ) * rng.random_range(0.8..1.3);
            for coeff in g.sh.iter_mut().skip(1) {
                *coeff = Vector3::from_fn(|_, _| rng.random_range(-0.08..0.08));
            }
            g
        })
        .collect();
    let medium = MediumNetwork::random(
        &mut rng,
        crate::medium::DEFAULT_ENCODING_DEGREE,
        crate::medium::DEFAULT_HIDDEN,
    );
    let scene = GaussianScene {
        gaussians,
        medium,
        scene_extent: 1.0,
    };
    let cam = Camera::new(Matrix3::identity(), Vector3::zeros(), 14.0, 14.0, 8.0, 8.0, 16, 16).expect("valid camera");
    (scene, cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compositor::render;
    use crate::scene::{sigmoid, COLOR_OFFSET};

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (scene, cam) = gradient_test_scene(1, 4);
        let g = backward(&scene, &cam, &ImageBuffer::new(16, 16, 3)).unwrap();
        let mut zero = GradientBuffers::zeros_like(&scene);
        zero.contributions = g.contributions.clone();
        assert_eq!(g, zero);
        assert!(g.contributions.iter().all(|&c| c == 1));
    }

    #[test]
    fn rejects_wrong_upstream_shape() {
        let (scene, cam) = gradient_test_scene(1, 2);
        assert!(matches!(
            backward(&scene, &cam, &ImageBuffer::new(8, 16, 3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn single_gaussian_opacity_derivative_by_hand() {
        // One on-axis Gaussian, medium with known constant output (biases
        // only), upstream on the center pixel's red channel.
        let mut g = Gaussian::new(Vector3::new(0.0, 0.0, 2.0), 0.3, 0.6, Vector3::new(0.7, 0.4, 0.2), 0);
        g.opacity_logit = 0.3;
        let mut medium = MediumNetwork::zeros(4, 8);
        medium.layers[2].bias = nalgebra::DVector::from_vec(vec![0.2, 0.0, 0.0, 0.1, 0.0, 0.0, -0.4, 0.0, 0.0]);
        let scene = GaussianScene {
            gaussians: vec![g.clone()],
            medium,
            scene_extent: 1.0,
        };
        let cam = Camera::new(Matrix3::identity(), Vector3::zeros(), 20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
        let mut up = ImageBuffer::new(16, 16, 3);
        up.set(7, 7, 0, 1.0);
        let grads = backward(&scene, &cam, &up).unwrap();

        let med = scene.medium.sample(&cam.pixel_ray(7, 7));
        let pg = crate::projection::project(&g, &cam).unwrap();
        let kernel = crate::projection::kernel_value(&pg, Vector2::new(7.5, 7.5));
        let o = sigmoid(0.3);
        let s = 2.0;
        let (sa, sb, cm) = (med.sigma_attn[0], med.sigma_bs[0], med.c_med[0]);
        // full_r = α c e^{-σa s} + c_med (1 - e^{-σb s}) + (1-α) c_med e^{-σb s}
        let d_full_d_alpha = 0.7 * (-sa * s).exp() - cm * (-sb * s).exp();
        let expect = d_full_d_alpha * kernel * o * (1.0 - o);
        assert!((grads.opacity_logit[0] - expect).abs() < 1e-12, "{} vs {expect}", grads.opacity_logit[0]);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (scene, cam) = gradient_test_scene(7, 4);
        let opts = GradCheckOptions {
            medium_samples: Some(12),
            ..Default::default()
        };
        let report = check_gradients_with(&scene, &cam, &opts);
        assert!(report.passed, "{report}");
    }

    #[test]
    fn mismatched_attenuation_fails_the_oracle() {
        let (scene, cam) = gradient_test_scene(7, 4);
        let opts = GradCheckOptions {
            medium_samples: Some(12),
            ..Default::default()
        };
        let settings = RenderSettings::default();
        // Attenuate objects with the backscatter head.
        let report = check_gradients_against(&scene, &cam, &opts, |s, c| {
            let mut mutated = s.clone();
            let last = mutated.medium.layers.last_mut().unwrap();
            for col in 0..last.weight.ncols() {
                for k in 0..3 {
                    last.weight[(3 + k, col)] = last.weight[(6 + k, col)];
                }
            }
            for k in 0..3 {
                last.bias[3 + k] = last.bias[6 + k];
            }
            render(&mutated, c, &settings).full
        });
        assert!(!report.passed, "{report}");
    }

    #[test]
    fn zero_opacity_scene_passes_trivially() {
        let (mut scene, cam) = gradient_test_scene(3, 3);
        for g in &mut scene.gaussians {
            g.opacity_logit = -40.0;
        }
        let opts = GradCheckOptions {
            medium_samples: Some(4),
            ..Default::default()
        };
        assert!(check_gradients_with(&scene, &cam, &opts).passed);
    }

    #[test]
    fn tied_densities_with_white_colors_have_zero_sigma_gradient() {
        // With σ_attn = σ_bs and all colors 1, the pixel is identically 1.
        let (mut scene, cam) = gradient_test_scene(5, 5);
        for g in &mut scene.gaussians {
            g.sh.iter_mut().for_each(|c| *c = Vector3::zeros());
            g.sh[0] = Vector3::repeat((1.0 - COLOR_OFFSET) / sh::SH_C0);
        }
        let mut medium = MediumNetwork::zeros(4, 8);
        medium.layers[2].bias = nalgebra::DVector::from_vec(vec![30.0, 30.0, 30.0, 0.3, 0.5, 0.7, 0.3, 0.5, 0.7]);
        scene.medium = medium;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let up = ImageBuffer::from_fn(16, 16, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let (_, frame) = render_cached(&scene, &cam, &RenderSettings::default());
        let mut pixel = vec![MediumSampleGrad::default(); 256];
        // Summed σ gradient per pixel from the backward tile pass.
        let (_, media) = backward_tile(&frame, 0, &up);
        for ((x, y), m) in frame.tile_pixels(0).zip(media) {
            pixel[y * 16 + x] = m;
        }
        for m in &pixel {
            for c in 0..3 {
                // c_med = sigmoid(30) is 1 - 9e-14, so the residual is tiny.
                assert!((m.sigma_attn[c] + m.sigma_bs[c]).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let (scene, cam) = gradient_test_scene(11, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u1 = ImageBuffer::from_fn(16, 16, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let u2 = ImageBuffer::from_fn(16, 16, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let (a, b) = (0.7, -1.9);
        let mix = u1.zip_map(&u2, |p, q| a * p + b * q).unwrap();
        let g1 = backward(&scene, &cam, &u1).unwrap();
        let g2 = backward(&scene, &cam, &u2).unwrap();
        let gm = backward(&scene, &cam, &mix).unwrap();
        for i in 0..scene.len() {
            assert!((gm.position[i] - (g1.position[i] * a + g2.position[i] * b)).norm() < 1e-10);
            assert!((gm.opacity_logit[i] - (g1.opacity_logit[i] * a + g2.opacity_logit[i] * b)).abs() < 1e-10);
            assert!((gm.rotation[i].coords - (g1.rotation[i].coords * a + g2.rotation[i].coords * b)).norm() < 1e-10);
        }
        let (t1, t2, tm) = (g1.medium.tensors(), g2.medium.tensors(), gm.medium.tensors());
        for t in 0..tm.len() {
            for e in 0..tm[t].len() {
                assert!((tm[t][e] - (a * t1[t][e] + b * t2[t][e])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn densification_statistic_is_sum_of_per_pixel_norms() {
        let (scene, cam) = gradient_test_scene(13, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let up = ImageBuffer::from_fn(16, 16, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let full = backward(&scene, &cam, &up).unwrap();
        let mut brute = vec![0.0; scene.len()];
        for y in 0..16 {
            for x in 0..16 {
                let mut single = ImageBuffer::new(16, 16, 3);
                for c in 0..3 {
                    single.set(x, y, c, up.get(x, y, c));
                }
                let g = backward(&scene, &cam, &single).unwrap();
                for (b, m) in brute.iter_mut().zip(&g.mean2d) {
                    *b += (m.x * 8.0).hypot(m.y * 8.0);
                }
            }
        }
        for (a, b) in full.mean2d_norm.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn thread_count_does_not_change_gradients() {
        let (scene, cam) = gradient_test_scene(17, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let up = ImageBuffer::from_fn(16, 16, 3, |_, _, _| rng.random_range(-1.0..1.0));
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| backward(&scene, &cam, &up).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
