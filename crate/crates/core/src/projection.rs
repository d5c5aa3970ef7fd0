//! Perspective projection of 3D Gaussians (EWA affine approximation), the
//! screen-space kernel, and depth-sorted tile binning.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::scene::{covariance_of, sh_color_degree, Gaussian, GaussianScene};

pub const TILE_SIZE: usize = 16;
pub const NEAR_PLANE: f64 = 0.01;
/// Low-pass dilation added to the 2D covariance diagonal, in px².
pub const COV2D_DILATION: f64 = 0.3;

/// A Gaussian as seen from one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    /// Index into `GaussianScene::gaussians`.
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub inv_cov2d: Matrix2<f64>,
    /// Camera-space z.
    pub depth: f64,
    /// 3σ footprint radius in pixels.
    pub radius: f64,
    pub color: Vector3<f64>,
    /// Channels whose SH value was clamped at zero.
    pub color_clamped: [bool; 3],
    /// SH degree that produced `color`.
    pub sh_degree: usize,
    pub opacity: f64,
    /// Quadratic-form value beyond which `opacity · kernel < 1/255`.
    pub(crate) cutoff_power: f64,
}

/// Jacobian of the pinhole map at camera-space point `t`.
pub fn projection_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz2,
    )
}

/// Projects one Gaussian; `None` when it is behind the near plane or its 3σ
/// box misses the image.
pub fn project(g: &Gaussian, cam: &Camera) -> Option<ProjectedGaussian> {
    project_with_degree(g, 0, cam, g.sh_degree())
}

pub(crate) fn project_with_degree(
    g: &Gaussian,
    index: usize,
    cam: &Camera,
    sh_degree: usize,
) -> Option<ProjectedGaussian> {
    let t = cam.to_camera(&g.position);
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let mean2d = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
    let j = projection_jacobian(cam, &t);
    let cov_cam: Matrix3<f64> = cam.rotation * covariance_of(g) * cam.rotation.transpose();
    let cov2d = j * cov_cam * j.transpose() + Matrix2::identity() * COV2D_DILATION;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let inv_cov2d = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = 3.0 * lambda_max.sqrt();
    if mean2d.x + radius < 0.0
        || mean2d.y + radius < 0.0
        || mean2d.x - radius > cam.width as f64
        || mean2d.y - radius > cam.height as f64
    {
        return None;
    }
    let view = g.position - cam.center();
    let dir = view / view.norm();
    let raw = sh_color_degree(g, &dir, sh_degree);
    // sh_color clamps; recover which channels hit the floor.
    let unclamped = unclamped_color(g, &dir, sh_degree);
    let color_clamped = [unclamped.x < 0.0, unclamped.y < 0.0, unclamped.z < 0.0];
    Some(ProjectedGaussian {
        index,
        mean2d,
        cov2d,
        inv_cov2d,
        depth: t.z,
        radius,
        color: raw,
        color_clamped,
        sh_degree: sh_degree.min(g.sh_degree()),
        opacity: g.opacity(),
        cutoff_power: 2.0 * (255.0 * g.opacity()).ln(),
    })
}

fn unclamped_color(g: &Gaussian, dir: &Vector3<f64>, degree: usize) -> Vector3<f64> {
    let degree = degree.min(g.sh_degree());
    let mut basis = [0.0; 16];
    crate::sh::eval_basis(degree, dir, &mut basis);
    let mut c = Vector3::repeat(crate::scene::COLOR_OFFSET);
    for (b, coeff) in basis.iter().zip(&g.sh).take(crate::sh::num_coeffs(degree)) {
        c += coeff * *b;
    }
    c
}

/// `exp(-½ dᵀ Σ̂⁻¹ d)` with `d = pixel - mean2d`.
#[inline]
pub fn kernel_value(pg: &ProjectedGaussian, pixel: Vector2<f64>) -> f64 {
    (-0.5 * kernel_power(pg, pixel)).exp()
}

/// `dᵀ Σ̂⁻¹ d`.
#[inline]
pub(crate) fn kernel_power(pg: &ProjectedGaussian, pixel: Vector2<f64>) -> f64 {
    let d = pixel - pg.mean2d;
    let a = &pg.inv_cov2d;
    a[(0, 0)] * d.x * d.x + (a[(0, 1)] + a[(1, 0)]) * d.x * d.y + a[(1, 1)] * d.y * d.y
}

/// Projects every Gaussian and returns the visible ones sorted by
/// `(depth, index)`.
pub fn project_scene(scene: &GaussianScene, cam: &Camera, sh_degree: usize) -> Vec<ProjectedGaussian> {
    let mut projected: Vec<ProjectedGaussian> = scene
        .gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_with_degree(g, i, cam, sh_degree))
        .collect();
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    projected
}

/// Per-tile lists of projected Gaussians, each sorted front to back.
#[derive(Clone, Debug, PartialEq)]
pub struct TileIndex {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// `lists[ty * tiles_x + tx]` holds indices into the depth-sorted
    /// projected array.
    pub lists: Vec<Vec<u32>>,
}

impl TileIndex {
    /// Bins an already depth-sorted projection.
    pub fn from_projected(projected: &[ProjectedGaussian], width: usize, height: usize) -> Self {
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (slot, pg) in projected.iter().enumerate() {
            if let Some((x0, x1, y0, y1)) = tile_range(pg, tiles_x, tiles_y) {
                for ty in y0..=y1 {
                    for tx in x0..=x1 {
                        lists[ty * tiles_x + tx].push(slot as u32);
                    }
                }
            }
        }
        Self { tiles_x, tiles_y, lists }
    }

    pub fn tile(&self, tx: usize, ty: usize) -> &[u32] {
        &self.lists[ty * self.tiles_x + tx]
    }

    pub fn num_tiles(&self) -> usize {
        self.lists.len()
    }
}

/// Inclusive tile range overlapped by the 3σ box.
pub fn tile_range(pg: &ProjectedGaussian, tiles_x: usize, tiles_y: usize) -> Option<(usize, usize, usize, usize)> {
    let ts = TILE_SIZE as f64;
    let lo_x = ((pg.mean2d.x - pg.radius) / ts).floor();
    let hi_x = ((pg.mean2d.x + pg.radius) / ts).floor();
    let lo_y = ((pg.mean2d.y - pg.radius) / ts).floor();
    let hi_y = ((pg.mean2d.y + pg.radius) / ts).floor();
    if hi_x < 0.0 || hi_y < 0.0 || lo_x >= tiles_x as f64 || lo_y >= tiles_y as f64 {
        return None;
    }
    let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64) as usize;
    Some((clamp(lo_x, tiles_x), clamp(hi_x, tiles_x), clamp(lo_y, tiles_y), clamp(hi_y, tiles_y)))
}

/// Projection and binning in one call.
pub fn build_tiles(scene: &GaussianScene, cam: &Camera) -> (Vec<ProjectedGaussian>, TileIndex) {
    let projected = project_scene(scene, cam, scene.sh_degree());
    let tiles = TileIndex::from_projected(&projected, cam.width, cam.height);
    (projected, tiles)
}
