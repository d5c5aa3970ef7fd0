//! Initial scenes from sparse points or random boxes.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::medium::MediumNetwork;
use crate::scene::{Gaussian, GaussianScene};

/// Distances below this are treated as coincident points.
const MIN_NEIGHBOR_DISTANCE: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub sh_degree: usize,
    pub opacity: f64,
    pub medium_encoding_degree: usize,
    pub medium_hidden: usize,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            sh_degree: 3,
            opacity: 0.1,
            medium_encoding_degree: 4,
            medium_hidden: 128,
            seed: 0,
        }
    }
}

/// Radius of the camera rig: 1.1 × the largest distance from the mean
/// camera center, the usual normalization for learning rates and
/// densification thresholds.
pub fn scene_extent_from_cameras<'a>(cams: impl IntoIterator<Item = &'a Camera>) -> f64 {
    let centers: Vec<Vector3<f64>> = cams.into_iter().map(Camera::center).collect();
    if centers.is_empty() {
        return 1.0;
    }
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max) * 1.1;
    if radius > 0.0 {
        radius
    } else {
        1.0
    }
}

/// Mean distance from each point to its three nearest other points (fewer
/// if the cloud is smaller).
pub fn mean_neighbor_distance(points: &[Vector3<f64>]) -> Vec<f64> {
    let k = 3.min(points.len().saturating_sub(1));
    if k == 0 {
        return vec![0.0; points.len()];
    }
    let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, 3> = ImmutableKdTree::new_from_slice(&coords);
    coords
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let found = tree.nearest_n::<SquaredEuclidean>(q, NonZero::new(k + 1).unwrap());
            // Drop the query itself, or one zero-distance twin standing in
            // for it.
            let skip = found.iter().position(|n| n.item as usize == i).unwrap_or(found.len() - 1);
            let sum: f64 = found
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != skip)
                .map(|(_, n)| n.distance.sqrt())
                .sum();
            sum / k as f64
        })
        .collect()
}

/// One Gaussian per point, sized by its neighbor spacing and colored by the
/// point color.
pub fn initialize_scene(
    points: &[Vector3<f64>],
    colors: &[Vector3<f64>],
    scene_extent: f64,
    cfg: &InitConfig,
) -> Result<GaussianScene> {
    if points.is_empty() {
        return Err(Error::Degenerate("no points to initialize from".into()));
    }
    if points.len() != colors.len() {
        return Err(Error::ShapeMismatch(format!("{} points but {} colors", points.len(), colors.len())));
    }
    if points.len() > 1 && points.iter().all(|p| p == &points[0]) {
        return Err(Error::Degenerate("all initialization points coincide".into()));
    }
    let dists = mean_neighbor_distance(points);
    let gaussians = points
        .iter()
        .zip(colors)
        .zip(&dists)
        .map(|((p, c), d)| {
            let scale = if points.len() == 1 { 0.01 * scene_extent } else { d.max(MIN_NEIGHBOR_DISTANCE) };
            Gaussian::new(*p, scale, cfg.opacity, c.map(|v| v.clamp(0.0, 1.0)), cfg.sh_degree)
        })
        .collect();
    finish(gaussians, scene_extent, cfg)
}

/// `count` Gaussians uniform in the box `[lo, hi]` with random colors.
pub fn initialize_random(
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    count: usize,
    scene_extent: f64,
    cfg: &InitConfig,
) -> Result<GaussianScene> {
    if count == 0 || (0..3).any(|k| !(hi[k] >= lo[k])) {
        return Err(Error::InvalidInput("random initialization needs a non-empty box and count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let points: Vec<Vector3<f64>> = (0..count)
        .map(|_| Vector3::from_fn(|k, _| lo[k] + (hi[k] - lo[k]) * rng.random::<f64>()))
        .collect();
    let colors: Vec<Vector3<f64>> = (0..count).map(|_| Vector3::from_fn(|_, _| rng.random())).collect();
    initialize_scene(&points, &colors, scene_extent, cfg)
}

fn finish(gaussians: Vec<Gaussian>, scene_extent: f64, cfg: &InitConfig) -> Result<GaussianScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let medium = MediumNetwork::random(&mut rng, cfg.medium_encoding_degree, cfg.medium_hidden);
    let mut scene = GaussianScene::new(gaussians, medium, scene_extent)?;
    scene.quantize_to_f32();
    Ok(scene)
}
