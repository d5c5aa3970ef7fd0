//! Analytic test dataset: a textured rectangle seen from a ring of cameras.
//!
//! Every view comes with an exact clear image and depth map (ray/plane
//! intersection per pixel center), so fog can be synthesized with the true
//! depth and restoration scored against the true clear image.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::fog::{apply_fog, FogParams};
use crate::image::ImageBuffer;
use crate::io::colmap::model_from_views;
use crate::io::{write_colmap_text, write_pfm, write_png, PosedView};

/// Half extents of the rectangle in the `z = 0` plane.
pub const PLANE_HALF_WIDTH: f64 = 1.0;
pub const PLANE_HALF_HEIGHT: f64 = 0.75;

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub views: usize,
    /// Every `views / held_out`-th view, offset by half a stride, is held out.
    pub held_out: usize,
    pub min_distance: f64,
    pub max_distance: f64,
    /// Largest angle between a view direction and the plane normal.
    pub max_tilt: f64,
    /// Multiplies the texture; below 1 gives a low-light variant.
    pub brightness: f64,
    /// Sparse points sampled on the surface for initialization.
    pub points: usize,
    pub seed: u64,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        Self {
            width: 400,
            height: 300,
            focal: 400.0,
            views: 20,
            held_out: 4,
            min_distance: 1.2,
            max_distance: 2.6,
            max_tilt: 30f64.to_radians(),
            brightness: 1.0,
            points: 2000,
            seed: 0,
        }
    }
}

impl PlaneConfig {
    /// Same cameras at a different image size (focal scaled along).
    pub fn at_resolution(mut self, width: usize, height: usize) -> Self {
        self.focal *= width as f64 / self.width as f64;
        self.width = width;
        self.height = height;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneView {
    pub name: String,
    pub camera: Camera,
    pub clear: ImageBuffer,
    /// Camera-space z of the surface; infinite where the ray misses.
    pub depth: ImageBuffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneDataset {
    pub train: Vec<PlaneView>,
    pub test: Vec<PlaneView>,
    /// Surface samples with their (brightness-scaled) colors.
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
}

/// Smooth color pattern in `[0.1, 0.9]` per channel, low enough in frequency
/// to be resolved at every camera distance.
pub fn texture(x: f64, y: f64) -> Vector3<f64> {
    Vector3::new(
        0.5 + 0.4 * (TAU * x / 0.8).sin() * (TAU * y / 1.1).cos(),
        0.5 + 0.4 * (TAU * (x + 0.6 * y) / 0.9 + 0.3).sin(),
        0.5 + 0.4 * (TAU * (0.5 * x - y) / 1.3 + 1.0).cos(),
    )
}

fn inside(x: f64, y: f64) -> bool {
    x.abs() <= PLANE_HALF_WIDTH && y.abs() <= PLANE_HALF_HEIGHT
}

/// Clear image and depth map of the rectangle seen by `cam`.
pub fn render_plane(cam: &Camera, brightness: f64) -> (ImageBuffer, ImageBuffer) {
    let center = cam.center();
    let mut clear = ImageBuffer::new(cam.width, cam.height, 3);
    let mut depth = vec![f64::INFINITY; cam.width * cam.height];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let dir = cam.pixel_ray(x, y);
            if dir.z.abs() < 1e-12 {
                continue;
            }
            let t = -center.z / dir.z;
            if t <= 0.0 {
                continue;
            }
            let hit = center + dir * t;
            if !inside(hit.x, hit.y) {
                continue;
            }
            let c = texture(hit.x, hit.y) * brightness;
            for k in 0..3 {
                clear.set(x, y, k, c[k]);
            }
            depth[y * cam.width + x] = cam.to_camera(&hit).z;
        }
    }
    let depth = ImageBuffer::from_vec_unchecked(cam.width, cam.height, 1, depth).expect("depth has no NaN");
    (clear, depth)
}

fn cameras(cfg: &PlaneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Camera>> {
    (0..cfg.views)
        .map(|i| {
            // Golden-angle azimuths with tilt growing toward the rim, and
            // distances spread evenly but interleaved with the azimuths.
            let frac = (i as f64 + 0.5) / cfg.views as f64;
            let azimuth = i as f64 * 2.399963229728653 + rng.random_range(-0.1..0.1);
            let tilt = cfg.max_tilt * frac.sqrt();
            let k = (i * 7) % cfg.views;
            let distance =
                cfg.min_distance + (cfg.max_distance - cfg.min_distance) * k as f64 / (cfg.views.max(2) - 1) as f64;
            let dir = Vector3::new(tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), -tilt.cos());
            let target = Vector3::new(rng.random_range(-0.15..0.15), rng.random_range(-0.1..0.1), 0.0);
            Camera::look_at(
                target + dir * distance,
                target,
                Vector3::new(0.0, 1.0, 0.0),
                cfg.focal,
                cfg.width,
                cfg.height,
            )
        })
        .collect()
}

fn is_held_out(cfg: &PlaneConfig, i: usize) -> bool {
    if cfg.held_out == 0 {
        return false;
    }
    let stride = cfg.views / cfg.held_out;
    stride > 0 && i % stride == stride / 2 && i / stride < cfg.held_out
}

pub fn plane_dataset(cfg: &PlaneConfig) -> Result<PlaneDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cams = cameras(cfg, &mut rng)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, camera) in cams.into_iter().enumerate() {
        let (clear, depth) = render_plane(&camera, cfg.brightness);
        let view = PlaneView {
            name: format!("view_{i:03}"),
            camera,
            clear,
            depth,
        };
        if is_held_out(cfg, i) {
            test.push(view);
        } else {
            train.push(view);
        }
    }
    let (points, colors) = (0..cfg.points)
        .map(|_| {
            let x = rng.random_range(-PLANE_HALF_WIDTH..PLANE_HALF_WIDTH);
            let y = rng.random_range(-PLANE_HALF_HEIGHT..PLANE_HALF_HEIGHT);
            (Vector3::new(x, y, 0.0), texture(x, y) * cfg.brightness)
        })
        .unzip();
    Ok(PlaneDataset {
        train,
        test,
        points,
        colors,
    })
}

impl PlaneView {
    pub fn fogged(&self, params: &FogParams) -> Result<ImageBuffer> {
        apply_fog(&self.clear, &self.depth, params)
    }
}

impl PlaneDataset {
    pub fn cameras(&self) -> impl Iterator<Item = &Camera> {
        self.train.iter().chain(&self.test).map(|v| &v.camera)
    }

    /// Writes the dataset in the layout the command-line tools read:
    /// COLMAP text models `train/` and `test/` (both carrying the point
    /// cloud), observations in `images/` (fogged when `fog` is given),
    /// clear ground truth in `clear/` and depth maps in `depth/`.
    pub fn write(&self, dir: &Path, fog: Option<&FogParams>) -> Result<()> {
        let points: Vec<(Vector3<f64>, [u8; 3])> = self
            .points
            .iter()
            .zip(&self.colors)
            .map(|(p, c)| (*p, c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).into()))
            .collect();
        for (sub, views) in [("train", &self.train), ("test", &self.test)] {
            let posed: Vec<PosedView> = views
                .iter()
                .map(|v| PosedView { name: format!("{}.png", v.name), camera: v.camera.clone() })
                .collect();
            let model_dir = dir.join(sub);
            std::fs::create_dir_all(&model_dir).map_err(|e| Error::io(&model_dir, e))?;
            write_colmap_text(&model_dir, &model_from_views(&posed, &points))?;
        }
        for sub in ["images", "clear", "depth"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for v in self.train.iter().chain(&self.test) {
            let observed = match fog {
                Some(p) => v.fogged(p)?,
                None => v.clear.clone(),
            };
            write_png(&dir.join("images").join(format!("{}.png", v.name)), &observed)?;
            write_png(&dir.join("clear").join(format!("{}.png", v.name)), &v.clear)?;
            write_pfm(&dir.join("depth").join(format!("{}.pfm", v.name)), &v.depth)?;
        }
        Ok(())
    }
}
