//! Front-to-back compositing of depth-sorted splats with a closed-form
//! medium between consecutive splats.
//!
//! For splats `1..N` with opacities `α_i`, colors `c_i`, depths `s_i`
//! (`s_0 = 0`) and a per-ray medium `(c_med, σ_attn, σ_bs)`:
//!
//! ```text
//! T_1 = 1,  T_{i+1} = T_i (1 - α_i)
//! full = Σ T_i α_i c_i e^{-σ_attn s_i}
//!      + Σ T_i c_med (e^{-σ_bs s_{i-1}} - e^{-σ_bs s_i})
//!      + T_{N+1} c_med e^{-σ_bs s_N}
//! ```
//!
//! With `σ_attn = σ_bs` and unit colors the weights telescope to exactly 1.
//! When transmittance falls below [`TRANSMITTANCE_CUTOFF`] the ray is closed
//! at the last processed splat: the remaining splats are dropped but the
//! background term is still taken from that splat, which keeps the weights
//! a partition of unity.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::medium::{MediumActivations, MediumSample};
use crate::projection::{kernel_power, project_scene, ProjectedGaussian, TileIndex, TILE_SIZE};
use crate::scene::GaussianScene;

pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
/// Minimum accumulated weight for the normalized depth variant.
pub const DEPTH_NORMALIZE_MIN_WEIGHT: f64 = 1e-6;

/// One splat as seen by a single pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatSample {
    pub alpha: f64,
    pub color: Vector3<f64>,
    pub depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelComposite {
    pub full: Vector3<f64>,
    pub clear: Vector3<f64>,
    pub medium: Vector3<f64>,
    /// Σ T_i α_i s_i.
    pub depth: f64,
    /// Σ T_i α_i.
    pub weight: f64,
    pub transmittance: f64,
}

/// Running state of one pixel's composite.
#[derive(Clone, Debug)]
pub(crate) struct PixelAccumulator {
    c_med: Vector3<f64>,
    sigma_attn: Vector3<f64>,
    sigma_bs: Vector3<f64>,
    pub(crate) transmittance: f64,
    prev_bs: Vector3<f64>,
    full: Vector3<f64>,
    clear: Vector3<f64>,
    medium: Vector3<f64>,
    depth: f64,
    weight: f64,
}

impl PixelAccumulator {
    pub(crate) fn new(med: &MediumSample, medium_scale: f64) -> Self {
        Self {
            c_med: med.c_med,
            sigma_attn: med.sigma_attn * medium_scale,
            sigma_bs: med.sigma_bs * medium_scale,
            transmittance: 1.0,
            prev_bs: Vector3::repeat(1.0),
            full: Vector3::zeros(),
            clear: Vector3::zeros(),
            medium: Vector3::zeros(),
            depth: 0.0,
            weight: 0.0,
        }
    }

    /// Adds one splat with `alpha ≥ ALPHA_MIN`. Returns `false` once the
    /// transmittance has dropped below the cutoff.
    #[inline]
    pub(crate) fn push(&mut self, alpha: f64, color: &Vector3<f64>, depth: f64) -> bool {
        let t = self.transmittance;
        let attn = self.sigma_attn.map(|s| (-s * depth).exp());
        let bs = self.sigma_bs.map(|s| (-s * depth).exp());
        let segment = self.c_med.component_mul(&(self.prev_bs - bs)) * t;
        let object = color * (t * alpha);
        self.full += object.component_mul(&attn) + segment;
        self.medium += segment;
        self.clear += object;
        self.depth += t * alpha * depth;
        self.weight += t * alpha;
        self.transmittance = t * (1.0 - alpha);
        self.prev_bs = bs;
        self.transmittance >= TRANSMITTANCE_CUTOFF
    }

    pub(crate) fn finish(mut self) -> PixelComposite {
        let background = self.c_med.component_mul(&self.prev_bs) * self.transmittance;
        self.full += background;
        self.medium += background;
        PixelComposite {
            full: self.full,
            clear: self.clear,
            medium: self.medium,
            depth: self.depth,
            weight: self.weight,
            transmittance: self.transmittance,
        }
    }
}

/// Composites one pixel from splats already sorted by depth.
///
/// Splats with `alpha < ALPHA_MIN` are skipped. `medium_scale` multiplies
/// both densities.
pub fn composite_pixel(samples: &[SplatSample], med: &MediumSample, medium_scale: f64) -> Result<PixelComposite> {
    let mut prev = 0.0;
    for (i, s) in samples.iter().enumerate() {
        if !(s.depth >= prev) {
            return Err(Error::UnsortedDepths { index: i, depth: s.depth });
        }
        if !(0.0..=ALPHA_MAX).contains(&s.alpha) {
            return Err(Error::InvalidInput(format!(
                "alpha {} of splat {i} outside [0, {ALPHA_MAX}]",
                s.alpha
            )));
        }
        prev = s.depth;
    }
    let mut acc = PixelAccumulator::new(med, medium_scale);
    for s in samples {
        if s.alpha < ALPHA_MIN {
            continue;
        }
        if !acc.push(s.alpha, &s.color, s.depth) {
            break;
        }
    }
    Ok(acc.finish())
}

/// Opacity of a projected splat at a pixel: `(α, kernel, clamped)`.
#[inline]
pub(crate) fn splat_alpha(pg: &ProjectedGaussian, pixel: Vector2<f64>) -> (f64, f64, bool) {
    let q = kernel_power(pg, pixel);
    if q > pg.cutoff_power {
        return (0.0, 0.0, false);
    }
    let g = (-0.5 * q).exp();
    let a = pg.opacity * g;
    if a > ALPHA_MAX {
        (ALPHA_MAX, g, true)
    } else {
        (a, g, false)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    /// Multiplies σ_attn and σ_bs; 1 reproduces the fitted medium.
    pub medium_scale: f64,
    /// Highest SH degree used for splat colors; `None` uses all stored.
    pub sh_degree: Option<usize>,
    /// `false` renders without any medium (plain alpha blending).
    pub with_medium: bool,
    /// Divide depth by the accumulated weight when it exceeds 1e-6.
    pub normalize_depth: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            medium_scale: 1.0,
            sh_degree: None,
            with_medium: true,
            normalize_depth: false,
        }
    }
}

impl RenderSettings {
    pub fn with_medium_scale(mut self, scale: f64) -> Self {
        self.medium_scale = scale;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub full: ImageBuffer,
    pub clear: ImageBuffer,
    pub medium_only: ImageBuffer,
    pub depth: ImageBuffer,
    pub final_transmittance: ImageBuffer,
}

/// Per-frame state shared by the forward and backward passes: projected
/// splats, tile lists, pixel rays and medium samples.
pub struct FrameCache {
    pub(crate) projected: Vec<ProjectedGaussian>,
    pub(crate) tiles: TileIndex,
    pub(crate) dirs: Vec<Vector3<f64>>,
    pub(crate) media: Vec<MediumSample>,
    pub(crate) activations: Option<MediumActivations>,
    pub(crate) medium_scale: f64,
    pub(crate) with_medium: bool,
    pub(crate) width: usize,
    pub(crate) height: usize,
}

impl FrameCache {
    pub(crate) fn prepare(scene: &GaussianScene, cam: &Camera, settings: &RenderSettings, keep: bool) -> Self {
        let degree = settings.sh_degree.unwrap_or(usize::MAX).min(scene.sh_degree());
        let projected = project_scene(scene, cam, degree);
        let tiles = TileIndex::from_projected(&projected, cam.width, cam.height);
        let dirs: Vec<Vector3<f64>> = (0..cam.pixel_count())
            .into_par_iter()
            .map(|i| cam.pixel_ray(i % cam.width, i / cam.width))
            .collect();
        let (media, activations) = if !settings.with_medium {
            (vec![MediumSample::vacuum(); dirs.len()], None)
        } else if keep {
            let (m, a) = scene.medium.sample_batch_cached(&dirs);
            (m, Some(a))
        } else {
            (scene.medium.sample_batch(&dirs), None)
        };
        Self {
            projected,
            tiles,
            dirs,
            media,
            activations,
            medium_scale: settings.medium_scale,
            with_medium: settings.with_medium,
            width: cam.width,
            height: cam.height,
        }
    }

    /// Pixels of tile `tile` as `(x, y)`.
    pub(crate) fn tile_pixels(&self, tile: usize) -> impl Iterator<Item = (usize, usize)> {
        let tx = tile % self.tiles.tiles_x;
        let ty = tile / self.tiles.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let x1 = (x0 + TILE_SIZE).min(self.width);
        let y1 = (y0 + TILE_SIZE).min(self.height);
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }

    pub(crate) fn composite(&self, tile: usize, x: usize, y: usize) -> PixelComposite {
        let pixel = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
        let mut acc = PixelAccumulator::new(&self.media[y * self.width + x], self.medium_scale);
        for &slot in &self.tiles.lists[tile] {
            let pg = &self.projected[slot as usize];
            let (alpha, _, _) = splat_alpha(pg, pixel);
            if alpha < ALPHA_MIN {
                continue;
            }
            if !acc.push(alpha, &pg.color, pg.depth) {
                break;
            }
        }
        acc.finish()
    }
}

/// Renders full, restored (medium removed), medium-only and depth images.
pub fn render(scene: &GaussianScene, cam: &Camera, settings: &RenderSettings) -> RenderOutput {
    render_frame(FrameCache::prepare(scene, cam, settings, false), cam, settings).0
}

/// [`render`] that also returns the frame state needed by
/// [`crate::gradients::backward_cached`].
pub fn render_cached(scene: &GaussianScene, cam: &Camera, settings: &RenderSettings) -> (RenderOutput, FrameCache) {
    render_frame(FrameCache::prepare(scene, cam, settings, true), cam, settings)
}

fn render_frame(frame: FrameCache, cam: &Camera, settings: &RenderSettings) -> (RenderOutput, FrameCache) {
    let per_tile: Vec<Vec<PixelComposite>> = (0..frame.tiles.num_tiles())
        .into_par_iter()
        .map(|tile| frame.tile_pixels(tile).map(|(x, y)| frame.composite(tile, x, y)).collect())
        .collect();

    let (w, h) = (cam.width, cam.height);
    let mut out = RenderOutput {
        full: ImageBuffer::new(w, h, 3),
        clear: ImageBuffer::new(w, h, 3),
        medium_only: ImageBuffer::new(w, h, 3),
        depth: ImageBuffer::new(w, h, 1),
        final_transmittance: ImageBuffer::new(w, h, 1),
    };
    for (tile, pixels) in per_tile.iter().enumerate() {
        for ((x, y), px) in frame.tile_pixels(tile).zip(pixels) {
            for c in 0..3 {
                out.full.set(x, y, c, px.full[c]);
                out.clear.set(x, y, c, px.clear[c]);
                out.medium_only.set(x, y, c, px.medium[c]);
            }
            let depth = if settings.normalize_depth && px.weight > DEPTH_NORMALIZE_MIN_WEIGHT {
                px.depth / px.weight
            } else {
                px.depth
            };
            out.depth.set(x, y, 0, depth);
            out.final_transmittance.set(x, y, 0, px.transmittance);
        }
    }
    (out, frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::MediumNetwork;
    use crate::scene::Gaussian;
    use nalgebra::Matrix3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the three sums, no early exit.
    fn reference_full(samples: &[SplatSample], med: &MediumSample) -> Vector3<f64> {
        let mut t = 1.0;
        let mut prev = 0.0;
        let mut full = Vector3::zeros();
        for s in samples {
            for c in 0..3 {
                full[c] += t * s.alpha * s.color[c] * (-med.sigma_attn[c] * s.depth).exp();
                full[c] += t * med.c_med[c] * ((-med.sigma_bs[c] * prev).exp() - (-med.sigma_bs[c] * s.depth).exp());
            }
            t *= 1.0 - s.alpha;
            prev = s.depth;
        }
        for c in 0..3 {
            full[c] += t * med.c_med[c] * (-med.sigma_bs[c] * prev).exp();
        }
        full
    }

    #[test]
    fn empty_pixel_is_medium_color() {
        let med = MediumSample {
            c_med: Vector3::new(0.2, 0.3, 0.4),
            sigma_attn: Vector3::repeat(0.7),
            sigma_bs: Vector3::repeat(1.3),
        };
        let px = composite_pixel(&[], &med, 1.0).unwrap();
        assert_eq!(px.full, Vector3::new(0.2, 0.3, 0.4));
        assert_eq!(px.clear, Vector3::zeros());
        assert_eq!(px.depth, 0.0);
        assert_eq!(px.transmittance, 1.0);
    }

    #[test]
    fn single_splat_closed_form() {
        let med = MediumSample::uniform(0.5, 0.5, 0.5);
        let s = SplatSample {
            alpha: 0.99,
            color: Vector3::repeat(1.0),
            depth: 2.0,
        };
        let px = composite_pixel(&[s], &med, 1.0).unwrap();
        let e = (-1.0f64).exp();
        let expect = 0.99 * e + 0.5 * (1.0 - e) + 0.01 * 0.5 * e;
        for c in 0..3 {
            assert!((px.full[c] - 0.682100).abs() < 1e-6);
            assert!((px.full[c] - expect).abs() < 1e-15);
            assert!((px.clear[c] - 0.99).abs() < 1e-15);
        }
        assert!((px.medium - (px.full - Vector3::repeat(0.99 * e))).abs().max() < 1e-15);
    }

    #[test]
    fn rejects_unsorted_depths() {
        let med = MediumSample::uniform(0.5, 0.5, 0.5);
        let a = SplatSample {
            alpha: 0.5,
            color: Vector3::repeat(1.0),
            depth: 2.0,
        };
        let b = SplatSample { depth: 1.0, ..a };
        assert!(matches!(composite_pixel(&[a, b], &med, 1.0), Err(Error::UnsortedDepths { index: 1, .. })));
    }

    #[test]
    fn zero_medium_scale_leaves_clear_plus_background() {
        let med = MediumSample {
            c_med: Vector3::new(0.3, 0.6, 0.9),
            sigma_attn: Vector3::new(0.4, 1.0, 2.0),
            sigma_bs: Vector3::new(0.8, 0.2, 1.5),
        };
        let samples = [
            SplatSample {
                alpha: 0.4,
                color: Vector3::new(0.9, 0.1, 0.5),
                depth: 1.0,
            },
            SplatSample {
                alpha: 0.3,
                color: Vector3::new(0.2, 0.8, 0.4),
                depth: 2.5,
            },
        ];
        let px = composite_pixel(&samples, &med, 0.0).unwrap();
        let expect = px.clear + med.c_med * px.transmittance;
        assert!((px.full - expect).abs().max() < 1e-15);
    }

    fn random_samples(rng: &mut impl Rng, n: usize) -> Vec<SplatSample> {
        let mut depth = 0.0;
        (0..n)
            .map(|_| {
                depth += rng.random_range(0.0..0.5);
                SplatSample {
                    alpha: rng.random_range(0.0..ALPHA_MAX),
                    color: Vector3::repeat(1.0),
                    depth,
                }
            })
            .collect()
    }

    #[test]
    fn matches_direct_sums_without_early_exit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(0..12);
            let mut samples = random_samples(&mut rng, n);
            for s in &mut samples {
                s.alpha = rng.random_range(ALPHA_MIN..0.5);
                s.color = Vector3::new(rng.random(), rng.random(), rng.random());
            }
            let med = MediumSample {
                c_med: Vector3::new(rng.random(), rng.random(), rng.random()),
                sigma_attn: Vector3::new(rng.random(), rng.random(), rng.random()) * 2.0,
                sigma_bs: Vector3::new(rng.random(), rng.random(), rng.random()) * 2.0,
            };
            let px = composite_pixel(&samples, &med, 1.0).unwrap();
            assert!((px.full - reference_full(&samples, &med)).abs().max() < 1e-13);
        }
    }

    proptest! {
        #[test]
        fn weights_form_partition_of_unity(seed in 0u64..10_000, n in 0usize..=64, sigma in 0.0..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples = random_samples(&mut rng, n);
            let med = MediumSample::uniform(1.0, sigma, sigma);
            let px = composite_pixel(&samples, &med, 1.0).unwrap();
            prop_assert!((px.full - Vector3::repeat(1.0)).abs().max() < 1e-12);
        }

        #[test]
        fn bounded_and_monotone(seed in 0u64..10_000, n in 0usize..=32, sigma in 0.0..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut samples = random_samples(&mut rng, n);
            for s in &mut samples {
                s.color = Vector3::new(rng.random(), rng.random(), rng.random());
            }
            let med = MediumSample { c_med: Vector3::new(rng.random(), rng.random(), rng.random()), ..MediumSample::uniform(0.0, sigma, sigma) };
            let px = composite_pixel(&samples, &med, 1.0).unwrap();
            prop_assert!(px.full.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
            prop_assert!((0.0..=1.0).contains(&px.transmittance));
            let mut t = 1.0;
            for s in &samples {
                let next = t * (1.0 - s.alpha);
                prop_assert!(next <= t);
                t = next;
            }
        }
    }

    fn test_scene(rng: &mut impl Rng, n: usize, opacity_logit: f64) -> GaussianScene {
        let gaussians = (0..n)
            .map(|_| {
                let mut g = Gaussian::new(
                    Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(1.5..3.0)),
                    rng.random_range(0.05..0.2),
                    0.5,
                    Vector3::new(rng.random(), rng.random(), rng.random()),
                    1,
                );
                g.opacity_logit = opacity_logit;
                g
            })
            .collect();
        GaussianScene {
            gaussians,
            medium: MediumNetwork::random(rng, 4, 16),
            scene_extent: 1.0,
        }
    }

    fn test_camera(size: usize) -> Camera {
        Camera::new(
            Matrix3::identity(),
            Vector3::zeros(),
            size as f64,
            size as f64,
            size as f64 / 2.0,
            size as f64 / 2.0,
            size,
            size,
        )
        .unwrap()
    }

    #[test]
    fn transparent_scene_renders_medium_color() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = test_scene(&mut rng, 20, -30.0);
        let cam = test_camera(32);
        let out = render(&scene, &cam, &RenderSettings::default());
        for y in 0..32 {
            for x in 0..32 {
                let c = scene.medium.sample(&cam.pixel_ray(x, y)).c_med;
                for ch in 0..3 {
                    assert!((out.full.get(x, y, ch) - c[ch]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_scale_render_is_clear_plus_transmitted_medium() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = test_scene(&mut rng, 30, 1.0);
        let cam = test_camera(32);
        let out = render(&scene, &cam, &RenderSettings::default().with_medium_scale(0.0));
        for y in 0..32 {
            for x in 0..32 {
                let c = scene.medium.sample(&cam.pixel_ray(x, y)).c_med;
                let t = out.final_transmittance.get(x, y, 0);
                for ch in 0..3 {
                    let expect = out.clear.get(x, y, ch) + t * c[ch];
                    assert!((out.full.get(x, y, ch) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn clear_image_ignores_the_medium() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scene = test_scene(&mut rng, 30, 0.5);
        let mut other = scene.clone();
        other.medium = MediumNetwork::random(&mut rng, 4, 16);
        let cam = test_camera(32);
        let a = render(&scene, &cam, &RenderSettings::default());
        let b = render(&other, &cam, &RenderSettings::default().with_medium_scale(3.0));
        assert_eq!(a.clear, b.clear);
        assert_eq!(a.depth, b.depth);
        assert_ne!(a.full, b.full);
    }

    #[test]
    fn without_medium_full_equals_clear() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scene = test_scene(&mut rng, 30, 0.5);
        let cam = test_camera(32);
        let settings = RenderSettings {
            with_medium: false,
            ..Default::default()
        };
        let out = render(&scene, &cam, &settings);
        assert_eq!(out.full, out.clear);
        assert!(out.medium_only.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn outputs_respect_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scene = test_scene(&mut rng, 60, 2.0);
        let cam = test_camera(48);
        let out = render(
            &scene,
            &cam,
            &RenderSettings {
                normalize_depth: true,
                ..Default::default()
            },
        );
        assert!(out.full.data().iter().all(|&v| v >= 0.0));
        assert!(out.final_transmittance.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.depth.data().iter().all(|&v| v >= 0.0));
        // Normalized depth of covered pixels lies within the scene's depth range.
        for (d, t) in out.depth.data().iter().zip(out.final_transmittance.data()) {
            if *t < 0.5 {
                assert!(*d > 1.0 && *d < 3.5, "depth {d}");
            }
        }
    }

    #[test]
    fn half_resolution_agrees_with_full_resolution() {
        // Large smooth splats: pixel (2i, 2j) of the 2x render samples nearly
        // the same ray as pixel (i, j) of the base render.
        let g = Gaussian::new(Vector3::new(0.05, -0.02, 2.0), 0.4, 0.7, Vector3::new(0.8, 0.4, 0.2), 0);
        let scene = GaussianScene {
            gaussians: vec![g],
            medium: MediumNetwork::zeros(4, 8),
            scene_extent: 1.0,
        };
        let base = test_camera(32);
        let double = base.scaled(2.0).unwrap();
        let a = render(&scene, &base, &RenderSettings::default());
        let b = render(&scene, &double, &RenderSettings::default());
        let mut worst = 0.0f64;
        for y in 0..32 {
            for x in 0..32 {
                worst = worst.max((a.full.get(x, y, 0) - b.full.get(2 * x, 2 * y, 0)).abs());
            }
        }
        assert!(worst < 0.02, "worst {worst}");
    }

    #[test]
    fn render_is_thread_count_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let scene = test_scene(&mut rng, 200, 0.0);
        let cam = test_camera(64);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| render(&scene, &cam, &RenderSettings::default()))
        };
        assert_eq!(run(1), run(3));
    }
}
