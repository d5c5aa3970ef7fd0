//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use aquasplat::compositor::{composite_pixel, ALPHA_MAX};
use aquasplat::fog::FogPreset;
use aquasplat::gradients::{check_gradients_with, gradient_test_scene, GradCheckOptions};
use aquasplat::io::colmap::{read_colmap_any, ColmapCamera, ColmapImage, ColmapPoint};
use aquasplat::io::images::channel_quantile;
use aquasplat::io::ply::{decode_ply, encode_ply};
use aquasplat::io::sidecar::{decode_sidecar, encode_sidecar};
use aquasplat::io::{load_checkpoint, save_checkpoint, white_balance, write_colmap_binary, write_colmap_text, Checkpoint, ColmapModel};
use aquasplat::losses::{self, LossConfig, SsimConfig};
use aquasplat::medium::{MediumNetwork, MediumSample};
use aquasplat::synthetic::{plane_dataset, PlaneConfig, PlaneDataset};
use aquasplat::trainer::{initialize_scene, scene_extent_from_cameras, InitConfig, TrainConfig, TrainView, Trainer};
use aquasplat::{render, Camera, Gaussian, GaussianScene, ImageBuffer, RenderSettings, SplatSample};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod training;

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn run_criterion(id: &str, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Outcome::new(false, format!("panicked: {msg}"))
    });
    let verdict = if outcome.passed { "PASS" } else { "FAIL" };
    println!(
        "[{verdict}] criterion {id}: {name} ({:.1}s) {}",
        start.elapsed().as_secs_f64(),
        outcome.detail
    );
    outcome.passed
}

fn random_medium(rng: &mut impl Rng) -> MediumSample {
    let v = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| Vector3::from_fn(|_, _| rng.random_range(lo..hi));
    MediumSample {
        c_med: v(rng, 0.0, 1.0),
        sigma_attn: v(rng, 0.01, 3.0),
        sigma_bs: v(rng, 0.01, 3.0),
    }
}

fn sorted_depths(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
    d.sort_by(f64::total_cmp);
    d
}

/// All splats transparent: the medium segments telescope to `c_med`,
/// checked both on the compositing kernel and on rendered pixels.
fn telescoping_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let med = random_medium(&mut rng);
        let n = rng.random_range(0..40);
        let samples: Vec<SplatSample> = sorted_depths(&mut rng, n)
            .into_iter()
            .map(|depth| SplatSample {
                alpha: 0.0,
                color: Vector3::new(rng.random(), rng.random(), rng.random()),
                depth,
            })
            .collect();
        let px = composite_pixel(&samples, &med, 1.0).unwrap();
        worst = worst.max((px.full - med.c_med).abs().max());
    }
    let kernel_time = start.elapsed();

    // 40x25 = 1000 pixels through the renderer with every opacity ≈ 0.
    let gaussians = (0..50)
        .map(|_| {
            let mut g = Gaussian::new(
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..6.0)),
                0.3,
                0.5,
                Vector3::new(rng.random(), rng.random(), rng.random()),
                0,
            );
            g.opacity_logit = -30.0;
            g
        })
        .collect();
    let scene = GaussianScene::new(gaussians, MediumNetwork::random(&mut rng, 4, 32), 1.0).unwrap();
    let cam = Camera::new(nalgebra::Matrix3::identity(), Vector3::zeros(), 30.0, 30.0, 20.0, 12.5, 40, 25).unwrap();
    let out = render(&scene, &cam, &RenderSettings::default());
    for y in 0..25 {
        for x in 0..40 {
            let m = scene.medium.sample(&cam.pixel_ray(x, y));
            for c in 0..3 {
                worst = worst.max((out.full.get(x, y, c) - m.c_med[c]).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst <= 1e-6 && elapsed < Duration::from_secs(1),
        format!(
            "max |full - c_med| = {worst:.2e} (tol 1e-6); kernel {:.0} ms, total {:.0} ms (limit 1 s)",
            kernel_time.as_secs_f64() * 1e3,
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

/// σ_attn = σ_bs and unit colors everywhere: object, medium and infinity
/// weights sum to one.
fn partition_of_unity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=64);
        let sigma = Vector3::from_fn(|_, _| rng.random_range(0.0..3.0));
        let med = MediumSample {
            c_med: Vector3::repeat(1.0),
            sigma_attn: sigma,
            sigma_bs: sigma,
        };
        let samples: Vec<SplatSample> = sorted_depths(&mut rng, n)
            .into_iter()
            .map(|depth| SplatSample {
                alpha: rng.random_range(0.0..ALPHA_MAX),
                color: Vector3::repeat(1.0),
                depth,
            })
            .collect();
        let scale = rng.random_range(0.0..4.0);
        let px = composite_pixel(&samples, &med, scale).unwrap();
        worst = worst.max((px.full - Vector3::repeat(1.0)).abs().max());
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst <= 1e-6 && elapsed < Duration::from_secs(5),
        format!("max |full - 1| = {worst:.2e} (tol 1e-6), {:.0} ms (limit 5 s)", elapsed.as_secs_f64() * 1e3),
    )
}

fn closed_form_pixel() -> Outcome {
    let (alpha, s, sigma, c_med) = (0.99f64, 2.0f64, 0.5f64, 0.5f64);
    let med = MediumSample::uniform(c_med, sigma, sigma);
    let px = composite_pixel(
        &[SplatSample {
            alpha,
            color: Vector3::repeat(1.0),
            depth: s,
        }],
        &med,
        1.0,
    )
    .unwrap();
    // Object, medium in front, medium behind.
    let att = (-sigma * s).exp();
    let oracle = alpha * att + c_med * (1.0 - att) + (1.0 - alpha) * c_med * att;
    let err_stated = (px.full - Vector3::repeat(0.682100)).abs().max();
    let err_oracle = (px.full - Vector3::repeat(oracle)).abs().max();
    Outcome::new(
        err_stated <= 1e-6 && err_oracle <= 1e-12,
        format!(
            "pixel = {:.7} (expected 0.682100 ± 1e-6, oracle {oracle:.7})",
            px.full.x
        ),
    )
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let (scene, cam) = gradient_test_scene(0, 8);
    assert_eq!((cam.width, cam.height, scene.len()), (16, 16, 8));
    let opts = GradCheckOptions {
        tolerance: 1e-5,
        step: 1e-4,
        medium_samples: Some(512),
        ..GradCheckOptions::default()
    };
    let report = check_gradients_with(&scene, &cam, &opts);
    let elapsed = start.elapsed();
    let layers = report.groups.iter().filter(|g| g.name.starts_with("medium.layer")).count();
    let checked: usize = report.groups.iter().map(|g| g.checked).sum();
    let worst_abs = report.groups.iter().map(|g| g.max_abs_error).fold(0.0, f64::max);
    Outcome::new(
        report.passed && layers == 6 && elapsed < Duration::from_secs(60),
        format!(
            "{} groups ({layers} medium tensors), {checked} entries, max rel err {:.2e} (tol 1e-5), max abs err {worst_abs:.2e}, {:.1} s (limit 60 s)",
            report.groups.len(),
            report.max_relative_error(),
            elapsed.as_secs_f64()
        ),
    )
}

fn central_difference(p: &ImageBuffer, i: usize, h: f64, f: &dyn Fn(&ImageBuffer) -> f64) -> f64 {
    let mut plus = p.clone();
    plus.data_mut()[i] += h;
    let mut minus = p.clone();
    minus.data_mut()[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Independent loss values with the weight map frozen at `w`.
fn frozen_loss(p: &ImageBuffer, t: &ImageBuffer, w: &ImageBuffer, cfg: &LossConfig) -> f64 {
    use aquasplat::losses::{FrameLoss, PixelLoss};
    let n = p.len() as f64;
    let weighted = |x: &ImageBuffer| x.zip_map(w, |a, b| a * b).unwrap();
    let pix = p.data().iter().zip(t.data()).zip(w.data());
    let pixel = match cfg.pixel {
        PixelLoss::L1 => pix.map(|((a, b), _)| (a - b).abs()).sum::<f64>() / n,
        PixelLoss::L2 => pix.map(|((a, b), _)| (a - b).powi(2)).sum::<f64>() / n,
        PixelLoss::RegL1 => pix.map(|((a, b), w)| (w * (a - b)).abs()).sum::<f64>() / n,
        PixelLoss::RegL2 => pix.map(|((a, b), w)| (w * (a - b)).powi(2)).sum::<f64>() / n,
    };
    let frame = match cfg.frame {
        FrameLoss::Dssim => (1.0 - losses::ssim(p, t, &cfg.ssim).unwrap()) / 2.0,
        FrameLoss::RegDssim => (1.0 - losses::ssim(&weighted(p), &weighted(t), &cfg.ssim).unwrap()) / 2.0,
    };
    (1.0 - cfg.lambda) * pixel + cfg.lambda * frame
}

fn loss_suite() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let p = ImageBuffer::filled(1, 1, 1, 0.1);
    let t = ImageBuffer::filled(1, 1, 1, 0.2);
    let reg = losses::reg_l2(&p, &t, 1e-3).unwrap().value;
    let reg_oracle = (0.1f64 / 0.101).powi(2);
    let reg_ok = (reg - reg_oracle).abs() <= 1e-9 && (reg - 0.980296).abs() < 5e-7;
    ok &= reg_ok;
    notes.push(format!("reg_l2 {reg:.9} (oracle {reg_oracle:.9}, expected 0.980296)"));

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let img = ImageBuffer::from_fn(24, 20, 3, |_, _, _| rng.random());
    let same = losses::ssim(&img, &img, &SsimConfig::default()).unwrap();
    ok &= same == 1.0;
    notes.push(format!("ssim(a,a) = {same}"));

    let cfg = SsimConfig::default();
    let a = ImageBuffer::filled(16, 16, 1, 0.5);
    let b = ImageBuffer::filled(16, 16, 1, 0.25);
    let constant = losses::ssim(&a, &b, &cfg).unwrap();
    // Constant images: zero variances, so only the luminance term remains.
    let c1 = (0.01f64 * 1.0).powi(2);
    let oracle = (2.0 * 0.5 * 0.25 + c1) / (0.5f64.powi(2) + 0.25f64.powi(2) + c1);
    ok &= (constant - oracle).abs() <= 1e-6;
    notes.push(format!(
        "constant ssim {constant:.6} (closed form {oracle:.6})"
    ));

    let p = ImageBuffer::from_fn(13, 12, 3, |_, _, _| rng.random_range(0.05..1.0));
    let t = ImageBuffer::from_fn(13, 12, 3, |_, _, _| rng.random_range(0.05..1.0));
    let mut worst = 0.0f64;
    for cfg in LossConfig::presets() {
        let w = losses::weight_map(&p, cfg.epsilon);
        let analytic = losses::combined_loss(&p, &t, &cfg).unwrap().grad;
        let value = losses::combined_loss(&p, &t, &cfg).unwrap().value;
        ok &= (value - frozen_loss(&p, &t, &w, &cfg)).abs() <= 1e-12;
        for i in 0..p.len() {
            let n = central_difference(&p, i, 1e-5, &|q| frozen_loss(q, &t, &w, &cfg));
            worst = worst.max(aquasplat::gradients::relative_error(analytic.data()[i], n, 1e-10));
        }
    }
    ok &= worst <= 1e-6;
    notes.push(format!("8 presets, worst gradient rel err {worst:.2e} (tol 1e-6)"));
    Outcome::new(ok, notes.join("; "))
}

fn colmap_fixture(rng: &mut impl Rng) -> ColmapModel {
    let mut model = ColmapModel::default();
    model.cameras.insert(
        3,
        ColmapCamera {
            id: 3,
            model: "PINHOLE".into(),
            width: 1400,
            height: 900,
            params: vec![1111.0 / 3.0, 1000.0 + 1e-9, 700.25, 449.5 + 1.0 / 7.0],
        },
    );
    model.cameras.insert(
        4,
        ColmapCamera {
            id: 4,
            model: "SIMPLE_PINHOLE".into(),
            width: 64,
            height: 48,
            params: vec![0.1 + 0.2, 32.0, 24.000001],
        },
    );
    for id in 1..=5u32 {
        let q = UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random());
        model.images.insert(
            id,
            ColmapImage {
                id,
                qvec: [q.w, q.i, q.j, q.k],
                tvec: [rng.random::<f64>() - 0.5, rng.random::<f64>() * 1e5, -rng.random::<f64>() * 1e-12],
                camera_id: 3 + id % 2,
                name: format!("frame_{id:04}.png"),
                points2d: (0..id as usize * 3)
                    .map(|k| (rng.random::<f64>() * 1400.0, rng.random::<f64>() * 900.0, if k % 4 == 0 { -1 } else { k as i64 }))
                    .collect(),
            },
        );
    }
    model.images.get_mut(&2).unwrap().points2d.clear();
    model.points = (0..25)
        .map(|i| ColmapPoint {
            id: 1 + i * 13,
            xyz: [rng.random::<f64>() * 10.0 - 5.0, rng.random(), 1.0 / (i as f64 + 3.0)],
            rgb: [rng.random(), rng.random(), rng.random()],
            error: rng.random::<f64>() * 2.0,
            track: (0..(i % 4) as u32).map(|k| (1 + k, k * 2)).collect(),
        })
        .collect();
    model
}

fn io_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let tmp = tempfile::tempdir().unwrap();
    let model = colmap_fixture(&mut rng);
    let (text_dir, bin_dir) = (tmp.path().join("text"), tmp.path().join("bin"));
    std::fs::create_dir_all(&text_dir).unwrap();
    std::fs::create_dir_all(&bin_dir).unwrap();
    write_colmap_text(&text_dir, &model).unwrap();
    write_colmap_binary(&bin_dir, &model).unwrap();
    let text_ok = read_colmap_any(&text_dir).unwrap() == model;
    let bin_ok = read_colmap_any(&bin_dir).unwrap() == model;

    let gaussians: Vec<Gaussian> = (0..200)
        .map(|_| {
            let mut g = Gaussian::new(
                Vector3::new(rng.random(), rng.random(), rng.random()),
                rng.random_range(0.01..0.2),
                rng.random_range(0.01..0.99),
                Vector3::new(rng.random(), rng.random(), rng.random()),
                3,
            );
            g.rotation = nalgebra::Quaternion::new(rng.random(), rng.random(), rng.random(), rng.random());
            for c in g.sh.iter_mut() {
                *c = Vector3::new(rng.random(), rng.random(), rng.random()) * 0.3;
            }
            g
        })
        .collect();
    let mut scene = GaussianScene::new(gaussians, MediumNetwork::random(&mut rng, 4, 128), 3.7).unwrap();
    scene.quantize_to_f32();
    let ply = encode_ply(&scene.gaussians).unwrap();
    let ply_back = decode_ply(&ply, Path::new("mem.ply")).unwrap();
    let ply_ok = ply_back == scene.gaussians && encode_ply(&ply_back).unwrap() == ply;
    let side = encode_sidecar(&scene.medium, scene.scene_extent);
    let (net, extent) = decode_sidecar(&side, Path::new("mem.bin")).unwrap();
    let side_ok = net == scene.medium && extent == scene.scene_extent;
    let ckpt_dir = tmp.path().join("ckpt");
    let ckpt = Checkpoint {
        scene: scene.clone(),
        cameras: Vec::new(),
    };
    save_checkpoint(&ckpt_dir, &ckpt).unwrap();
    let ckpt_ok = load_checkpoint(&ckpt_dir).unwrap() == ckpt;

    // Sort-based oracle: divide by the order statistic at ceil((1-clip)·n)-1.
    let clip = 0.005;
    let mut wb_ok = true;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
        let img = ImageBuffer::from_fn(w, h, 3, |_, _, _| rng.random_range(0.001..1.0));
        let out = white_balance(&img, clip).unwrap();
        for c in 0..3 {
            let mut v: Vec<f64> = img.channel(c).into_vec();
            v.sort_by(f64::total_cmp);
            let k = (((1.0 - clip) * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
            let q = v[k];
            wb_ok &= channel_quantile(&img, c, 1.0 - clip) == q;
            for y in 0..h {
                for x in 0..w {
                    wb_ok &= out.get(x, y, c) == (img.get(x, y, c) / q).clamp(0.0, 1.0);
                }
            }
        }
    }
    let ok = text_ok && bin_ok && ply_ok && side_ok && ckpt_ok && wb_ok;
    Outcome::new(
        ok,
        format!(
            "colmap text {text_ok} binary {bin_ok}; ply {ply_ok}; sidecar {side_ok}; checkpoint {ckpt_ok}; white balance vs sort oracle on 1000 images {wb_ok}"
        ),
    )
}

fn checkpoint_bytes(threads: usize, data: &PlaneDataset, seed: u64) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let views: Vec<TrainView> = data
            .train
            .iter()
            .map(|v| TrainView::new(&v.name, v.camera.clone(), v.fogged(&FogPreset::Easy.params()).unwrap()).unwrap())
            .collect();
        let extent = scene_extent_from_cameras(data.cameras());
        let init = InitConfig {
            opacity: 0.9,
            seed,
            ..InitConfig::default()
        };
        let scene = initialize_scene(&data.points, &data.colors, extent, &init).unwrap();
        let config = TrainConfig {
            iterations: 30,
            densify_from: 10,
            densify_interval: 10,
            prune_interval: 10,
            opacity_reset_interval: 20,
            prune_opacity: 0.05,
            seed,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(scene, config).unwrap();
        trainer.run(&views, |_, _| Ok(())).unwrap();
        let scene = trainer.into_scene();
        let mut bytes = encode_ply(&scene.gaussians).unwrap();
        bytes.extend(encode_sidecar(&scene.medium, scene.scene_extent));
        bytes
    })
}

fn determinism_and_speed() -> Outcome {
    let data = plane_dataset(&PlaneConfig {
        points: 600,
        ..PlaneConfig::default().at_resolution(64, 48)
    })
    .unwrap();
    let reference = checkpoint_bytes(1, &data, 5);
    let same: Vec<bool> = [2, 3, 8].iter().map(|&t| checkpoint_bytes(t, &data, 5) == reference).collect();
    let other_seed_differs = checkpoint_bytes(1, &data, 6) != reference;
    let deterministic = same.iter().all(|&s| s) && other_seed_differs;

    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let gaussians = (0..10_000)
        .map(|_| {
            Gaussian::new(
                Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(2.0..6.0)),
                rng.random_range(0.01..0.05),
                rng.random_range(0.2..0.9),
                Vector3::new(rng.random(), rng.random(), rng.random()),
                3,
            )
        })
        .collect();
    let scene = GaussianScene::new(gaussians, MediumNetwork::random(&mut rng, 4, 128), 4.0).unwrap();
    let cam = Camera::new(nalgebra::Matrix3::identity(), Vector3::zeros(), 500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
    let settings = RenderSettings::default();
    render(&scene, &cam, &settings);
    let runs = 3;
    let start = Instant::now();
    for _ in 0..runs {
        std::hint::black_box(render(&scene, &cam, &settings));
    }
    let ms = start.elapsed().as_secs_f64() * 1e3 / runs as f64;
    Outcome::new(
        deterministic,
        format!(
            "checkpoints at 2/3/8 threads identical to 1 thread: {same:?}, other seed differs: {other_seed_differs}; \
             perf (soft target < 250 ms on 8 threads): 10k gaussians 640x480 in {ms:.0} ms on {} thread(s)",
            rayon::current_num_threads()
        ),
    )
}

fn main() {
    let quick = std::env::var_os("AQUASPLAT_ACCEPTANCE_SKIP_TRAINING").is_some();
    let mut results = vec![
        run_criterion("1", "telescoping medium identity", telescoping_identity),
        run_criterion("2", "partition of unity", partition_of_unity),
        run_criterion("3", "closed-form single-splat pixel", closed_form_pixel),
        run_criterion("4", "gradient oracle", gradient_oracle),
        run_criterion("5", "loss suite", loss_suite),
    ];
    if quick {
        println!("[SKIP] criteria 6-8: AQUASPLAT_ACCEPTANCE_SKIP_TRAINING is set");
    } else {
        results.push(run_criterion("6", "fog benchmark round trip", training::fog_round_trip));
        results.push(run_criterion("7", "medium ablation", training::medium_ablation));
        results.push(run_criterion("8", "loss ablation on low light", training::loss_ablation));
    }
    results.push(run_criterion("9", "I/O round trips", io_round_trips));
    results.push(run_criterion("10", "determinism and render speed", determinism_and_speed));
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
