//! Scores a scene against its own renders and against perturbed images.
//!
//! cargo run --release --example metrics

use aquasplat::metrics::{evaluate, psnr, ssim_metric};
use aquasplat::synthetic::{plane_dataset, PlaneConfig};
use aquasplat::trainer::{initialize_scene, scene_extent_from_cameras, InitConfig};
use aquasplat::{render, RenderSettings};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = plane_dataset(&PlaneConfig {
        points: 3000,
        ..PlaneConfig::default().at_resolution(120, 90)
    })?;
    let extent = scene_extent_from_cameras(data.cameras());
    let scene = initialize_scene(&data.points, &data.colors, extent, &InitConfig { opacity: 0.9, ..InitConfig::default() })?;

    let cams: Vec<_> = data.test.iter().map(|v| v.camera.clone()).collect();
    let clear: Vec<_> = data.test.iter().map(|v| v.clear.clone()).collect();
    let report = evaluate(&scene, &cams, &clear, None)?;
    println!("untrained point-cloud scene vs clear test views:");
    for v in &report.per_view {
        println!("  view {}: psnr {:.2} dB, ssim {:.4}", v.view, v.full.psnr, v.full.ssim);
    }
    println!("  mean psnr {:.2} dB, mean ssim {:.4}", report.mean.psnr, report.mean.ssim);

    let own = render(&scene, &cams[0], &RenderSettings::default()).full.map(|v| v.clamp(0.0, 1.0));
    let noisy = own.map(|v| (v + 0.01).min(1.0));
    println!(
        "self vs self: {:.1} dB; self vs +0.01 offset: {:.2} dB, ssim {:.4}",
        psnr(&own, &own)?,
        psnr(&own, &noisy)?,
        ssim_metric(&own, &noisy)?
    );
    println!("{}", serde_json::to_string_pretty(&report.mean)?);
    Ok(())
}
