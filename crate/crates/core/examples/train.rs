//! Fits a scene with a medium to the fogged plane benchmark, then scores
//! the foggy render and the restored (medium-free) render on held-out views.
//!
//! cargo run --release --example train -- [iterations] [width]

use aquasplat::fog::FogPreset;
use aquasplat::metrics::psnr;
use aquasplat::synthetic::{plane_dataset, PlaneConfig};
use aquasplat::trainer::{initialize_scene, scene_extent_from_cameras, InitConfig, TrainConfig, TrainView, Trainer};
use aquasplat::render;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(Ok(300), |s| s.parse())?;
    let width: usize = args.next().map_or(Ok(160), |s| s.parse())?;

    let data = plane_dataset(&PlaneConfig::default().at_resolution(width, width * 3 / 4))?;
    let fog = FogPreset::Easy.params();
    let to_views = |views: &[aquasplat::synthetic::PlaneView]| -> aquasplat::Result<Vec<TrainView>> {
        views
            .iter()
            .map(|v| TrainView::new(&v.name, v.camera.clone(), v.fogged(&fog)?))
            .collect()
    };
    let train = to_views(&data.train)?;
    let test = to_views(&data.test)?;

    let extent = scene_extent_from_cameras(data.cameras());
    let init = InitConfig {
        opacity: 0.9,
        ..InitConfig::default()
    };
    let scene = initialize_scene(&data.points, &data.colors, extent, &init)?;
    let mut config = TrainConfig {
        iterations,
        ..TrainConfig::default()
    };
    // A lower opacity rate keeps the surface opaque, which the restored
    // render depends on.
    config.lr.opacity = 5e-3;
    let mut trainer = Trainer::new(scene, config)?;
    println!("{} gaussians, extent {extent:.3}", trainer.scene().len());

    trainer.run(&train, |t, report| {
        if report.step % 50 == 0 || report.step == iterations {
            println!("{}", t.log_line(report, test.first())?);
        }
        Ok(())
    })?;

    let settings = trainer.render_settings();
    for (view, truth) in test.iter().zip(&data.test) {
        let out = render(trainer.scene(), &view.camera, &settings);
        let full = out.full.map(|v| v.clamp(0.0, 1.0));
        let clear = out.clear.map(|v| v.clamp(0.0, 1.0));
        println!(
            "{}: full {:.2} dB, restored {:.2} dB",
            view.name,
            psnr(&full, &view.image)?,
            psnr(&clear, &truth.clear)?
        );
    }
    let m = trainer.scene().medium.sample(&nalgebra::Vector3::z());
    println!(
        "medium along +z: c_med {:.3?} sigma_attn {:.3?} (true {:?})",
        m.c_med.as_slice(),
        m.sigma_attn.as_slice(),
        fog.beta_d
    );
    Ok(())
}
