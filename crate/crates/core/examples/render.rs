//! Renders one view of a random scene in all four modes.
//!
//! cargo run --release --example render -- [out_dir]

use std::path::PathBuf;

use aquasplat::io::{encode_png, write_png};
use aquasplat::medium::MediumNetwork;
use aquasplat::{render, Camera, Gaussian, GaussianScene, RenderSettings};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "render_out".into()));
    std::fs::create_dir_all(&out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gaussians = (0..400)
        .map(|_| {
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.7..0.7),
                rng.random_range(-0.5..1.5),
            );
            let color = Vector3::new(rng.random(), rng.random(), rng.random());
            Gaussian::new(p, rng.random_range(0.03..0.09), rng.random_range(0.5..0.95), color, 0)
        })
        .collect();
    let scene = GaussianScene::new(gaussians, MediumNetwork::random(&mut rng, 4, 32), 2.0)?;
    let cam = Camera::look_at(
        Vector3::new(0.0, -0.3, -2.5),
        Vector3::new(0.0, 0.0, 0.5),
        Vector3::new(0.0, -1.0, 0.0),
        300.0,
        320,
        240,
    )?;

    for scale in [0.0, 1.0, 3.0] {
        let frame = render(&scene, &cam, &RenderSettings::default().with_medium_scale(scale));
        write_png(&out.join(format!("full_medium_x{scale}.png")), &frame.full)?;
    }
    let settings = RenderSettings {
        normalize_depth: true,
        ..RenderSettings::default()
    };
    let frame = render(&scene, &cam, &settings);
    write_png(&out.join("clear.png"), &frame.clear)?;
    write_png(&out.join("medium.png"), &frame.medium_only)?;
    let far = frame.depth.max_value().max(1e-9);
    std::fs::write(out.join("depth.png"), encode_png(&frame.depth.map(|d| d / far), false)?)?;

    let m = scene.medium.sample(&cam.pixel_ray(160, 120));
    println!("center ray medium: c_med={:.3?} sigma_attn={:.3?} sigma_bs={:.3?}", m.c_med.as_slice(), m.sigma_attn.as_slice(), m.sigma_bs.as_slice());
    println!(
        "mean transmittance left after the splats: {:.3}",
        frame.final_transmittance.mean()
    );
    println!("wrote images to {}", out.display());
    Ok(())
}
