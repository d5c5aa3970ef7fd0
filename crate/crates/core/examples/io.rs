//! Writes a synthetic COLMAP model in both layouts, reads it back, then
//! initializes a scene from its points and round-trips a checkpoint.
//!
//! cargo run --release --example io -- [out_dir]

use std::path::PathBuf;

use aquasplat::io::colmap::model_from_views;
use aquasplat::io::{load_checkpoint, read_colmap, save_checkpoint, write_colmap_binary, write_colmap_text, Checkpoint, NamedCamera, PosedView};
use aquasplat::synthetic::{plane_dataset, PlaneConfig};
use aquasplat::trainer::{initialize_scene, scene_extent_from_cameras, InitConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "io_out".into()));
    let data = plane_dataset(&PlaneConfig {
        points: 500,
        ..PlaneConfig::default().at_resolution(160, 120)
    })?;
    let views: Vec<PosedView> = data
        .train
        .iter()
        .map(|v| PosedView {
            name: format!("{}.png", v.name),
            camera: v.camera.clone(),
        })
        .collect();
    let points: Vec<_> = data
        .points
        .iter()
        .zip(&data.colors)
        .map(|(p, c)| (*p, [c.x, c.y, c.z].map(|v| (v * 255.0).round() as u8)))
        .collect();
    let model = model_from_views(&views, &points);

    let (text_dir, bin_dir) = (out.join("sparse_text"), out.join("sparse_bin"));
    std::fs::create_dir_all(&text_dir)?;
    std::fs::create_dir_all(&bin_dir)?;
    write_colmap_text(&text_dir, &model)?;
    write_colmap_binary(&bin_dir, &model)?;
    let from_text = read_colmap(&text_dir)?;
    let from_bin = read_colmap(&bin_dir)?;
    println!(
        "COLMAP: {} cameras, {} images, {} points; text == binary: {}",
        from_bin.cameras.len(),
        from_bin.images.len(),
        from_bin.points.len(),
        from_text == from_bin
    );

    let posed = from_bin.views()?;
    let (pts, colors) = from_bin.point_cloud();
    let extent = scene_extent_from_cameras(posed.iter().map(|v| &v.camera));
    let scene = initialize_scene(&pts, &colors, extent, &InitConfig::default())?;
    let ckpt = Checkpoint {
        scene,
        cameras: posed
            .into_iter()
            .map(|v| NamedCamera {
                name: v.name,
                camera: v.camera,
            })
            .collect(),
    };
    let dir = out.join("checkpoint");
    save_checkpoint(&dir, &ckpt)?;
    let back = load_checkpoint(&dir)?;
    println!(
        "checkpoint: {} gaussians, extent {:.3}, bit-exact reload: {}",
        back.scene.len(),
        back.scene.scene_extent,
        back == ckpt
    );
    Ok(())
}
