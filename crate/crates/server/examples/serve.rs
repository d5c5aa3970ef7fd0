//! Serves a checkpoint, or an initialized plane scene when none is given.
//!
//! cargo run --release -p aquasplat-server --example serve -- [checkpoint_dir]
//!
//! Then, for example:
//!   curl localhost:8080/scene
//!   curl -o frame.png -d @request.json localhost:8080/render

use std::net::SocketAddr;

use aquasplat::io::load_checkpoint;
use aquasplat::synthetic::{plane_dataset, PlaneConfig};
use aquasplat::trainer::{initialize_scene, scene_extent_from_cameras, InitConfig};
use aquasplat_server::{resolve_port, serve, AppState, RenderMode, RenderRequest, ServerConfig, Snapshot};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let snapshot = match std::env::args().nth(1) {
        Some(dir) => {
            let ckpt = load_checkpoint(dir.as_ref())?;
            let cam = ckpt.cameras.first().map(|c| c.camera.clone());
            Snapshot::new(ckpt.scene, cam)
        }
        None => {
            let data = plane_dataset(&PlaneConfig {
                points: 4000,
                ..PlaneConfig::default()
            })?;
            let extent = scene_extent_from_cameras(data.cameras());
            let init = InitConfig { opacity: 0.9, ..InitConfig::default() };
            let scene = initialize_scene(&data.points, &data.colors, extent, &init)?;
            Snapshot::new(scene, Some(data.test[0].camera.clone()))
        }
    };
    let example = RenderRequest::from_camera(&snapshot.default_camera, RenderMode::Clear);
    println!("example request body:\n{}", serde_json::to_string(&example)?);

    let port = resolve_port(None)?;
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    println!("serving {} gaussians on http://{addr}", snapshot.scene.len());
    serve(addr, AppState::with_scene(ServerConfig::default(), snapshot)).await?;
    Ok(())
}
