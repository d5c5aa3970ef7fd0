//! Checkpoint directories: `scene.ply`, `medium.bin` and `cameras.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::io::{ply, sidecar};
use crate::scene::GaussianScene;

pub const SCENE_FILE: &str = "scene.ply";
pub const MEDIUM_FILE: &str = "medium.bin";
pub const CAMERAS_FILE: &str = "cameras.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedCamera {
    pub name: String,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub scene: GaussianScene,
    pub cameras: Vec<NamedCamera>,
}

/// Accepts either the checkpoint directory or the `scene.ply` inside it.
fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "ply") {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

/// Writes the Gaussians and the medium network. Parameters are stored as
/// `f32`; a scene already on the `f32` grid reloads bit for bit.
pub fn save_scene(dir: &Path, scene: &GaussianScene) -> Result<()> {
    scene.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    ply::write_ply(&dir.join(SCENE_FILE), &scene.gaussians)?;
    sidecar::write_sidecar(&dir.join(MEDIUM_FILE), &scene.medium, scene.scene_extent)
}

pub fn load_scene(path: &Path) -> Result<GaussianScene> {
    let dir = checkpoint_dir(path);
    let gaussians = ply::read_ply(&dir.join(SCENE_FILE))?;
    let (medium, extent) = sidecar::read_sidecar(&dir.join(MEDIUM_FILE))?;
    GaussianScene::new(gaussians, medium, extent)
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    save_scene(dir, &ckpt.scene)?;
    let path = dir.join(CAMERAS_FILE);
    let json = serde_json::to_string_pretty(&ckpt.cameras).expect("cameras serialize");
    std::fs::write(&path, json).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; a missing `cameras.json` yields an empty camera list.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let dir = checkpoint_dir(path);
    let scene = load_scene(&dir)?;
    let cams_path = dir.join(CAMERAS_FILE);
    let cameras = if cams_path.exists() {
        let text = std::fs::read_to_string(&cams_path).map_err(|e| Error::io(&cams_path, e))?;
        let cameras: Vec<NamedCamera> =
            serde_json::from_str(&text).map_err(|e| Error::format(&cams_path, e.to_string()))?;
        for c in &cameras {
            c.camera.validate()?;
        }
        cameras
    } else {
        Vec::new()
    };
    Ok(Checkpoint { scene, cameras })
}
