//! HTTP render service: pose in, PNG out.
//!
//! The scene lives behind a swappable snapshot. Each request clones the
//! current `Arc` once and renders against it, so a hot swap never shows
//! a half-loaded scene. Renders run on the blocking pool behind a
//! semaphore, which leaves `/health` responsive while frames are queued.

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use aquasplat::camera::{nearest_rotation, orthonormality_error, Camera};
use aquasplat::io::encode_png;
use aquasplat::{render, GaussianScene, ImageBuffer, RenderSettings};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub const DEFAULT_PORT: u16 = 8080;
pub const PORT_ENV: &str = "AQUASPLAT_PORT";
pub const DEFAULT_MAX_PIXELS: usize = 4096 * 4096;

/// JSON schema of the `GET /scene` response.
pub const SCENE_SCHEMA: &str = include_str!("scene.schema.json");

pub const POSE_ORTHONORMAL_TOLERANCE: f64 = 1e-3;

pub const MODES: [&str; 4] = ["full", "clear", "medium", "depth"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    Full,
    Clear,
    Medium,
    Depth,
}

fn default_medium_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    /// Row-major 4x4 world-to-camera matrix.
    pub pose: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub mode: RenderMode,
    #[serde(default = "default_medium_scale")]
    pub medium_scale: f64,
}

impl RenderRequest {
    pub fn from_camera(cam: &Camera, mode: RenderMode) -> Self {
        Self {
            pose: cam.pose_matrix(),
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            mode,
            medium_scale: 1.0,
        }
    }

    /// Builds the camera, snapping a rotation within
    /// [`POSE_ORTHONORMAL_TOLERANCE`] onto the nearest proper rotation.
    pub fn camera(&self) -> aquasplat::Result<Camera> {
        let m = Matrix4::from_row_slice(&self.pose);
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let err = orthonormality_error(&r);
        if err > POSE_ORTHONORMAL_TOLERANCE || r.determinant() <= 0.0 {
            return Err(aquasplat::Error::InvalidInput(format!(
                "pose rotation is not orthonormal (|RᵀR - I| = {err:e})"
            )));
        }
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Camera::new(nearest_rotation(&r), t, self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefaultCamera {
    pub pose: [f64; 16],
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetadata {
    pub gaussian_count: usize,
    pub scene_extent: f64,
    pub default_camera: DefaultCamera,
    pub modes: Vec<String>,
}

/// An immutable scene plus the camera advertised to clients.
pub struct Snapshot {
    pub scene: GaussianScene,
    pub default_camera: Camera,
}

impl Snapshot {
    pub fn new(scene: GaussianScene, default_camera: Option<Camera>) -> Self {
        let default_camera = default_camera.unwrap_or_else(|| framing_camera(&scene));
        Self { scene, default_camera }
    }

    pub fn metadata(&self) -> SceneMetadata {
        let c = &self.default_camera;
        SceneMetadata {
            gaussian_count: self.scene.len(),
            scene_extent: self.scene.scene_extent,
            default_camera: DefaultCamera {
                pose: c.pose_matrix(),
                intrinsics: Intrinsics {
                    fx: c.fx,
                    fy: c.fy,
                    cx: c.cx,
                    cy: c.cy,
                },
                width: c.width,
                height: c.height,
            },
            modes: MODES.iter().map(|m| m.to_string()).collect(),
        }
    }
}

/// Looks at the Gaussian centroid from two extents down the -z axis.
fn framing_camera(scene: &GaussianScene) -> Camera {
    let n = scene.len().max(1) as f64;
    let center = scene
        .gaussians
        .iter()
        .fold(Vector3::zeros(), |acc, g| acc + g.position)
        / n;
    let extent = if scene.scene_extent > 0.0 { scene.scene_extent } else { 1.0 };
    let eye = center - Vector3::new(0.0, 0.0, 2.0 * extent);
    Camera::look_at(eye, center, Vector3::new(0.0, -1.0, 0.0), 640.0, 640, 480)
        .expect("framing camera is well formed")
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Largest accepted `width * height`.
    pub max_pixels: usize,
    /// Renders allowed to run at once; further requests wait.
    pub render_workers: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_pixels: DEFAULT_MAX_PIXELS,
            render_workers: 2,
        }
    }
}

/// Shared service state. Cloning is cheap and shares the snapshot slot.
#[derive(Clone)]
pub struct AppState {
    snapshot: Arc<RwLock<Option<Arc<Snapshot>>>>,
    permits: Arc<Semaphore>,
    config: Arc<ServerConfig>,
}

impl AppState {
    pub fn new(config: ServerConfig) -> Self {
        Self {
            snapshot: Arc::new(RwLock::new(None)),
            permits: Arc::new(Semaphore::new(config.render_workers.max(1))),
            config: Arc::new(config),
        }
    }

    pub fn with_scene(config: ServerConfig, snapshot: Snapshot) -> Self {
        let state = Self::new(config);
        state.swap(snapshot);
        state
    }

    /// Replaces the served scene. In-flight renders keep the old one.
    pub fn swap(&self, snapshot: Snapshot) {
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(snapshot));
    }

    pub fn current(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/scene", get(scene_metadata))
        .route("/render", post(render_frame))
        .with_state(state)
}

/// Binds `addr` and serves until the task is dropped.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

/// `AQUASPLAT_PORT` wins over the flag; the flag wins over the default.
pub fn resolve_port(flag: Option<u16>) -> Result<u16, String> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("{PORT_ENV}={v:?} is not a valid port")),
        Err(_) => Ok(flag.unwrap_or(DEFAULT_PORT)),
    }
}

async fn health() -> &'static str {
    "ok"
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

fn no_scene() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "no scene loaded")
}

async fn scene_metadata(State(state): State<AppState>) -> Response {
    match state.current() {
        Some(s) => Json(s.metadata()).into_response(),
        None => no_scene(),
    }
}

/// A rendered frame ready to send.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub png: Vec<u8>,
    /// Scene-space depth range of the normalized inverse-depth image.
    pub depth_range: Option<(f64, f64)>,
}

/// Errors a render request can be refused with.
#[derive(Debug, PartialEq)]
pub enum RequestError {
    Malformed(String),
    TooLarge { pixels: usize, max: usize },
}

pub fn parse_request(body: &[u8], max_pixels: usize) -> Result<(RenderRequest, Camera), RequestError> {
    let req: RenderRequest = serde_json::from_slice(body).map_err(|e| RequestError::Malformed(e.to_string()))?;
    let pixels = req.width.saturating_mul(req.height);
    if pixels > max_pixels {
        return Err(RequestError::TooLarge { pixels, max: max_pixels });
    }
    if !req.medium_scale.is_finite() || req.medium_scale < 0.0 {
        return Err(RequestError::Malformed(format!(
            "medium_scale must be finite and non-negative, got {}",
            req.medium_scale
        )));
    }
    let last_row = &req.pose[12..];
    if last_row != [0.0, 0.0, 0.0, 1.0] {
        return Err(RequestError::Malformed(format!(
            "pose last row must be 0 0 0 1, got {last_row:?}"
        )));
    }
    let cam = req.camera().map_err(|e| RequestError::Malformed(e.to_string()))?;
    Ok((req, cam))
}

/// Renders one frame against `scene`. Deterministic for fixed inputs.
pub fn render_request(scene: &GaussianScene, req: &RenderRequest, cam: &Camera) -> aquasplat::Result<Frame> {
    let settings = RenderSettings {
        normalize_depth: req.mode == RenderMode::Depth,
        ..RenderSettings::default().with_medium_scale(req.medium_scale)
    };
    let out = render(scene, cam, &settings);
    let srgb = |img: &ImageBuffer| encode_png(img, true);
    Ok(match req.mode {
        RenderMode::Full => Frame { png: srgb(&out.full)?, depth_range: None },
        RenderMode::Clear => Frame { png: srgb(&out.clear)?, depth_range: None },
        RenderMode::Medium => Frame { png: srgb(&out.medium_only)?, depth_range: None },
        RenderMode::Depth => {
            let (img, range) = inverse_depth_image(&out.depth);
            Frame { png: encode_png(&img, false)?, depth_range: range }
        }
    })
}

/// Maps positive depths to `(1/d - 1/max) / (1/min - 1/max)`, so near is
/// white; empty pixels are black. Returns the depth range used.
pub fn inverse_depth_image(depth: &ImageBuffer) -> (ImageBuffer, Option<(f64, f64)>) {
    let valid = |d: f64| d > 0.0 && d.is_finite();
    let (lo, hi) = depth
        .data()
        .iter()
        .filter(|d| valid(**d))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if lo > hi {
        return (ImageBuffer::new(depth.width(), depth.height(), 1), None);
    }
    let (inv_near, inv_far) = (1.0 / lo, 1.0 / hi);
    let span = inv_near - inv_far;
    let img = depth.map(|d| {
        if !valid(d) {
            0.0
        } else if span > 0.0 {
            (1.0 / d - inv_far) / span
        } else {
            1.0
        }
    });
    (img, Some((lo, hi)))
}

async fn render_frame(State(state): State<AppState>, body: Bytes) -> Response {
    let Some(snapshot) = state.current() else {
        return no_scene();
    };
    let (req, cam) = match parse_request(&body, state.config.max_pixels) {
        Ok(v) => v,
        Err(RequestError::Malformed(msg)) => return error(StatusCode::BAD_REQUEST, msg),
        Err(RequestError::TooLarge { pixels, max }) => {
            return error(
                StatusCode::PAYLOAD_TOO_LARGE,
                format!("{pixels} pixels requested, at most {max} allowed"),
            )
        }
    };
    let Ok(_permit) = state.permits.clone().acquire_owned().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "render pool closed");
    };
    let job = tokio::task::spawn_blocking(move || render_request(&snapshot.scene, &req, &cam));
    match job.await {
        Ok(Ok(frame)) => frame_response(frame),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("render task failed: {e}")),
    }
}

fn frame_response(frame: Frame) -> Response {
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    if let Some((lo, hi)) = frame.depth_range {
        let value = |v: f64| HeaderValue::from_str(&format!("{v:?}")).expect("float header");
        headers.insert("x-depth-min", value(lo));
        headers.insert("x-depth-max", value(hi));
    }
    (StatusCode::OK, headers, frame.png).into_response()
}
