use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR = I` accepted by [`Camera::new`].
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

/// Pinhole camera in the OpenCV convention (x right, y down, z forward).
///
/// `rotation` and `translation` map world points into camera space:
/// `p_cam = rotation * p_world + translation`. Pixel `(i, j)` is sampled at
/// its center `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear upwards in the image. The principal point is the image
    /// center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("look_at target equals eye".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("look_at up is parallel to view".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            rotation,
            translation,
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    /// Builds a camera from a row-major 4x4 world-to-camera matrix.
    pub fn from_pose_matrix(
        pose: &[f64; 16],
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let m = Matrix4::from_row_slice(pose);
        let rotation: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(rotation, translation, fx, fy, cx, cy, width, height)
    }

    /// Row-major 4x4 world-to-camera matrix.
    pub fn pose_matrix(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out[15] = 1.0;
        out
    }

    pub fn validate(&self) -> Result<()> {
        let err = orthonormality_error(&self.rotation);
        if err > ORTHONORMAL_TOLERANCE || self.rotation.determinant() < 0.0 {
            return Err(Error::InvalidInput(format!(
                "camera rotation is not a proper rotation (|RᵀR - I| = {err:e})"
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera resolution must be at least 1x1".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::InvalidInput("camera has non-finite parameters".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unit world-space direction of the ray through image point `p`
    /// (continuous pixel coordinates).
    pub fn ray_direction(&self, p: Vector2<f64>) -> Vector3<f64> {
        let d = Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }

    /// Ray direction through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        self.ray_direction(Vector2::new(x as f64 + 0.5, y as f64 + 0.5))
    }

    /// Same pose with intrinsics and resolution multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let width = (self.width as f64 * factor).round() as usize;
        let height = (self.height as f64 * factor).round() as usize;
        Self::new(
            self.rotation,
            self.translation,
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            width,
            height,
        )
    }
}

/// Largest absolute entry of `RᵀR - I`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Nearest rotation to `m` in the Frobenius sense (polar decomposition).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}
