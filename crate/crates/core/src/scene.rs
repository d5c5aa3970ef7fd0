//! The optimizable scene: anisotropic Gaussians plus the medium network.

use nalgebra::{Matrix3, Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::medium::MediumNetwork;
use crate::sh;

/// Offset added to the SH dot product so a zero coefficient set is mid-gray.
pub const COLOR_OFFSET: f64 = 0.5;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One 3D Gaussian primitive in its unconstrained optimization form.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Stored unnormalized; every consumer normalizes on read.
    pub rotation: Quaternion<f64>,
    pub opacity_logit: f64,
    /// One rgb triple per basis function, `(degree + 1)^2` entries.
    pub sh: Vec<Vector3<f64>>,
}

impl Gaussian {
    /// Isotropic, unrotated Gaussian with a flat color.
    pub fn new(position: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>, sh_degree: usize) -> Self {
        let mut sh = vec![Vector3::zeros(); sh::num_coeffs(sh_degree)];
        sh[0] = color.map(|c| (c - COLOR_OFFSET) / sh::SH_C0);
        Self {
            position,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: Quaternion::identity(),
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn sh_degree(&self) -> usize {
        sh::degree_for_count(self.sh.len()).expect("coefficient count is a square")
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn unit_rotation(&self) -> Quaternion<f64> {
        self.rotation.normalize()
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_from_quaternion(&self.unit_rotation())
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_of(self)
    }
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn rotation_from_quaternion(q: &Quaternion<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R(q) · diag(exp(2·log_scale)) · R(q)ᵀ`.
pub fn covariance_of(g: &Gaussian) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let m = r * Matrix3::from_diagonal(&g.scale());
    m * m.transpose()
}

/// View-dependent color: `max(0, 0.5 + Σ_k Y_k(dir) · coeff_k)` per channel.
pub fn sh_color(g: &Gaussian, view_dir: &Vector3<f64>) -> Vector3<f64> {
    sh_color_degree(g, view_dir, g.sh_degree())
}

/// [`sh_color`] restricted to coefficients of degree `≤ degree`.
pub fn sh_color_degree(g: &Gaussian, view_dir: &Vector3<f64>, degree: usize) -> Vector3<f64> {
    let degree = degree.min(g.sh_degree());
    let mut basis = [0.0; 16];
    sh::eval_basis(degree, view_dir, &mut basis);
    let mut c = Vector3::repeat(COLOR_OFFSET);
    for (b, coeff) in basis.iter().zip(&g.sh).take(sh::num_coeffs(degree)) {
        c += coeff * *b;
    }
    c.map(|v| v.max(0.0))
}

/// Gaussians, medium network and the scene radius used by trainer thresholds.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub medium: MediumNetwork,
    pub scene_extent: f64,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian>, medium: MediumNetwork, scene_extent: f64) -> Result<Self> {
        let scene = Self {
            gaussians,
            medium,
            scene_extent,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scene_extent > 0.0) || !self.scene_extent.is_finite() {
            return Err(Error::InvalidInput(format!(
                "scene extent must be positive, got {}",
                self.scene_extent
            )));
        }
        if let Some(first) = self.gaussians.first() {
            let n = first.sh.len();
            if sh::degree_for_count(n).is_none_or(|d| d > sh::MAX_COLOR_DEGREE) {
                return Err(Error::InvalidInput(format!("unsupported SH coefficient count {n}")));
            }
            if let Some(i) = self.gaussians.iter().position(|g| g.sh.len() != n) {
                return Err(Error::InvalidInput(format!(
                    "gaussian {i} has {} SH coefficients, expected {n}",
                    self.gaussians[i].sh.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// SH degree of the stored coefficients (0 for an empty scene).
    pub fn sh_degree(&self) -> usize {
        self.gaussians.first().map_or(0, Gaussian::sh_degree)
    }

    /// Rounds every parameter to the nearest `f32`, the precision used by the
    /// on-disk formats. Training keeps parameters on this grid.
    pub fn quantize_to_f32(&mut self) {
        fn q(v: &mut f64) {
            *v = *v as f32 as f64;
        }
        for g in &mut self.gaussians {
            g.position.iter_mut().for_each(q);
            g.log_scale.iter_mut().for_each(q);
            g.rotation.coords.iter_mut().for_each(q);
            q(&mut g.opacity_logit);
            g.sh.iter_mut().for_each(|c| c.iter_mut().for_each(q));
        }
        self.medium.quantize_to_f32();
    }
}
