//! Real spherical-harmonic bases.
//!
//! Two variants live here. [`eval_basis`]/[`eval_basis_grad`] use the
//! hard-coded degree ≤ 3 polynomials (and sign convention) of the common
//! splatting color model, so coefficients stay compatible with exported
//! scenes. [`encode_direction`] evaluates an orthonormal real basis of any
//! degree through the associated-Legendre recurrence and is used as the
//! medium network's direction encoding.

use nalgebra::Vector3;

pub const SH_C0: f64 = 0.28209479177387814;
pub const SH_C1: f64 = 0.4886025119029199;
pub const SH_C2: [f64; 5] = [
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
];
pub const SH_C3: [f64; 7] = [
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
];

/// Highest degree supported by the color basis.
pub const MAX_COLOR_DEGREE: usize = 3;

pub const fn num_coeffs(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree whose coefficient count is `count`, if any.
pub fn degree_for_count(count: usize) -> Option<usize> {
    (0..=8).find(|&d| num_coeffs(d) == count)
}

/// Evaluates the color basis up to `degree` at unit direction `d`.
/// Writes `num_coeffs(degree)` values into `out`.
pub fn eval_basis(degree: usize, d: &Vector3<f64>, out: &mut [f64]) {
    assert!(degree <= MAX_COLOR_DEGREE);
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = SH_C0;
    if degree == 0 {
        return;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = SH_C2[0] * x * y;
    out[5] = SH_C2[1] * y * z;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * x * z;
    out[8] = SH_C2[4] * (xx - yy);
    if degree == 2 {
        return;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * x * y * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
}

/// Partial derivatives of each basis polynomial with respect to the
/// (unconstrained) components of `d`.
pub fn eval_basis_grad(degree: usize, d: &Vector3<f64>, out: &mut [Vector3<f64>]) {
    assert!(degree <= MAX_COLOR_DEGREE);
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = Vector3::zeros();
    if degree == 0 {
        return;
    }
    out[1] = Vector3::new(0.0, -SH_C1, 0.0);
    out[2] = Vector3::new(0.0, 0.0, SH_C1);
    out[3] = Vector3::new(-SH_C1, 0.0, 0.0);
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = SH_C2[0] * Vector3::new(y, x, 0.0);
    out[5] = SH_C2[1] * Vector3::new(0.0, z, y);
    out[6] = SH_C2[2] * Vector3::new(-2.0 * x, -2.0 * y, 4.0 * z);
    out[7] = SH_C2[3] * Vector3::new(z, 0.0, x);
    out[8] = SH_C2[4] * Vector3::new(2.0 * x, -2.0 * y, 0.0);
    if degree == 2 {
        return;
    }
    out[9] = SH_C3[0] * Vector3::new(6.0 * x * y, 3.0 * xx - 3.0 * yy, 0.0);
    out[10] = SH_C3[1] * Vector3::new(y * z, x * z, x * y);
    out[11] = SH_C3[2] * Vector3::new(-2.0 * x * y, 4.0 * zz - xx - 3.0 * yy, 8.0 * y * z);
    out[12] = SH_C3[3] * Vector3::new(-6.0 * x * z, -6.0 * y * z, 6.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * Vector3::new(4.0 * zz - 3.0 * xx - yy, -2.0 * x * y, 8.0 * x * z);
    out[14] = SH_C3[5] * Vector3::new(2.0 * x * z, -2.0 * y * z, xx - yy);
    out[15] = SH_C3[6] * Vector3::new(3.0 * xx - 3.0 * yy, -6.0 * x * y, 0.0);
}

/// Orthonormal real spherical harmonics of every degree `0..=degree` at unit
/// direction `d`, ordered by degree then order `m = -l..=l`.
pub fn encode_direction(degree: usize, d: &Vector3<f64>, out: &mut [f64]) {
    let n = num_coeffs(degree);
    assert!(out.len() >= n);
    let (x, y, z) = (d.x, d.y, d.z);

    // (x + iy)^m carries the sin^m(theta) factor and the azimuth.
    let mut re = vec![1.0; degree + 1];
    let mut im = vec![0.0; degree + 1];
    for m in 1..=degree {
        re[m] = re[m - 1] * x - im[m - 1] * y;
        im[m] = re[m - 1] * y + im[m - 1] * x;
    }

    let four_pi = 4.0 * std::f64::consts::PI;
    for m in 0..=degree {
        // Legendre polynomial without the (1 - z^2)^{m/2} factor.
        let mut p_mm = 1.0;
        for k in 0..m {
            p_mm *= -((2 * k + 1) as f64);
        }
        let mut p_prev = 0.0;
        let mut p_cur = p_mm;
        for l in m..=degree {
            if l == m + 1 {
                p_prev = p_cur;
                p_cur = z * (2 * m + 1) as f64 * p_mm;
            } else if l > m + 1 {
                let next = ((2 * l - 1) as f64 * z * p_cur - (l + m - 1) as f64 * p_prev) / (l - m) as f64;
                p_prev = p_cur;
                p_cur = next;
            }
            // K = sqrt((2l+1)/(4pi) * (l-m)!/(l+m)!)
            let mut ratio = 1.0;
            for k in (l - m + 1)..=(l + m) {
                ratio /= k as f64;
            }
            let k_lm = ((2 * l + 1) as f64 / four_pi * ratio).sqrt();
            let base = l * l + l;
            if m == 0 {
                out[base] = k_lm * p_cur;
            } else {
                let s = std::f64::consts::SQRT_2 * k_lm * p_cur;
                out[base + m] = s * re[m];
                out[base - m] = s * im[m];
            }
        }
    }
}
