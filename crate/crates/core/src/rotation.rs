//! Crystal orientations: Bunge Z-X-Z Euler angles, rotation matrices, and
//! orientation sampling utilities.
//!
//! Conventions fixed here and relied on everywhere else:
//! - Euler triple `(phi1, cap_phi, phi2)` in radians with principal ranges
//!   `phi1 in [0, 2pi)`, `cap_phi in [0, pi]`, `phi2 in [0, 2pi)`.
//! - Rotation matrix `R = Rz(phi1) * Rx(cap_phi) * Rz(phi2)`, proper
//!   orthogonal (`det R = +1`).
//! - Material directions are rotated columns: `a_i = R * e_i`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Bunge Z-X-Z Euler angles in radians, kept within principal ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    pub phi1: f64,
    pub cap_phi: f64,
    pub phi2: f64,
}

impl Orientation {
    /// Builds an orientation, wrapping the first and third angles into
    /// `[0, 2pi)`. Errors if `cap_phi` lies outside `[0, pi]` or any angle
    /// is non-finite.
    pub fn new(phi1: f64, cap_phi: f64, phi2: f64) -> Result<Self> {
        if !(phi1.is_finite() && cap_phi.is_finite() && phi2.is_finite()) {
            return Err(Error::config("orientation angles must be finite"));
        }
        if !(0.0..=std::f64::consts::PI + 1e-12).contains(&cap_phi) {
            return Err(Error::config(format!(
                "cap_phi {cap_phi} outside [0, pi]"
            )));
        }
        Ok(Orientation {
            phi1: wrap_tau(phi1),
            cap_phi: cap_phi.min(std::f64::consts::PI),
            phi2: wrap_tau(phi2),
        })
    }

    pub fn identity() -> Self {
        Orientation { phi1: 0.0, cap_phi: 0.0, phi2: 0.0 }
    }

    /// Rotation matrix `Rz(phi1) * Rx(cap_phi) * Rz(phi2)`.
    pub fn matrix(&self) -> Matrix3<f64> {
        rot_z(self.phi1) * rot_x(self.cap_phi) * rot_z(self.phi2)
    }

    /// Extracts Euler angles from a proper rotation matrix.
    ///
    /// The matrix must be orthogonal with determinant +1 to within `1e-12`.
    /// At the gimbal configurations (`cap_phi` near 0 or pi) the split
    /// between `phi1` and `phi2` is not unique; `phi2 = 0` is returned.
    pub fn from_matrix(r: &Matrix3<f64>) -> Result<Self> {
        check_rotation(r)?;
        let c = r[(2, 2)].clamp(-1.0, 1.0);
        let cap_phi = c.acos();
        let s = cap_phi.sin();
        if s.abs() < 1e-9 {
            // R degenerates to a rotation about z (times Rx(0) or Rx(pi)).
            let phi1 = r[(1, 0)].atan2(r[(0, 0)]);
            return Orientation::new(phi1, cap_phi, 0.0);
        }
        let phi1 = r[(0, 2)].atan2(-r[(1, 2)]);
        let phi2 = r[(2, 0)].atan2(r[(2, 1)]);
        Orientation::new(phi1, cap_phi, phi2)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.phi1, self.cap_phi, self.phi2]
    }
}

fn wrap_tau(a: f64) -> f64 {
    let mut x = a % TAU;
    if x < 0.0 {
        x += TAU;
    }
    // The modulo can land exactly on TAU for tiny negative inputs.
    if x >= TAU {
        x -= TAU;
    }
    x
}

pub fn rot_x(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_z(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Errors unless `R` is orthogonal with determinant +1 to within `1e-12`.
pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let orth = (r.transpose() * r - Matrix3::identity()).norm();
    let det = r.determinant();
    if orth > 1e-12 * 10.0 || (det - 1.0).abs() > 1e-10 {
        return Err(Error::config(format!(
            "matrix is not a proper rotation (orthogonality defect {orth:.3e}, det {det})"
        )));
    }
    Ok(())
}

/// Draws a rotation uniformly from SO(3) (normalized 4-Gaussian quaternion).
pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = [
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n < 1e-6 {
            continue;
        }
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        return quaternion_matrix(w, x, y, z);
    }
}

/// Rotation about a uniformly random axis by the given angle.
pub fn random_axis_rotation<R: Rng>(rng: &mut R, angle: f64) -> Matrix3<f64> {
    let axis = loop {
        let v = Vector3::new(
            standard_normal(rng),
            standard_normal(rng),
            standard_normal(rng),
        );
        let n = v.norm();
        if n > 1e-6 {
            break v / n;
        }
    };
    axis_angle_matrix(&axis, angle)
}

pub fn axis_angle_matrix(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    let k = Matrix3::new(
        0.0, -axis.z, axis.y, axis.z, 0.0, -axis.x, -axis.y, axis.x, 0.0,
    );
    Matrix3::identity() + k * s + k * k * (1.0 - c)
}

fn quaternion_matrix(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
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

/// Box-Muller standard normal draw; two uniforms per call keeps the
/// consumption pattern fixed, which matters for reproducibility.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Misorientation angle in radians between two rotations.
pub fn misorientation(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a.transpose() * b;
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}
