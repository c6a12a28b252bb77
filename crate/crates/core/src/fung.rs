//! Fung-type orthotropic hyperelasticity.
//!
//! Stored energy per unit reference volume, in MPa:
//!
//! `psi = (c/2) (exp(Q) - 1)`
//!
//! `Q = (1/c) sum_a [ 2 mu_a A_a : E^2 + sum_b lambda_ab (A_a : E)(A_b : E) ]`
//!
//! with structural tensors `A_a = a_a (x) a_a`, `a_a = R e_a`, and `E` the
//! Green-Lagrange strain. The second Piola-Kirchhoff stress follows as
//!
//! `S = 2 d(psi)/dC = (c/2) exp(Q) dQ/dE`,
//! `dQ/dE = (1/c) sum_a [ 2 mu_a (A_a E + E A_a)
//!                        + 2 sum_b lambda_ab (A_b : E) A_a ]`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::Orientation;
use crate::tensor::check_symmetric;

/// Material constants; stress-like values in MPa.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FungConstants {
    pub c: f64,
    pub lambda: [[f64; 3]; 3],
    pub mu: [f64; 3],
}

impl Default for FungConstants {
    fn default() -> Self {
        FungConstants {
            c: 2.0,
            lambda: [[0.6, 0.7, 0.6], [0.7, 1.4, 0.7], [0.6, 0.7, 0.5]],
            mu: [0.1, 0.7, 0.5],
        }
    }
}

impl FungConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::config(format!("fung c must be positive, got {}", self.c)));
        }
        for a in 0..3 {
            if !self.mu[a].is_finite() {
                return Err(Error::config("fung mu must be finite"));
            }
            for b in 0..3 {
                let l = self.lambda[a][b];
                if !l.is_finite() {
                    return Err(Error::config("fung lambda must be finite"));
                }
                if (l - self.lambda[b][a]).abs() > 1e-12 {
                    return Err(Error::config(format!(
                        "fung lambda must be symmetric, entries ({a},{b}) and ({b},{a}) differ"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Rotated orthotropy directions `a_a = R e_a`.
pub fn material_axes(o: &Orientation) -> [Vector3<f64>; 3] {
    let r = o.matrix();
    [r.column(0).into(), r.column(1).into(), r.column(2).into()]
}

/// Structural tensors `A_a = a_a (x) a_a`.
pub fn structural_tensors(o: &Orientation) -> [Matrix3<f64>; 3] {
    let ax = material_axes(o);
    [
        ax[0] * ax[0].transpose(),
        ax[1] * ax[1].transpose(),
        ax[2] * ax[2].transpose(),
    ]
}

/// Energy and stress for a grain whose axes are precomputed.
///
/// `E` must be symmetric (checked to 1e-9). Returns `(psi, S)`.
pub fn energy_stress_with_axes(
    consts: &FungConstants,
    e: &Matrix3<f64>,
    axes: &[Vector3<f64>; 3],
) -> Result<(f64, Matrix3<f64>)> {
    check_symmetric(e, 1e-9, "Green-Lagrange strain")?;
    let mut q = 0.0;
    let mut dq = Matrix3::zeros();
    // Per-axis invariants: ea_a = E a_a, proj_a = a_a . E a_a = A_a : E,
    // and A_a : E^2 = |E a_a|^2.
    let ea: [Vector3<f64>; 3] = [e * axes[0], e * axes[1], e * axes[2]];
    let proj: [f64; 3] = [
        axes[0].dot(&ea[0]),
        axes[1].dot(&ea[1]),
        axes[2].dot(&ea[2]),
    ];
    for a in 0..3 {
        q += 2.0 * consts.mu[a] * ea[a].norm_squared();
        let mut lam_proj = 0.0;
        for b in 0..3 {
            q += consts.lambda[a][b] * proj[a] * proj[b];
            lam_proj += consts.lambda[a][b] * proj[b];
        }
        // 2 mu_a (A_a E + E A_a) = 2 mu_a (a (x) Ea + Ea (x) a)
        let sym = axes[a] * ea[a].transpose() + ea[a] * axes[a].transpose();
        dq += sym * (2.0 * consts.mu[a]);
        dq += axes[a] * axes[a].transpose() * (2.0 * lam_proj);
    }
    q /= consts.c;
    dq /= consts.c;
    let expq = q.exp();
    if !expq.is_finite() {
        return Err(Error::numeric(format!("fung energy overflow at Q = {q}")));
    }
    let psi = 0.5 * consts.c * (expq - 1.0);
    let s = dq * (0.5 * consts.c * expq);
    Ok((psi, s))
}

/// Stored energy `psi(E)` in MPa.
pub fn fung_energy(consts: &FungConstants, e: &Matrix3<f64>, o: &Orientation) -> Result<f64> {
    Ok(energy_stress_with_axes(consts, e, &material_axes(o))?.0)
}

/// Second Piola-Kirchhoff stress `S(E)` in MPa.
pub fn fung_stress(
    consts: &FungConstants,
    e: &Matrix3<f64>,
    o: &Orientation,
) -> Result<Matrix3<f64>> {
    Ok(energy_stress_with_axes(consts, e, &material_axes(o))?.1)
}

/// Energy and stress together (single evaluation of the shared invariants).
pub fn fung_energy_stress(
    consts: &FungConstants,
    e: &Matrix3<f64>,
    o: &Orientation,
) -> Result<(f64, Matrix3<f64>)> {
    energy_stress_with_axes(consts, e, &material_axes(o))
}
