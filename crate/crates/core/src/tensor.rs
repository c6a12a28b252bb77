//! Small-tensor kinematics helpers and the Voigt ordering used throughout.
//!
//! Voigt order is `[11, 22, 33, 12, 23, 13]` with no factor of 2 on the
//! off-diagonal entries, for strains and stresses alike.

use nalgebra::Matrix3;

use crate::error::{Error, Result};

/// `(row, col)` index pairs in Voigt order.
pub const VOIGT_PAIRS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2)];

/// Multiplier turning `d(psi)/d(c_k)` (with `c` the 6 raw Voigt components of
/// a symmetric `C`) into the stress component `S_k = 2 (d psi / d C)_k`:
/// 2 for diagonal entries, 1 for off-diagonal ones.
pub const STRESS_FROM_GRAD: [f64; 6] = [2.0, 2.0, 2.0, 1.0, 1.0, 1.0];

/// Symmetric 3x3 tensor -> Voigt 6-vector.
pub fn to_voigt(m: &Matrix3<f64>) -> [f64; 6] {
    let mut v = [0.0; 6];
    for (k, &(i, j)) in VOIGT_PAIRS.iter().enumerate() {
        v[k] = m[(i, j)];
    }
    v
}

/// Voigt 6-vector -> symmetric 3x3 tensor.
pub fn from_voigt(v: &[f64; 6]) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for (k, &(i, j)) in VOIGT_PAIRS.iter().enumerate() {
        m[(i, j)] = v[k];
        m[(j, i)] = v[k];
    }
    m
}

/// Right Cauchy-Green tensor `C = F^T F`.
pub fn right_cauchy_green(f: &Matrix3<f64>) -> Matrix3<f64> {
    f.transpose() * f
}

/// Green-Lagrange strain `E = (C - I) / 2`.
pub fn green_lagrange_from_c(c: &Matrix3<f64>) -> Matrix3<f64> {
    (c - Matrix3::identity()) * 0.5
}

/// Errors unless `m` is symmetric to within `tol` (max abs entry defect).
pub fn check_symmetric(m: &Matrix3<f64>, tol: f64, what: &str) -> Result<()> {
    let d = (m - m.transpose()).abs().max();
    if d > tol {
        return Err(Error::config(format!("{what} is not symmetric (defect {d:.3e})")));
    }
    Ok(())
}

/// Full contraction `A : B = sum_ij A_ij B_ij` of two symmetric tensors given
/// as Voigt vectors of raw components: diagonal once, off-diagonal twice.
pub fn sym_contract_voigt(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    let mut s = 0.0;
    for k in 0..3 {
        s += a[k] * b[k];
    }
    for k in 3..6 {
        s += 2.0 * a[k] * b[k];
    }
    s
}
