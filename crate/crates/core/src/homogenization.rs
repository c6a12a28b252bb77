//! Homogenized response of a polycrystal under a prescribed mean deformation
//! gradient: stored energy density and volume-averaged second
//! Piola-Kirchhoff stress.
//!
//! Two schemes:
//! - Taylor: every grain sees the mean deformation; averages are
//!   volume-fraction weighted sums. Upper bound on the stored energy.
//! - FFT: fixed-point solution of the Lippmann-Schwinger equation
//!   `F = F_bar - Gamma0 * (P(F) - C0 : F)` on the voxel grid, with an
//!   isotropic reference stiffness `C0` (Lame parameters from the arithmetic
//!   means of the Fung constants, times `ref_stiffness_scale`) and the Green
//!   operator zeroed at the mean frequency. Convergence is measured by the
//!   spectral divergence of `P` normalized by the mean `|P|`.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fung::{energy_stress_with_axes, material_axes, FungConstants};
use crate::io::{fmt_g17, parse_f64};
use crate::microstructure::Polycrystal;
use crate::tensor::{green_lagrange_from_c, to_voigt};

// ---------------------------------------------------------------------------
// Deformation sampling
// ---------------------------------------------------------------------------

/// RNG for one `(master seed, rve, sample)` triple; samples are independent
/// of generation order and of how work is split across threads.
pub fn sample_rng(master_seed: u64, rve_id: u32, sample_idx: u32) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..12].copy_from_slice(&rve_id.to_le_bytes());
    key[12..16].copy_from_slice(&sample_idx.to_le_bytes());
    key[16..24].copy_from_slice(b"defsampl");
    let mut rng = ChaCha12Rng::from_seed(key);
    // Burn one block so nearby keys decorrelate fully.
    rng.next_u64();
    rng
}

/// Draws `F = I + U` with every component of `U` uniform in `[0, scale]`,
/// redrawing in the (theoretically impossible for scale <= 0.1) event of a
/// non-positive determinant.
pub fn sample_deformation<R: Rng>(rng: &mut R, scale: f64) -> Matrix3<f64> {
    loop {
        let mut f = Matrix3::identity();
        for i in 0..3 {
            for j in 0..3 {
                f[(i, j)] += rng.gen_range(0.0..scale);
            }
        }
        if f.determinant() > 0.0 {
            return f;
        }
    }
}

// ---------------------------------------------------------------------------
// Taylor homogenization
// ---------------------------------------------------------------------------

/// Uniform-deformation (Taylor) homogenization: `(psi_bar, S_bar)`.
pub fn taylor_homogenize(
    poly: &Polycrystal,
    consts: &FungConstants,
    f_bar: &Matrix3<f64>,
) -> Result<(f64, Matrix3<f64>)> {
    consts.validate()?;
    let volumes = poly.volume_fractions()?;
    let e = strain_from_f(f_bar);
    let mut psi = 0.0;
    let mut s = Matrix3::zeros();
    for (g, o) in poly.orientations.iter().enumerate() {
        let axes = material_axes(o);
        let (pg, sg) = energy_stress_with_axes(consts, &e, &axes)?;
        psi += volumes[g] * pg;
        s += sg * volumes[g];
    }
    Ok((psi, s))
}

fn strain_from_f(f: &Matrix3<f64>) -> Matrix3<f64> {
    let c = f.transpose() * f;
    // Kill matmul round-off asymmetry so downstream symmetry checks are exact.
    let c = (c + c.transpose()) * 0.5;
    green_lagrange_from_c(&c)
}

// ---------------------------------------------------------------------------
// FFT homogenization
// ---------------------------------------------------------------------------

/// Settings of the spectral fixed-point solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FftConfig {
    /// Convergence tolerance on the normalized equilibrium residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Multiplier on the reference Lame parameters. The fixed-point scheme
    /// contracts only while every material tangent eigenvalue stays below
    /// twice the reference acoustic stiffness; plain arithmetic-mean Lame
    /// values sit right at that edge for the default Fung constants, so the
    /// default doubles them.
    pub ref_stiffness_scale: f64,
}

impl Default for FftConfig {
    fn default() -> Self {
        FftConfig { tol: 1e-8, max_iter: 500, ref_stiffness_scale: 2.0 }
    }
}

/// Converged state of the spectral solver.
#[derive(Debug, Clone, Copy)]
pub struct FftResult {
    pub psi: f64,
    pub s: Matrix3<f64>,
    /// Stress evaluations performed (1 for a homogeneous field).
    pub iterations: usize,
    pub residual: f64,
}

/// Reference Lame parameters: arithmetic means of the Fung moduli.
pub fn reference_lame(consts: &FungConstants, scale: f64) -> (f64, f64) {
    let lambda: f64 =
        consts.lambda.iter().flatten().sum::<f64>() / 9.0 * scale;
    let mu: f64 = consts.mu.iter().sum::<f64>() / 3.0 * scale;
    (lambda, mu)
}

/// Solves the Lippmann-Schwinger fixed point on the voxel grid and returns
/// volume-averaged energy and stress.
pub fn fft_homogenize(
    poly: &Polycrystal,
    consts: &FungConstants,
    f_bar: &Matrix3<f64>,
    cfg: &FftConfig,
) -> Result<FftResult> {
    poly.validate()?;
    consts.validate()?;
    poly.volume_fractions()?;
    if f_bar.determinant() <= 0.0 {
        return Err(Error::config("mean deformation gradient must have det > 0"));
    }
    let (lambda0, mu0) = reference_lame(consts, cfg.ref_stiffness_scale);
    if mu0 <= 0.0 || lambda0 + 2.0 * mu0 <= 0.0 {
        return Err(Error::config(format!(
            "reference medium not positive definite (lambda0 {lambda0}, mu0 {mu0})"
        )));
    }
    let gamma_factor = (lambda0 + mu0) / (lambda0 + 2.0 * mu0);
    let axes: Vec<_> = poly.orientations.iter().map(material_axes).collect();
    let n = poly.n_voxels();
    let plans = Fft3::new(poly.dims);
    let freqs = signed_frequencies(poly.dims);

    // Tensor fields as 9 complex component grids, component index 3*i + j.
    let mut f_field: Vec<Vec<Complex64>> = (0..9)
        .map(|c| vec![Complex64::new(f_bar[(c / 3, c % 3)], 0.0); n])
        .collect();
    let mut p_field: Vec<Vec<Complex64>> = vec![vec![Complex64::default(); n]; 9];
    let mut tau_field: Vec<Vec<Complex64>> = vec![vec![Complex64::default(); n]; 9];

    let mut residual = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        // Local constitutive evaluation.
        let mut psi_sum = 0.0;
        let mut s_sum = Matrix3::zeros();
        for v in 0..n {
            let mut f = Matrix3::zeros();
            for c in 0..9 {
                f[(c / 3, c % 3)] = f_field[c][v].re;
            }
            if f.determinant() <= 0.0 {
                return Err(Error::numeric(format!(
                    "deformation field lost invertibility at voxel {v} (iteration {it})"
                )));
            }
            let e = strain_from_f(&f);
            let g = poly.labels[v] as usize;
            let (psi_v, s_v) = energy_stress_with_axes(consts, &e, &axes[g])?;
            psi_sum += psi_v;
            s_sum += s_v;
            let p = f * s_v;
            let c0f = c0_apply(lambda0, mu0, &f);
            for c in 0..9 {
                let (i, j) = (c / 3, c % 3);
                p_field[c][v] = Complex64::new(p[(i, j)], 0.0);
                tau_field[c][v] = Complex64::new(p[(i, j)] - c0f[(i, j)], 0.0);
            }
        }

        for c in 0..9 {
            plans.forward(&mut p_field[c]);
            plans.forward(&mut tau_field[c]);
        }

        // Equilibrium residual: spectral divergence of P over the mean |P|.
        let mut num = 0.0;
        for (v, nhat) in freqs.iter().enumerate() {
            let Some(nhat) = nhat else { continue };
            for i in 0..3 {
                let mut div = Complex64::default();
                for j in 0..3 {
                    div += p_field[3 * i + j][v] * nhat[j];
                }
                num += div.norm_sqr();
            }
        }
        let mut den = 0.0;
        for c in 0..9 {
            den += p_field[c][0].norm_sqr();
        }
        residual = (num / den.max(1e-300)).sqrt();
        if std::env::var_os("POLYGRAIN_FFT_TRACE").is_some() {
            eprintln!("fft iter {it}: residual {residual:.6e}");
        }
        if !residual.is_finite() {
            return Err(Error::numeric(format!(
                "spectral residual became non-finite at iteration {it}"
            )));
        }
        if residual < cfg.tol {
            return Ok(FftResult {
                psi: psi_sum / n as f64,
                s: s_sum / n as f64,
                iterations: it,
                residual,
            });
        }

        // F <- F_bar - Gamma0 * tau, assembled in Fourier space. Slots the
        // Green operator leaves alone carry no fluctuation; the zero-frequency
        // slot carries the prescribed mean (scaled by N for the inverse pass).
        for (v, nhat) in freqs.iter().enumerate() {
            match nhat {
                None => {
                    for c in 0..9 {
                        let mean = if v == 0 { f_bar[(c / 3, c % 3)] * n as f64 } else { 0.0 };
                        f_field[c][v] = Complex64::new(mean, 0.0);
                    }
                }
                Some(nhat) => {
                    let mut t = [Complex64::default(); 3];
                    for (k, tk) in t.iter_mut().enumerate() {
                        for l in 0..3 {
                            *tk += tau_field[3 * k + l][v] * nhat[l];
                        }
                    }
                    let ndott = nhat
                        .iter()
                        .zip(&t)
                        .map(|(nh, tk)| tk * *nh)
                        .sum::<Complex64>();
                    for i in 0..3 {
                        let vi = (t[i] - ndott * (gamma_factor * nhat[i])) / mu0;
                        for j in 0..3 {
                            f_field[3 * i + j][v] = -vi * nhat[j];
                        }
                    }
                }
            }
        }
        for c in 0..9 {
            plans.inverse_scaled(&mut f_field[c]);
        }
    }
    Err(Error::numeric(format!(
        "spectral solver did not converge in {} iterations (residual {residual:.3e}, tol {:.3e})",
        cfg.max_iter, cfg.tol
    )))
}

/// Isotropic reference stiffness applied to a full (non-symmetric) gradient:
/// `C0 : F = lambda0 tr(F) I + mu0 (F + F^T)`.
fn c0_apply(lambda0: f64, mu0: f64, f: &Matrix3<f64>) -> Matrix3<f64> {
    Matrix3::identity() * (lambda0 * f.trace()) + (f + f.transpose()) * mu0
}

/// Unit frequency direction per voxel of the spectral grid; `None` marks
/// modes the fluctuation update must leave alone (zero frequency, and modes
/// whose every nonzero index sits on a Nyquist plane).
///
/// On an even grid the Nyquist index n/2 is its own conjugate partner, so a
/// signed wave vector keeping that component would break the Hermitian
/// symmetry of the updated field (the slot for -xi would not carry -n(xi)).
/// The spectral derivative of real data therefore treats the Nyquist
/// component as zero, the usual convention for odd-order derivatives.
fn signed_frequencies(dims: [usize; 3]) -> Vec<Option<Vector3<f64>>> {
    let [nx, ny, nz] = dims;
    let signed = |k: usize, n: usize| -> f64 {
        if n % 2 == 0 && k == n / 2 {
            0.0
        } else if k <= n / 2 {
            k as f64
        } else {
            k as f64 - n as f64
        }
    };
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = Vector3::new(
                    signed(x, nx),
                    signed(y, ny),
                    signed(z, nz),
                );
                let nrm = v.norm();
                out.push(if nrm == 0.0 { None } else { Some(v / nrm) });
            }
        }
    }
    out
}

/// 3D FFT built from 1D passes along each axis (x-fastest layout).
struct Fft3 {
    dims: [usize; 3],
    fwd: [Arc<dyn Fft<f64>>; 3],
    inv: [Arc<dyn Fft<f64>>; 3],
}

impl Fft3 {
    fn new(dims: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = [
            planner.plan_fft_forward(dims[0]),
            planner.plan_fft_forward(dims[1]),
            planner.plan_fft_forward(dims[2]),
        ];
        let inv = [
            planner.plan_fft_inverse(dims[0]),
            planner.plan_fft_inverse(dims[1]),
            planner.plan_fft_inverse(dims[2]),
        ];
        Fft3 { dims, fwd, inv }
    }

    fn forward(&self, data: &mut [Complex64]) {
        self.pass(data, true);
    }

    fn inverse_scaled(&self, data: &mut [Complex64]) {
        self.pass(data, false);
        let scale = 1.0 / (self.dims[0] * self.dims[1] * self.dims[2]) as f64;
        for v in data.iter_mut() {
            *v *= scale;
        }
    }

    fn pass(&self, data: &mut [Complex64], forward: bool) {
        let [nx, ny, nz] = self.dims;
        let plan = |axis: usize| -> &Arc<dyn Fft<f64>> {
            if forward {
                &self.fwd[axis]
            } else {
                &self.inv[axis]
            }
        };
        // x: contiguous rows.
        for row in data.chunks_exact_mut(nx) {
            plan(0).process(row);
        }
        // y: stride nx within each z-slab.
        let mut scratch = vec![Complex64::default(); ny.max(nz)];
        for z in 0..nz {
            for x in 0..nx {
                let base = x + nx * ny * z;
                for y in 0..ny {
                    scratch[y] = data[base + nx * y];
                }
                plan(1).process(&mut scratch[..ny]);
                for y in 0..ny {
                    data[base + nx * y] = scratch[y];
                }
            }
        }
        // z: stride nx*ny.
        for y in 0..ny {
            for x in 0..nx {
                let base = x + nx * y;
                for z in 0..nz {
                    scratch[z] = data[base + nx * ny * z];
                }
                plan(2).process(&mut scratch[..nz]);
                for z in 0..nz {
                    data[base + nx * ny * z] = scratch[z];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset construction and CSV format
// ---------------------------------------------------------------------------

/// Homogenization scheme used to label samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Homogenizer {
    Taylor,
    Fft(FftConfig),
}

/// Labels one mean deformation: `(psi_bar, S_bar)`.
pub fn label_sample(
    poly: &Polycrystal,
    consts: &FungConstants,
    f_bar: &Matrix3<f64>,
    homog: &Homogenizer,
) -> Result<(f64, Matrix3<f64>)> {
    match homog {
        Homogenizer::Taylor => taylor_homogenize(poly, consts, f_bar),
        Homogenizer::Fft(cfg) => {
            let r = fft_homogenize(poly, consts, f_bar, cfg)?;
            Ok((r.psi, r.s))
        }
    }
}

/// One labeled deformation state in Voigt order [11, 22, 33, 12, 23, 13].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledSample {
    pub c: [f64; 6],
    pub psi: f64,
    pub s: [f64; 6],
}

/// All samples of one RVE.
#[derive(Debug, Clone, PartialEq)]
pub struct RveSamples {
    pub rve_id: u32,
    pub samples: Vec<LabeledSample>,
}

/// Labeled dataset grouped by RVE, ordered by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub rves: Vec<RveSamples>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.rves.iter().map(|r| r.samples.len()).sum()
    }
}

/// Sampling settings for dataset construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub strain_scale: f64,
    pub master_seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { n_samples: 200, strain_scale: 0.1, master_seed: 0 }
    }
}

/// Builds the labeled dataset for a family of polycrystals. With
/// `threads > 1` samples are labeled in parallel; ordering and values are
/// independent of the thread count because each sample derives its own RNG.
pub fn build_dataset(
    polys: &[(u32, Polycrystal)],
    consts: &FungConstants,
    homog: &Homogenizer,
    sampling: &SamplingConfig,
    threads: usize,
) -> Result<Dataset> {
    if sampling.n_samples == 0 {
        return Err(Error::config("n_samples must be at least 1"));
    }
    if !(sampling.strain_scale > 0.0 && sampling.strain_scale <= 0.5) {
        return Err(Error::config(format!(
            "strain_scale {} outside (0, 0.5]",
            sampling.strain_scale
        )));
    }
    let jobs: Vec<(usize, u32)> = polys
        .iter()
        .enumerate()
        .flat_map(|(pi, _)| (0..sampling.n_samples as u32).map(move |s| (pi, s)))
        .collect();
    let label_one = |&(pi, sample_idx): &(usize, u32)| -> Result<LabeledSample> {
        let (rve_id, poly) = &polys[pi];
        let mut rng = sample_rng(sampling.master_seed, *rve_id, sample_idx);
        let f = sample_deformation(&mut rng, sampling.strain_scale);
        let (psi, s) = label_sample(poly, consts, &f, homog)?;
        let c = f.transpose() * f;
        let c = (c + c.transpose()) * 0.5;
        Ok(LabeledSample { c: to_voigt(&c), psi, s: to_voigt(&s) })
    };
    let labeled: Vec<LabeledSample> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(label_one).collect::<Result<Vec<_>>>())?
    } else {
        jobs.iter().map(label_one).collect::<Result<Vec<_>>>()?
    };
    let mut rves = Vec::with_capacity(polys.len());
    for (pi, (rve_id, _)) in polys.iter().enumerate() {
        let start = pi * sampling.n_samples;
        rves.push(RveSamples {
            rve_id: *rve_id,
            samples: labeled[start..start + sampling.n_samples].to_vec(),
        });
    }
    Ok(Dataset { rves })
}

pub const DATASET_HEADER: &str =
    "rve_id,C11,C22,C33,C12,C23,C13,psi,S11,S22,S33,S12,S23,S13";

/// Writes the dataset CSV with full-precision floats.
pub fn write_dataset_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{DATASET_HEADER}").expect("write to string");
    for rve in &ds.rves {
        for s in &rve.samples {
            let mut fields = vec![rve.rve_id.to_string()];
            fields.extend(s.c.iter().map(|&v| fmt_g17(v)));
            fields.push(fmt_g17(s.psi));
            fields.extend(s.s.iter().map(|&v| fmt_g17(v)));
            writeln!(out, "{}", fields.join(",")).expect("write to string");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a dataset CSV written by [`write_dataset_csv`].
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == DATASET_HEADER => {}
        other => {
            return Err(Error::io(
                path,
                format!("bad dataset header: {:?}", other.unwrap_or_default()),
            ))
        }
    }
    let mut ds = Dataset::default();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            return Err(Error::io(
                path,
                format!("line {}: expected 14 fields, got {}", lineno + 2, fields.len()),
            ));
        }
        let rve_id: u32 = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::io(path, format!("line {}: bad rve_id", lineno + 2)))?;
        let mut c = [0.0; 6];
        let mut s = [0.0; 6];
        for k in 0..6 {
            c[k] = parse_f64(path, fields[1 + k], "C component")?;
            s[k] = parse_f64(path, fields[8 + k], "S component")?;
        }
        let psi = parse_f64(path, fields[7], "psi")?;
        let sample = LabeledSample { c, psi, s };
        match ds.rves.last_mut() {
            Some(r) if r.rve_id == rve_id => r.samples.push(sample),
            _ => ds.rves.push(RveSamples { rve_id, samples: vec![sample] }),
        }
    }
    if ds.n_samples() == 0 {
        return Err(Error::io(path, "dataset contains no samples"));
    }
    Ok(ds)
}
