//! Consistency battery for trained energy models: rotation invariance of the
//! energy, deliberate anisotropy, a necessary convexity condition, and a
//! stress/finite-difference cross check, each reported machine-readably.

use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::io::{fmt_g17, write_text};
use crate::nn::{
    energy_and_stress_with_encoding, energy_with_encoding, graph_encoding, GraphInput, ModelParams,
};
use crate::rotation::{random_rotation, rot_z};
use crate::tensor::{right_cauchy_green, sym_contract_voigt, to_voigt, STRESS_FROM_GRAD};

/// Outcome of one check: how many cases ran, the worst deviation seen, the
/// fraction of cases meeting the condition, and the pass bar applied.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub n_cases: usize,
    pub max_deviation: f64,
    pub fraction_satisfied: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Random deformation in the training range: F = I + U, U uniform in
/// [0, scale] per component.
fn random_deformation<R: Rng>(rng: &mut R, scale: f64) -> Matrix3<f64> {
    loop {
        let mut f = Matrix3::identity();
        for i in 0..3 {
            for j in 0..3 {
                f[(i, j)] += scale * rng.gen::<f64>();
            }
        }
        if f.determinant() > 0.0 {
            return f;
        }
    }
}

// ---------------------------------------------------------------------------
// Objectivity.

/// Superposed-rotation invariance of an energy function of C: compares the
/// energy at C(QF) against C(F) for uniform random rotations Q. Exact by
/// construction for any function of C; the numeric deviation is pure
/// floating-point noise from forming the two products.
pub fn check_objectivity_fn(
    energy: impl Fn(&[f64; 6]) -> Result<f64>,
    n_pairs: usize,
    seed: u64,
) -> Result<CheckReport> {
    let threshold = 1e-10;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut max_dev = 0.0f64;
    let mut satisfied = 0usize;
    for i in 0..n_pairs {
        let f = random_deformation(&mut rng, 0.1);
        // The first case uses Q = I: the deviation must be exactly zero.
        let q = if i == 0 { Matrix3::identity() } else { random_rotation(&mut rng) };
        let plain = energy(&to_voigt(&right_cauchy_green(&f)))?;
        let rotated = energy(&to_voigt(&right_cauchy_green(&(q * f))))?;
        let dev = (plain - rotated).abs();
        max_dev = max_dev.max(dev);
        if dev < threshold {
            satisfied += 1;
        }
    }
    Ok(CheckReport {
        name: "objectivity",
        n_cases: n_pairs,
        max_deviation: max_dev,
        fraction_satisfied: satisfied as f64 / n_pairs as f64,
        threshold,
        pass: max_dev < threshold,
    })
}

pub fn check_objectivity(
    p: &ModelParams,
    g: Option<&GraphInput>,
    n_pairs: usize,
    seed: u64,
) -> Result<CheckReport> {
    let enc = graph_encoding(p, g)?;
    check_objectivity_fn(|c| energy_with_encoding(p, enc.as_ref(), c), n_pairs, seed)
}

// ---------------------------------------------------------------------------
// Anisotropy.

/// Material-rotation sensitivity: evaluates the energy at C(F Q) for Q over
/// z-axis rotations of 0, 30, 60 degrees plus extra random rotations, and
/// reports the largest relative deviation from the unrotated value. A model
/// trained on anisotropic data PASSES when the deviation exceeds 1%;
/// isotropy would show up as a (near-)zero deviation.
pub fn check_anisotropy_fn(
    energy: impl Fn(&[f64; 6]) -> Result<f64>,
    f: &Matrix3<f64>,
    n_random: usize,
    seed: u64,
) -> Result<CheckReport> {
    let threshold = 1e-2;
    let mut rotations = vec![
        rot_z(30.0f64.to_radians()),
        rot_z(60.0f64.to_radians()),
    ];
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..n_random {
        rotations.push(random_rotation(&mut rng));
    }
    let base = energy(&to_voigt(&right_cauchy_green(f)))?;
    let denom = base.abs().max(1e-300);
    let mut max_rel = 0.0f64;
    for q in &rotations {
        let rotated = energy(&to_voigt(&right_cauchy_green(&(f * q))))?;
        max_rel = max_rel.max((rotated - base).abs() / denom);
    }
    let n_cases = rotations.len() + 1;
    Ok(CheckReport {
        name: "anisotropy",
        n_cases,
        max_deviation: max_rel,
        fraction_satisfied: if max_rel > threshold { 1.0 } else { 0.0 },
        threshold,
        pass: max_rel > threshold,
    })
}

pub fn check_anisotropy(
    p: &ModelParams,
    g: Option<&GraphInput>,
    f: &Matrix3<f64>,
    n_random: usize,
    seed: u64,
) -> Result<CheckReport> {
    let enc = graph_encoding(p, g)?;
    check_anisotropy_fn(|c| energy_with_encoding(p, enc.as_ref(), c), f, n_random, seed)
}

// ---------------------------------------------------------------------------
// Convexity (necessary condition).

/// First-order lower-bound increment: the gradient term of the convexity
/// inequality. The stress is twice the C-gradient, and the symmetric Voigt
/// contraction counts off-diagonal entries twice, so the tensor contraction
/// grad(psi) : (C_a - C_b) equals half the stress contraction.
fn gradient_increment(s_beta: &[f64; 6], c_alpha: &[f64; 6], c_beta: &[f64; 6]) -> f64 {
    let mut delta = [0.0; 6];
    for k in 0..6 {
        delta[k] = c_alpha[k] - c_beta[k];
    }
    0.5 * sym_contract_voigt(s_beta, &delta)
}

/// Gradient inequality sweep: for random ordered pairs (C_a, C_b) in the
/// training range, tests
///   psi(C_a) >= psi(C_b) + grad(psi)(C_b) : (C_a - C_b) - slack
/// with slack 1e-10, a necessary condition for convexity in C. Reports the
/// fraction of pairs satisfying it and the worst violation; passes at 99%.
pub fn check_convexity_fn(
    eval: impl Fn(&[f64; 6]) -> Result<(f64, [f64; 6])>,
    n_pairs: usize,
    seed: u64,
) -> Result<CheckReport> {
    let slack = 1e-10;
    let pass_fraction = 0.99;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut satisfied = 0usize;
    let mut worst = 0.0f64;
    for _ in 0..n_pairs {
        let c_alpha = to_voigt(&right_cauchy_green(&random_deformation(&mut rng, 0.1)));
        let c_beta = to_voigt(&right_cauchy_green(&random_deformation(&mut rng, 0.1)));
        let (psi_alpha, _) = eval(&c_alpha)?;
        let (psi_beta, s_beta) = eval(&c_beta)?;
        let lower = psi_beta + gradient_increment(&s_beta, &c_alpha, &c_beta);
        let margin = psi_alpha - lower;
        if margin >= -slack {
            satisfied += 1;
        } else {
            worst = worst.max(-margin);
        }
    }
    let fraction = satisfied as f64 / n_pairs as f64;
    Ok(CheckReport {
        name: "convexity",
        n_cases: n_pairs,
        max_deviation: worst,
        fraction_satisfied: fraction,
        threshold: pass_fraction,
        pass: fraction >= pass_fraction,
    })
}

pub fn check_convexity(
    p: &ModelParams,
    g: Option<&GraphInput>,
    n_pairs: usize,
    seed: u64,
) -> Result<CheckReport> {
    let enc = graph_encoding(p, g)?;
    check_convexity_fn(|c| energy_and_stress_with_encoding(p, enc.as_ref(), c), n_pairs, seed)
}

// ---------------------------------------------------------------------------
// Gradient cross check.

/// Stress versus central finite differences of the energy over random
/// probes; passes when the worst relative error stays below 1e-5.
pub fn gradient_check_fn(
    energy: impl Fn(&[f64; 6]) -> Result<f64>,
    stress: impl Fn(&[f64; 6]) -> Result<[f64; 6]>,
    n_probes: usize,
    seed: u64,
) -> Result<CheckReport> {
    let threshold = 1e-5;
    let h = 1e-5;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut satisfied = 0usize;
    for _ in 0..n_probes {
        let c = to_voigt(&right_cauchy_green(&random_deformation(&mut rng, 0.1)));
        let s = stress(&c)?;
        let mut probe_rel = 0.0f64;
        for k in 0..6 {
            let mut cp = c;
            let mut cm = c;
            cp[k] += h;
            cm[k] -= h;
            let fd = STRESS_FROM_GRAD[k] * (energy(&cp)? - energy(&cm)?) / (2.0 * h);
            probe_rel = probe_rel.max((s[k] - fd).abs() / fd.abs().max(1.0));
        }
        max_rel = max_rel.max(probe_rel);
        if probe_rel < threshold {
            satisfied += 1;
        }
    }
    Ok(CheckReport {
        name: "gradient_check",
        n_cases: n_probes,
        max_deviation: max_rel,
        fraction_satisfied: satisfied as f64 / n_probes as f64,
        threshold,
        pass: max_rel < threshold,
    })
}

pub fn gradient_check(
    p: &ModelParams,
    g: Option<&GraphInput>,
    n_probes: usize,
    seed: u64,
) -> Result<CheckReport> {
    let enc = graph_encoding(p, g)?;
    gradient_check_fn(
        |c| energy_with_encoding(p, enc.as_ref(), c),
        |c| Ok(energy_and_stress_with_encoding(p, enc.as_ref(), c)?.1),
        n_probes,
        seed,
    )
}

// ---------------------------------------------------------------------------
// Reporting.

/// Check table CSV: `check,n_cases,max_deviation,fraction_satisfied,threshold,pass`.
pub fn write_checks_csv(path: &Path, reports: &[CheckReport]) -> Result<()> {
    let mut out = String::from("check,n_cases,max_deviation,fraction_satisfied,threshold,pass\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.name,
            r.n_cases,
            fmt_g17(r.max_deviation),
            fmt_g17(r.fraction_satisfied),
            fmt_g17(r.threshold),
            r.pass
        ));
    }
    write_text(path, &out)
}
