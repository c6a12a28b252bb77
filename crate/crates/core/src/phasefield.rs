//! Material-point phase-field fracture machinery: volumetric/isochoric
//! deformation split, tension/compression energy partition, quadratic
//! degradation of the tensile part, history-variable damage evolution, and a
//! strain-ramp driver emitting time series. The spatial problem (crack
//! density functional, momentum balance) is out of scope; everything here is
//! a single material point.

use std::path::Path;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::fung::{fung_energy_stress, FungConstants};
use crate::io::{fmt_g17, write_text};
use crate::nn::{energy_and_stress, model_energy, model_stress, GraphInput, ModelParams};
use crate::rotation::{rot_z, Orientation};
use crate::tensor::{from_voigt, green_lagrange_from_c, right_cauchy_green, to_voigt};

/// Energy/stress provider in terms of the right Cauchy-Green tensor in Voigt
/// form. Implemented by the trained network and by the reference material so
/// the fracture machinery is agnostic to where the energy comes from.
pub trait Constitutive {
    fn energy(&self, c: &[f64; 6]) -> Result<f64>;
    /// Second Piola-Kirchhoff stress, twice the energy gradient in C.
    fn stress(&self, c: &[f64; 6]) -> Result<[f64; 6]>;
    fn energy_and_stress(&self, c: &[f64; 6]) -> Result<(f64, [f64; 6])> {
        Ok((self.energy(c)?, self.stress(c)?))
    }
}

/// Trained network viewed as a constitutive law for one fixed microstructure.
pub struct NetworkModel<'a> {
    pub params: &'a ModelParams,
    pub graph: Option<&'a GraphInput>,
}

impl Constitutive for NetworkModel<'_> {
    fn energy(&self, c: &[f64; 6]) -> Result<f64> {
        model_energy(self.params, self.graph, c)
    }
    fn stress(&self, c: &[f64; 6]) -> Result<[f64; 6]> {
        model_stress(self.params, self.graph, c)
    }
    fn energy_and_stress(&self, c: &[f64; 6]) -> Result<(f64, [f64; 6])> {
        energy_and_stress(self.params, self.graph, c)
    }
}

/// Reference anisotropic material at a fixed orientation.
pub struct FungModel {
    pub constants: FungConstants,
    pub orientation: Orientation,
}

impl Constitutive for FungModel {
    fn energy(&self, c: &[f64; 6]) -> Result<f64> {
        Ok(self.energy_and_stress(c)?.0)
    }
    fn stress(&self, c: &[f64; 6]) -> Result<[f64; 6]> {
        Ok(self.energy_and_stress(c)?.1)
    }
    fn energy_and_stress(&self, c: &[f64; 6]) -> Result<(f64, [f64; 6])> {
        let e = green_lagrange_from_c(&from_voigt(c));
        let (psi, s) = fung_energy_stress(&self.constants, &e, &self.orientation)?;
        Ok((psi, to_voigt(&s)))
    }
}

/// Pointwise damage state: phase field d (0 undamaged, 1 fully damaged) and
/// the history variable H, the largest tensile energy seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DamageState {
    pub d: f64,
    pub h: f64,
}

/// Fracture parameters. g_c is the critical energy release rate, l_0 the
/// regularization length, eta the viscosity, r the residual stiffness factor
/// left at full damage.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseFieldParams {
    pub g_c: f64,
    pub l_0: f64,
    pub eta: f64,
    pub r: f64,
}

impl Default for PhaseFieldParams {
    /// l_0 follows the reference fracture setup; g_c and eta are demo values
    /// sized so the reference material damages visibly over a 10% tension
    /// ramp (g_c/l_0 comparable to twice the stored energy, eta relaxing in
    /// a handful of 5e-8 steps).
    fn default() -> Self {
        PhaseFieldParams { g_c: 2.4e-5, l_0: 1.2e-3, eta: 1e-8, r: 0.0 }
    }
}

impl PhaseFieldParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("g_c", self.g_c), ("l_0", self.l_0), ("eta", self.eta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!(
                    "phase-field {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.r.is_finite() && self.r >= 0.0) {
            return Err(Error::config(format!(
                "phase-field r must be nonnegative, got {}",
                self.r
            )));
        }
        Ok(())
    }

    /// Quadratic degradation g(d) = (1 - d)^2.
    pub fn degradation(&self, d: f64) -> f64 {
        (1.0 - d) * (1.0 - d)
    }
}

/// Multiplicative volumetric/isochoric split F = F_iso F_vol with
/// F_vol = (det F)^{1/3} I. Returns (F_vol, F_iso).
pub fn split_deformation(f: &Matrix3<f64>) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
    let j = f.determinant();
    if !(j.is_finite() && j > 0.0) {
        return Err(Error::config(format!(
            "deformation gradient must have positive determinant, got {j}"
        )));
    }
    let scale = j.cbrt();
    Ok((Matrix3::identity() * scale, f / scale))
}

/// Tension/compression energy partition. Dilating states (J >= 1) are fully
/// tensile; for J < 1 the energy of the pure-dilation part F_vol is the
/// compressive share and the remainder is tensile. Returns (psi_plus,
/// psi_minus); the two always sum back to the total energy.
pub fn energy_split(model: &dyn Constitutive, f: &Matrix3<f64>) -> Result<(f64, f64)> {
    let (f_vol, _) = split_deformation(f)?;
    let psi = model.energy(&to_voigt(&right_cauchy_green(f)))?;
    if f.determinant() >= 1.0 {
        Ok((psi, 0.0))
    } else {
        let psi_vol = model.energy(&to_voigt(&right_cauchy_green(&f_vol)))?;
        Ok((psi - psi_vol, psi_vol))
    }
}

/// First Piola-Kirchhoff stress with the tensile part degraded:
/// P = 2 F [(g(d)+r) dpsi_plus/dC + dpsi_minus/dC], with the split gradients
/// taken directly from the constitutive stress at F and F_vol on the branch
/// energy_split uses.
pub fn degraded_stress(
    model: &dyn Constitutive,
    f: &Matrix3<f64>,
    d: f64,
    params: &PhaseFieldParams,
) -> Result<Matrix3<f64>> {
    let (f_vol, _) = split_deformation(f)?;
    let factor = params.degradation(d) + params.r;
    let s = from_voigt(&model.stress(&to_voigt(&right_cauchy_green(f)))?);
    let combined = if f.determinant() >= 1.0 {
        s * factor
    } else {
        let s_vol = from_voigt(&model.stress(&to_voigt(&right_cauchy_green(&f_vol)))?);
        (s - s_vol) * factor + s_vol
    };
    Ok(f * combined)
}

/// One backward-Euler step of the pointwise balance
/// (g_c/l_0) d + eta d_dot = 2 (1 - d) H, after refreshing the history
/// variable with the current tensile energy. Damage is irreversible: the
/// update never lowers d, and d stays inside [0, 1].
pub fn evolve_damage(
    state: &DamageState,
    psi_plus: f64,
    dt: f64,
    params: &PhaseFieldParams,
) -> DamageState {
    let h = state.h.max(psi_plus);
    let drive = params.g_c / params.l_0 + 2.0 * h;
    let update = (params.eta * state.d + 2.0 * dt * h) / (params.eta + dt * drive);
    DamageState { d: state.d.max(update).clamp(0.0, 1.0), h }
}

/// Steady state the 0-D balance relaxes to under a constant history value.
pub fn equilibrium_damage(h: f64, params: &PhaseFieldParams) -> f64 {
    2.0 * h / (params.g_c / params.l_0 + 2.0 * h)
}

/// Uniaxial strain ramp at a material point: F(t) = I + a(t) e1 (x) e1 with
/// a growing linearly to `stretch`, evaluated on the material rotated about
/// the z axis by `rotation_deg`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RampConfig {
    pub n_steps: usize,
    pub dt: f64,
    pub stretch: f64,
    pub rotation_deg: f64,
}

impl Default for RampConfig {
    fn default() -> Self {
        RampConfig { n_steps: 200, dt: 5e-8, stretch: 0.1, rotation_deg: 0.0 }
    }
}

impl RampConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("ramp needs at least one step"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::config(format!("ramp dt must be positive, got {}", self.dt)));
        }
        if !(self.stretch.is_finite() && self.stretch > -1.0) {
            return Err(Error::config(format!(
                "ramp stretch must stay above -1, got {}",
                self.stretch
            )));
        }
        Ok(())
    }
}

/// One row of the ramp time series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RampRecord {
    pub t: f64,
    pub psi_plus: f64,
    pub h: f64,
    pub d: f64,
    pub p: Matrix3<f64>,
}

/// Runs the ramp: per step, refresh the tensile energy, advance damage, and
/// evaluate the degraded stress at the new damage level.
pub fn run_ramp(
    model: &dyn Constitutive,
    ramp: &RampConfig,
    params: &PhaseFieldParams,
) -> Result<Vec<RampRecord>> {
    ramp.validate()?;
    params.validate()?;
    let q = rot_z(ramp.rotation_deg.to_radians());
    let mut state = DamageState::default();
    let mut records = Vec::with_capacity(ramp.n_steps);
    for step in 1..=ramp.n_steps {
        let a = ramp.stretch * step as f64 / ramp.n_steps as f64;
        let mut f: Matrix3<f64> = Matrix3::identity();
        f[(0, 0)] += a;
        let f = f * q;
        let (psi_plus, _) = energy_split(model, &f)?;
        state = evolve_damage(&state, psi_plus, ramp.dt, params);
        let p = degraded_stress(model, &f, state.d, params)?;
        records.push(RampRecord { t: step as f64 * ramp.dt, psi_plus, h: state.h, d: state.d, p });
    }
    Ok(records)
}

/// Ramp time-series CSV:
/// `t,psi_plus,H,d,P11,P12,P13,P21,P22,P23,P31,P32,P33`.
pub fn write_ramp_csv(path: &Path, records: &[RampRecord]) -> Result<()> {
    let mut out = String::from("t,psi_plus,H,d,P11,P12,P13,P21,P22,P23,P31,P32,P33\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}",
            fmt_g17(r.t),
            fmt_g17(r.psi_plus),
            fmt_g17(r.h),
            fmt_g17(r.d)
        ));
        for i in 0..3 {
            for j in 0..3 {
                out.push(',');
                out.push_str(&fmt_g17(r.p[(i, j)]));
            }
        }
        out.push('\n');
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn fung() -> FungModel {
        FungModel {
            constants: FungConstants::default(),
            orientation: Orientation::new(0.4, 0.8, 1.3).unwrap(),
        }
    }

    fn random_f(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> Matrix3<f64> {
        loop {
            let mut f = Matrix3::identity();
            for i in 0..3 {
                for j in 0..3 {
                    f[(i, j)] += lo + (hi - lo) * rng.gen::<f64>();
                }
            }
            if f.determinant() > 0.0 {
                return f;
            }
        }
    }

    #[test]
    fn split_recovers_trivial_and_random_deformations() {
        let (f_vol, f_iso) = split_deformation(&Matrix3::identity()).unwrap();
        assert_eq!(f_vol, Matrix3::identity());
        assert_eq!(f_iso, Matrix3::identity());

        let (f_vol, f_iso) = split_deformation(&(Matrix3::identity() * 2.0)).unwrap();
        assert_abs_diff_eq!(f_vol, Matrix3::identity() * 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f_iso, Matrix3::identity(), epsilon = 1e-15);

        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..50 {
            let f = random_f(&mut rng, -0.3, 0.3);
            let (f_vol, f_iso) = split_deformation(&f).unwrap();
            assert_abs_diff_eq!(f_iso * f_vol, f, epsilon = 1e-13);
            assert_abs_diff_eq!(f_vol * f_iso, f, epsilon = 1e-13);
            assert_abs_diff_eq!(f_iso.determinant(), 1.0, epsilon = 1e-12);
        }

        let inverted = Matrix3::identity() * -1.0;
        assert_eq!(split_deformation(&inverted).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn energy_split_branches_add_back_to_the_total() {
        let m = fung();

        // J = 1 sits on the tensile branch and the identity stores nothing.
        let (plus, minus) = energy_split(&m, &Matrix3::identity()).unwrap();
        assert_eq!(minus, 0.0);
        assert_abs_diff_eq!(plus, 0.0, epsilon = 1e-15);

        // Pure compression is its own volumetric part: nothing tensile.
        let f = Matrix3::identity() * 0.95;
        let (plus, minus) = energy_split(&m, &f).unwrap();
        assert_abs_diff_eq!(plus, 0.0, epsilon = 1e-12);
        let psi = m.energy(&to_voigt(&right_cauchy_green(&f))).unwrap();
        assert_abs_diff_eq!(minus, psi, epsilon = 1e-12);

        // Both branches: the parts always reassemble the total energy.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut seen_compressive = 0;
        for _ in 0..100 {
            let f = random_f(&mut rng, -0.1, 0.1);
            let (plus, minus) = energy_split(&m, &f).unwrap();
            let psi = m.energy(&to_voigt(&right_cauchy_green(&f))).unwrap();
            assert_abs_diff_eq!(plus + minus, psi, epsilon = 1e-14);
            if f.determinant() < 1.0 {
                seen_compressive += 1;
                assert!(minus >= 0.0);
            } else {
                assert_eq!(minus, 0.0);
            }
        }
        assert!(seen_compressive > 10, "sampling missed the J < 1 branch");
    }

    #[test]
    fn degraded_stress_limits_match_the_undamaged_and_fully_damaged_material() {
        let m = fung();
        let params = PhaseFieldParams::default();
        let mut f = Matrix3::identity();
        f[(0, 0)] = 1.08;
        f[(0, 1)] = 0.03;

        // d = 0 leaves the first Piola-Kirchhoff stress untouched.
        let p0 = degraded_stress(&m, &f, 0.0, &params).unwrap();
        let s = from_voigt(&m.stress(&to_voigt(&right_cauchy_green(&f))).unwrap());
        assert_abs_diff_eq!(p0, f * s, epsilon = 1e-15);

        // d = 1, r = 0 kills a tensile (J >= 1) state completely.
        let p1 = degraded_stress(&m, &f, 1.0, &params).unwrap();
        assert_eq!(p1, Matrix3::zeros());

        // A residual factor keeps r times the undamaged response.
        let residual = PhaseFieldParams { r: 0.25, ..params };
        let pr = degraded_stress(&m, &f, 1.0, &residual).unwrap();
        assert_abs_diff_eq!(pr, f * s * 0.25, epsilon = 1e-15);
    }

    #[test]
    fn compression_is_not_degraded() {
        let m = fung();
        let params = PhaseFieldParams::default();

        // Pure compression: damage level must not matter.
        let f = Matrix3::identity() * 0.93;
        let p_undamaged = degraded_stress(&m, &f, 0.0, &params).unwrap();
        let p_damaged = degraded_stress(&m, &f, 1.0, &params).unwrap();
        assert_abs_diff_eq!(p_undamaged, p_damaged, epsilon = 1e-12);
        assert!(p_damaged.norm() > 1e-4, "compressive stress should survive full damage");

        // General J < 1 state at full damage: only the volumetric share acts.
        let mut f = Matrix3::identity() * 0.94;
        f[(0, 1)] = 0.05;
        let (f_vol, _) = split_deformation(&f).unwrap();
        let p = degraded_stress(&m, &f, 1.0, &params).unwrap();
        let s_vol = from_voigt(&m.stress(&to_voigt(&right_cauchy_green(&f_vol))).unwrap());
        assert_abs_diff_eq!(p, f * s_vol, epsilon = 1e-15);
        assert!(p.norm() > 1e-4);
    }

    #[test]
    fn damage_is_irreversible_bounded_and_driven_by_history() {
        let params = PhaseFieldParams::default();

        // No driving force: d holds (the raw update would decay).
        let state = DamageState { d: 0.3, h: 0.0 };
        let next = evolve_damage(&state, 0.0, 5e-8, &params);
        assert_eq!(next.d, 0.3);
        assert_eq!(next.h, 0.0);

        // History keeps the peak energy even when loading drops.
        let state = DamageState { d: 0.0, h: 0.0 };
        let state = evolve_damage(&state, 0.02, 5e-8, &params);
        assert_eq!(state.h, 0.02);
        let state = evolve_damage(&state, 0.005, 5e-8, &params);
        assert_eq!(state.h, 0.02);

        // Saturation: an enormous driving force pushes d to 1 but not past.
        let mut state = DamageState::default();
        for _ in 0..50 {
            state = evolve_damage(&state, 1e12, 5e-8, &params);
        }
        assert!(state.d > 0.999999 && state.d <= 1.0);

        // Random loading history: d monotone in [0,1], h monotone.
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut state = DamageState::default();
        for _ in 0..500 {
            let prev = state;
            state = evolve_damage(&state, 0.05 * rng.gen::<f64>(), 5e-8, &params);
            assert!(state.d >= prev.d);
            assert!(state.h >= prev.h);
            assert!((0.0..=1.0).contains(&state.d));
        }
    }

    #[test]
    fn constant_history_relaxes_to_the_analytic_fixed_point() {
        let params = PhaseFieldParams::default();
        let h = 0.009;
        let target = equilibrium_damage(h, &params);
        assert!(target > 0.1 && target < 0.9, "fixed point {target} not informative");

        let mut state = DamageState::default();
        for _ in 0..2000 {
            state = evolve_damage(&state, h, 5e-8, &params);
        }
        assert_abs_diff_eq!(state.d, target, epsilon = 1e-6);

        // The fixed point is stationary for the discrete update too.
        let fixed = DamageState { d: target, h };
        let next = evolve_damage(&fixed, h, 5e-8, &params);
        assert_abs_diff_eq!(next.d, target, epsilon = 1e-15);
    }

    #[test]
    fn tension_ramp_accumulates_damage_deterministically() {
        let m = fung();
        let ramp = RampConfig::default();
        let params = PhaseFieldParams::default();
        let records = run_ramp(&m, &ramp, &params).unwrap();
        assert_eq!(records.len(), ramp.n_steps);

        for w in records.windows(2) {
            assert!(w[1].t > w[0].t);
            assert!(w[1].h >= w[0].h);
            assert!(w[1].d >= w[0].d);
        }
        let last = records.last().unwrap();
        assert!(last.d > 0.05 && last.d < 1.0, "final damage {} not qualitative", last.d);
        assert!(last.psi_plus > 0.0);

        // Bitwise reproducible.
        let again = run_ramp(&m, &ramp, &params).unwrap();
        assert_eq!(records, again);

        // Rotating the material changes the response of an anisotropic law.
        let rotated = RampConfig { rotation_deg: 60.0, ..ramp };
        let other = run_ramp(&m, &rotated, &params).unwrap();
        let rel = (other.last().unwrap().psi_plus - last.psi_plus).abs() / last.psi_plus;
        assert!(rel > 1e-3, "rotation left the ramp unchanged (rel {rel})");
    }

    #[test]
    fn ramp_csv_has_the_pinned_header_and_shape() {
        let m = fung();
        let ramp = RampConfig { n_steps: 4, ..RampConfig::default() };
        let records = run_ramp(&m, &ramp, &PhaseFieldParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ramp.csv");
        write_ramp_csv(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,psi_plus,H,d,P11,P12,P13,P21,P22,P23,P31,P32,P33"
        );
        assert_eq!(lines.count(), 4);
        for line in text.lines().skip(1) {
            assert_eq!(line.split(',').count(), 13);
        }
    }

    #[test]
    fn bad_configs_are_rejected_as_config_errors() {
        assert_eq!(
            PhaseFieldParams { g_c: 0.0, ..PhaseFieldParams::default() }
                .validate()
                .unwrap_err()
                .exit_code(),
            2
        );
        assert_eq!(
            PhaseFieldParams { r: -0.1, ..PhaseFieldParams::default() }
                .validate()
                .unwrap_err()
                .exit_code(),
            2
        );
        assert_eq!(
            RampConfig { n_steps: 0, ..RampConfig::default() }
                .validate()
                .unwrap_err()
                .exit_code(),
            2
        );
        assert_eq!(
            RampConfig { stretch: -1.0, ..RampConfig::default() }
                .validate()
                .unwrap_err()
                .exit_code(),
            2
        );
    }
}
