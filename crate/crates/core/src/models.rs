//! Closed-form decoherence and relaxation models versus temperature.
//!
//! Rates are in 1/ns (angular where noted), temperatures in K and
//! frequencies in GHz.

use std::f64::consts::PI;

use thiserror::Error;

use crate::constants::{BOHR_MAGNETON, BOLTZMANN, PLANCK};
use crate::fit::{fit_model, Bounds, FitError, FitResult, ModelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("coupling per ppm must be positive, got {0}")]
    NonPositiveCoupling(f64),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("calibration points are degenerate")]
    SingularCalibration,
}

/// Spin-bath echo model: flip-flop term plus resonant coupling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EchoModelParams {
    /// Flip-flop amplitude, rad/ns.
    pub c: f64,
    /// Bath Zeeman temperature, K.
    pub t_z: f64,
    /// Resonant bath coupling, rad/ns.
    pub gamma_res: f64,
}

impl Default for EchoModelParams {
    fn default() -> Self {
        Self {
            c: 2.0 * PI * 6.34e-6,
            t_z: 0.280,
            gamma_res: 2.0 * PI * 1.15e-3,
        }
    }
}

/// `C/((1+e^{T_Z/T})(1+e^{−T_Z/T})) + Γ_res`; `T ≤ 0` gives the limit Γ_res.
pub fn echo_rate(temperature: f64, p: &EchoModelParams) -> f64 {
    if temperature <= 0.0 {
        return p.gamma_res;
    }
    let x = (p.t_z / temperature).abs();
    // same value, written without overflow for large x
    let e = (-x).exp();
    p.c * e / ((1.0 + e) * (1.0 + e)) + p.gamma_res
}

/// Echo coherence time in ns.
pub fn echo_time_ns(temperature: f64, p: &EchoModelParams) -> f64 {
    1.0 / echo_rate(temperature, p)
}

/// `g μ_B B / k_B` in kelvin.
pub fn zeeman_temperature(field_tesla: f64, g: f64) -> f64 {
    g * BOHR_MAGNETON * field_tesla / BOLTZMANN
}

/// `h ν / k_B` for a frequency in GHz.
pub fn frequency_temperature(nu_ghz: f64) -> f64 {
    PLANCK * nu_ghz * 1e9 / BOLTZMANN
}

/// Composite spin-relaxation model: direct one-phonon process at the spin
/// splitting plus activation to the upper orbital branch, with the sample
/// temperature clamped from below.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct T1ModelParams {
    /// 1/ns.
    pub a_direct: f64,
    pub nu_zeeman_ghz: f64,
    /// 1/ns.
    pub a_orbital: f64,
    pub nu_orbital_ghz: f64,
    /// K.
    pub t_floor: f64,
}

impl Default for T1ModelParams {
    fn default() -> Self {
        calibrate_t1_model(
            &T1Calibration::default(),
            crate::constants::zeeman_splitting_ghz(0.21, 2.0),
            48.0,
            0.040,
        )
        .expect("default calibration points are independent")
    }
}

impl T1ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("a_direct", self.a_direct),
            ("nu_zeeman_ghz", self.nu_zeeman_ghz),
            ("a_orbital", self.a_orbital),
            ("nu_orbital_ghz", self.nu_orbital_ghz),
            ("t_floor", self.t_floor),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ModelError::InvalidParameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn direct_factor(t_eff: f64, nu_zeeman_ghz: f64) -> f64 {
    let y = frequency_temperature(nu_zeeman_ghz) / (2.0 * t_eff);
    if y == 0.0 {
        return f64::INFINITY;
    }
    1.0 / y.tanh()
}

fn orbital_factor(t_eff: f64, nu_orbital_ghz: f64) -> f64 {
    let y = frequency_temperature(nu_orbital_ghz) / t_eff;
    1.0 / y.exp_m1()
}

fn effective_temperature(t: f64, t_floor: f64) -> f64 {
    t.max(t_floor)
}

/// `A_d coth(hν_Z/2kT) + A_o/(exp(hν_orb/kT) − 1)` at `T_eff = max(T, T_floor)`.
pub fn spin_t1_rate(temperature: f64, p: &T1ModelParams) -> f64 {
    let t = effective_temperature(temperature, p.t_floor);
    if t <= 0.0 {
        return p.a_direct;
    }
    p.a_direct * direct_factor(t, p.nu_zeeman_ghz) + p.a_orbital * orbital_factor(t, p.nu_orbital_ghz)
}

/// Two (temperature, T₁) anchor points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct T1Calibration {
    pub t_low: f64,
    pub t1_low_ns: f64,
    pub t_high: f64,
    pub t1_high_ns: f64,
}

impl Default for T1Calibration {
    fn default() -> Self {
        Self {
            t_low: 0.012,
            t1_low_ns: 108_000.0,
            t_high: 3.7,
            t1_high_ns: 303.0,
        }
    }
}

/// Solves for `(A_direct, A_orbital)` so the model passes through both points.
pub fn calibrate_t1_model(
    cal: &T1Calibration,
    nu_zeeman_ghz: f64,
    nu_orbital_ghz: f64,
    t_floor: f64,
) -> Result<T1ModelParams, ModelError> {
    let rows = [(cal.t_low, 1.0 / cal.t1_low_ns), (cal.t_high, 1.0 / cal.t1_high_ns)];
    let m: Vec<(f64, f64, f64)> = rows
        .iter()
        .map(|&(t, rate)| {
            let te = effective_temperature(t, t_floor);
            (direct_factor(te, nu_zeeman_ghz), orbital_factor(te, nu_orbital_ghz), rate)
        })
        .collect();
    let det = m[0].0 * m[1].1 - m[0].1 * m[1].0;
    if !det.is_finite() || det.abs() < 1e-300 {
        return Err(ModelError::SingularCalibration);
    }
    let a_direct = (m[0].2 * m[1].1 - m[0].1 * m[1].2) / det;
    let a_orbital = (m[0].0 * m[1].2 - m[0].2 * m[1].0) / det;
    if a_direct < 0.0 || a_orbital < 0.0 {
        return Err(ModelError::InvalidParameter(format!(
            "calibration needs negative prefactors ({a_direct:e}, {a_orbital:e})"
        )));
    }
    Ok(T1ModelParams {
        a_direct,
        nu_zeeman_ghz,
        a_orbital,
        nu_orbital_ghz,
        t_floor,
    })
}

/// Resonant bath coupling per ppm of bath spins, rad/ns; reproduces
/// 3.8 ppm for Γ_res = 2π·1.15 MHz.
pub const DEFAULT_COUPLING_PER_PPM: f64 = 2.0 * PI * 1.15e-3 / 3.8;

pub fn bath_density_ppm(gamma_res: f64, coupling_per_ppm: f64) -> Result<f64, ModelError> {
    if !(coupling_per_ppm > 0.0) || !coupling_per_ppm.is_finite() {
        return Err(ModelError::NonPositiveCoupling(coupling_per_ppm));
    }
    Ok(gamma_res / coupling_per_ppm)
}

/// Fits (C, T_Z, Γ_res) to echo rates measured at several temperatures.
pub fn fit_echo_model(
    temperatures: &[f64],
    rates: &[f64],
    init: &EchoModelParams,
) -> Result<FitResult, FitError> {
    // work in rad/µs so all three parameters are O(1..10)
    let scaled: Vec<f64> = rates.iter().map(|r| r * 1e3).collect();
    let spec = ModelSpec {
        name: "echo_rate",
        params: &["c", "t_z", "gamma_res"],
        predict: |p: &[f64], t: f64| {
            echo_rate(
                t,
                &EchoModelParams {
                    c: p[0],
                    t_z: p[1],
                    gamma_res: p[2],
                },
            )
        },
    };
    let bounds = Bounds {
        lower: vec![0.0, 1e-4, 0.0],
        upper: vec![f64::INFINITY, 100.0, f64::INFINITY],
    };
    let start = [init.c * 1e3, init.t_z, init.gamma_res * 1e3];
    let unscale = |mut r: FitResult| {
        for i in [0, 2] {
            r.params[i] *= 1e-3;
            r.uncertainties[i] *= 1e-3;
        }
        for i in 0..3 {
            for j in 0..3 {
                let fi = if i == 1 { 1.0 } else { 1e-3 };
                let fj = if j == 1 { 1.0 } else { 1e-3 };
                r.covariance[(i, j)] *= fi * fj;
            }
        }
        r.residual_norm *= 1e-3;
        r
    };
    match fit_model(&spec, temperatures, &scaled, &start, &bounds) {
        Ok(r) => Ok(unscale(r)),
        Err(FitError::NoConvergence { best }) => Err(FitError::NoConvergence {
            best: Box::new(unscale(*best)),
        }),
        Err(e) => Err(e),
    }
}

/// Fits (A_direct, A_orbital) to measured spin relaxation rates with the
/// frequencies and floor held fixed. Prefactors are fitted in 1/µs.
pub fn fit_t1_model(
    temperatures: &[f64],
    rates: &[f64],
    fixed: &T1ModelParams,
) -> Result<FitResult, FitError> {
    let scaled: Vec<f64> = rates.iter().map(|r| r * 1e3).collect();
    let spec = ModelSpec {
        name: "spin_t1_rate",
        params: &["a_direct", "a_orbital"],
        predict: |p: &[f64], t: f64| {
            spin_t1_rate(
                t,
                &T1ModelParams {
                    a_direct: p[0],
                    a_orbital: p[1],
                    ..*fixed
                },
            )
        },
    };
    let bounds = Bounds {
        lower: vec![0.0, 0.0],
        upper: vec![f64::INFINITY; 2],
    };
    let start = [fixed.a_direct * 1e3, fixed.a_orbital * 1e3];
    let unscale = |mut r: FitResult| {
        for i in 0..2 {
            r.params[i] *= 1e-3;
            r.uncertainties[i] *= 1e-3;
        }
        r.covariance *= 1e-6;
        r.residual_norm *= 1e-3;
        r
    };
    match fit_model(&spec, temperatures, &scaled, &start, &bounds) {
        Ok(r) => Ok(unscale(r)),
        Err(FitError::NoConvergence { best }) => Err(FitError::NoConvergence {
            best: Box::new(unscale(*best)),
        }),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn echo_time_at_base_temperature() {
        let p = EchoModelParams::default();
        let t2 = echo_time_ns(0.012, &p);
        assert!((t2 / 138.3 - 1.0).abs() < 0.005, "{t2}");
        // flip-flop term is exponentially frozen out at 12 mK
        assert!((echo_rate(0.012, &p) - p.gamma_res) / p.gamma_res < 1e-9);
        assert!((echo_rate(0.012, &p) / (2.0 * PI * 1.1503e-3) - 1.0).abs() < 5e-4);
    }

    #[test]
    fn echo_limits() {
        let p = EchoModelParams::default();
        assert_eq!(echo_rate(0.0, &p), p.gamma_res);
        assert_eq!(echo_rate(1e-6, &p), p.gamma_res);
        assert_eq!(echo_rate(f64::INFINITY, &p), p.gamma_res + p.c / 4.0);
        assert!((echo_rate(1e9, &p) - (p.gamma_res + p.c / 4.0)).abs() < 1e-18);
    }

    #[test]
    fn product_form_equals_cosh_form() {
        let c = 1.7;
        for i in 0..=1000 {
            let x = -50.0 + 0.1 * i as f64;
            let product = c / ((1.0 + x.exp()) * (1.0 + (-x).exp()));
            let cosh = c / (4.0 * (x / 2.0).cosh().powi(2));
            assert!((product - cosh).abs() <= 1e-12 * cosh.max(1e-300) + 1e-300, "{x}");
            let p = EchoModelParams { c, t_z: x, gamma_res: 0.0 };
            let ours = echo_rate(1.0, &p);
            assert!((ours - cosh).abs() <= 1e-12 * cosh);
        }
    }

    #[test]
    fn echo_rate_increases_and_is_symmetric_in_tz() {
        let p = EchoModelParams { c: 1.0, ..EchoModelParams::default() };
        let mut prev = echo_rate(0.0, &p);
        for i in 1..200 {
            let r = echo_rate(0.01 * i as f64, &p);
            assert!(r > prev || (r - prev).abs() < 1e-15 && i < 5);
            prev = r;
        }
        let flipped = EchoModelParams { t_z: -p.t_z, ..p };
        for t in [0.05, 0.3, 2.0] {
            assert_eq!(echo_rate(t, &p), echo_rate(t, &flipped));
        }
    }

    #[test]
    fn zeeman_temperature_values() {
        let t = zeeman_temperature(0.21, 2.0);
        // g μB B / kB with CODATA 2018 values
        let oracle = 2.0 * 9.2740100783e-24 * 0.21 / 1.380649e-23;
        assert!((t - oracle).abs() < 1e-15);
        assert!((t - 0.282).abs() < 0.0005);
        assert!((t / 0.280 - 1.0).abs() < 0.01);
        assert_eq!(zeeman_temperature(0.0, 2.0), 0.0);
    }

    #[test]
    fn t1_calibration_hits_both_endpoints() {
        let p = T1ModelParams::default();
        assert!((spin_t1_rate(0.012, &p) * 108_000.0 - 1.0).abs() < 1e-12);
        assert!((spin_t1_rate(3.7, &p) * 303.0 - 1.0).abs() < 1e-12);
        let ratio = spin_t1_rate(3.7, &p) / spin_t1_rate(0.012, &p);
        assert!((ratio - 108_000.0 / 303.0).abs() < 1e-9);
        assert!((ratio - 356.0).abs() < 0.5);
    }

    #[test]
    fn t1_rate_clamped_below_floor_and_monotone_above() {
        let p = T1ModelParams::default();
        let floor = spin_t1_rate(p.t_floor, &p);
        for t in [0.0, 0.001, 0.012, 0.039] {
            assert_eq!(spin_t1_rate(t, &p), floor);
        }
        let mut prev = floor;
        for i in 1..=400 {
            let r = spin_t1_rate(p.t_floor + 0.01 * i as f64, &p);
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn direct_term_is_linear_well_above_zeeman_temperature() {
        let p = T1ModelParams { a_orbital: 0.0, ..T1ModelParams::default() };
        let tz = frequency_temperature(p.nu_zeeman_ghz);
        let slope = 2.0 * p.a_direct / tz;
        for i in 0..=20 {
            let t = tz * (3.0 + 7.0 * i as f64 / 20.0);
            let r = spin_t1_rate(t, &p);
            assert!((r / (slope * t) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn bath_density() {
        let ppm = bath_density_ppm(2.0 * PI * 1.15e-3, DEFAULT_COUPLING_PER_PPM).unwrap();
        assert!((ppm - 3.8).abs() < 1e-12);
        assert_eq!(bath_density_ppm(0.0, DEFAULT_COUPLING_PER_PPM).unwrap(), 0.0);
        let double = bath_density_ppm(4.0 * PI * 1.15e-3, DEFAULT_COUPLING_PER_PPM).unwrap();
        assert!((double - 7.6).abs() < 1e-12);
        assert!((DEFAULT_COUPLING_PER_PPM / (2.0 * PI) - 302.6e-6).abs() < 0.1e-6);
        assert_eq!(bath_density_ppm(1.0, 0.0), Err(ModelError::NonPositiveCoupling(0.0)));
    }

    #[test]
    fn echo_model_fit_recovers_resonant_term() {
        let truth = EchoModelParams::default();
        let temps = [0.012, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.7];
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.03).unwrap();
        let rates: Vec<f64> = temps
            .iter()
            .map(|&t| echo_rate(t, &truth) * (1.0 + noise.sample(&mut rng)))
            .collect();
        let init = EchoModelParams { c: truth.c * 2.0, t_z: 0.5, gamma_res: truth.gamma_res * 0.5 };
        let r = fit_echo_model(&temps, &rates, &init).unwrap();
        assert!((r.get("gamma_res") / truth.gamma_res - 1.0).abs() < 0.1);
    }

    #[test]
    fn t1_model_fit_interpolates_two_points_exactly() {
        let truth = T1ModelParams::default();
        let start = T1ModelParams { a_direct: truth.a_direct * 3.0, a_orbital: truth.a_orbital * 0.2, ..truth };
        let r = fit_t1_model(&[0.012, 3.7], &[1.0 / 108_000.0, 1.0 / 303.0], &start).unwrap();
        assert!((r.get("a_direct") / truth.a_direct - 1.0).abs() < 1e-6);
        assert!((r.get("a_orbital") / truth.a_orbital - 1.0).abs() < 1e-6);
    }
}
