//! Pulse schedules and the canned experiments: Raman-Rabi, Ramsey, Hahn
//! echo, optical-pumping T₁, PLE scans and initialization fidelity.
//!
//! Ground levels `|1⟩, |2⟩` are basis indices 0 and 1; the lowest two
//! excited levels `eA, eB` are indices 2 and 3.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::Complex;
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{
    build_driven_model, evolve_sampled, fluorescence, steady_state, DensityMatrix, Drive,
    DynamicsError, LindbladModel, Physicality, Propagator, RateSet, VecRho,
};
use crate::fit::{fit_exponential, ExpMode, FitError, FitResult};
use crate::levels::{optical_structure, LevelsError, MagneticField, SiVParams, C64};
use crate::noise::DetuningPath;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequenceError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Levels(#[from] LevelsError),
    #[error("pulse miscalibrated: rotation {actual:.6} rad, expected {expected:.6} rad")]
    MiscalibratedPulse { expected: f64, actual: f64 },
    #[error("pump reached {reached:.6} of the pumped population, steady state is {steady:.6}")]
    PumpTooShort { reached: f64, steady: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// The four lines between the lowest ground and excited doublets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transition {
    A1,
    A2,
    B1,
    B2,
}

impl Transition {
    /// (ground, excited) basis indices.
    pub fn indices(self) -> (usize, usize) {
        match self {
            Transition::A1 => (0, 2),
            Transition::A2 => (1, 2),
            Transition::B1 => (0, 3),
            Transition::B2 => (1, 3),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Transition::A1 => "A1",
            Transition::A2 => "A2",
            Transition::B1 => "B1",
            Transition::B2 => "B2",
        }
    }

    pub fn all() -> [Transition; 4] {
        [Transition::A1, Transition::A2, Transition::B1, Transition::B2]
    }
}

impl std::str::FromStr for Transition {
    type Err = SequenceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A1" => Ok(Transition::A1),
            "A2" => Ok(Transition::A2),
            "B1" => Ok(Transition::B1),
            "B2" => Ok(Transition::B2),
            other => Err(SequenceError::InvalidInput(format!("unknown transition {other:?}"))),
        }
    }
}

/// Off-resonant coupling of tone 1 from `|1⟩` to `eB`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spectator {
    /// Rabi frequency relative to tone 1 on A1.
    pub ratio: f64,
    /// `E(eB) − E(eA)`, rad/ns.
    pub excited_splitting: f64,
}

/// Bichromatic Raman drive on A1 (tone 1) and A2 (tone 2). Rates in rad/ns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RamanDrive {
    pub omega_1: f64,
    pub omega_2: f64,
    /// Common one-photon detuning Δ.
    pub detuning: f64,
    /// Additional two-photon detuning δ.
    pub two_photon_detuning: f64,
    pub spectator: Option<Spectator>,
    /// Retune tone 2 to cancel the differential AC-Stark shift.
    pub compensate_light_shift: bool,
}

impl RamanDrive {
    pub fn symmetric(omega: f64, detuning: f64) -> Self {
        Self {
            omega_1: omega,
            omega_2: omega,
            detuning,
            two_photon_detuning: 0.0,
            spectator: None,
            compensate_light_shift: false,
        }
    }

    /// Equal tones whose exact two-photon Rabi frequency is `raman` (rad/ns).
    pub fn calibrated(raman: f64, detuning: f64) -> Self {
        let omega = (2.0 * raman * (raman + detuning.abs())).sqrt();
        Self::symmetric(omega, detuning)
    }

    /// Equal tones rotating by `angle` in `duration` ns with `Δ = k·Ω`.
    pub fn for_rotation(angle: f64, duration: f64, delta_over_omega: f64) -> Self {
        let s = angle / duration;
        let k = delta_over_omega;
        let omega = 2.0 * s / ((k * k + 2.0).sqrt() - k);
        Self::symmetric(omega, k * omega)
    }

    pub fn with_spectator(mut self, spectator: Spectator) -> Self {
        self.spectator = Some(spectator);
        self.compensate_light_shift = true;
        self
    }

    /// Multiplies both tone amplitudes by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.omega_1 *= factor;
        self.omega_2 *= factor;
        self
    }

    /// Resonant two-photon Rabi frequency; exact for equal tones,
    /// `Ω₁Ω₂/(2Δ)` to leading order otherwise.
    pub fn effective_rabi(&self) -> f64 {
        let (a, b, d) = (self.omega_1, self.omega_2, self.detuning.abs());
        let bright = 0.5 * ((d * d + a * a + b * b).sqrt() - d);
        if a * a + b * b == 0.0 {
            return 0.0;
        }
        bright * 2.0 * a * b / (a * a + b * b)
    }

    pub fn drives(&self) -> Vec<Drive> {
        let mut drives = vec![
            Drive::new(self.omega_1, self.detuning, 0, 2),
            Drive::new(self.omega_2, self.detuning, 1, 2),
        ];
        if let Some(s) = self.spectator {
            drives.push(Drive::new(s.ratio * self.omega_1, self.detuning - s.excited_splitting, 0, 3));
        }
        drives
    }

    /// Second-order AC-Stark shifts of `|1⟩` and `|2⟩`.
    pub fn light_shifts(&self) -> Result<[f64; 2], SequenceError> {
        let mut shifts = [0.0; 2];
        for d in self.drives() {
            if d.rabi == 0.0 {
                continue;
            }
            if d.detuning == 0.0 {
                return Err(SequenceError::InvalidInput(
                    "light-shift compensation needs detuned tones".into(),
                ));
            }
            shifts[d.ground] += d.rabi * d.rabi / (4.0 * d.detuning);
        }
        Ok(shifts)
    }

    /// Two-photon detuning passed to the model, including compensation.
    pub fn applied_two_photon_detuning(&self) -> Result<f64, SequenceError> {
        let mut x = self.two_photon_detuning;
        if self.compensate_light_shift {
            let s = self.light_shifts()?;
            x += s[1] - s[0];
        }
        Ok(x)
    }

    pub fn model(&self, rates: &RateSet, extra_detuning: f64) -> Result<LindbladModel, SequenceError> {
        let x = self.applied_two_photon_detuning()? + extra_detuning;
        Ok(build_driven_model(&self.drives(), rates, x)?)
    }

    fn describe(&self, params: &mut BTreeMap<String, f64>) {
        params.insert("omega_1_rad_per_ns".into(), self.omega_1);
        params.insert("omega_2_rad_per_ns".into(), self.omega_2);
        params.insert("detuning_rad_per_ns".into(), self.detuning);
        params.insert("two_photon_detuning_rad_per_ns".into(), self.two_photon_detuning);
        params.insert("effective_rabi_rad_per_ns".into(), self.effective_rabi());
        if let Some(s) = self.spectator {
            params.insert("spectator_ratio".into(), s.ratio);
            params.insert("spectator_splitting_rad_per_ns".into(), s.excited_splitting);
        }
    }
}

fn describe_rates(rates: &RateSet, params: &mut BTreeMap<String, f64>) {
    params.insert("gamma_rad_per_ns".into(), rates.gamma_rad);
    params.insert("gamma_spin_relax_per_ns".into(), rates.gamma_spin_relax);
    params.insert("up_down_ratio".into(), rates.up_down_ratio);
    params.insert("gamma_phi_per_ns".into(), rates.gamma_phi);
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceMeta {
    pub sequence: String,
    pub params: BTreeMap<String, f64>,
    pub seed: Option<u64>,
    pub trajectories: usize,
}

/// Universal result record of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTrace {
    /// Column name of the abscissa, with unit, e.g. `delay_ns`.
    pub label: String,
    pub abscissa: Vec<f64>,
    pub signal: Vec<f64>,
    /// Standard error per point for Monte Carlo averages.
    pub stderr: Option<Vec<f64>>,
    pub meta: TraceMeta,
    pub physicality: Physicality,
}

impl ExperimentTrace {
    pub fn validate(&self) -> Result<(), SequenceError> {
        if self.abscissa.len() != self.signal.len()
            || self.stderr.as_ref().is_some_and(|s| s.len() != self.signal.len())
        {
            return Err(SequenceError::InvalidInput("trace columns differ in length".into()));
        }
        if self.abscissa.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SequenceError::InvalidInput("abscissa is not strictly increasing".into()));
        }
        Ok(())
    }

    /// Comma-separated table with a header row, shortest round-trip float
    /// formatting and LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},signal", self.label);
        if self.stderr.is_some() {
            out.push_str(",stderr");
        }
        out.push('\n');
        for i in 0..self.abscissa.len() {
            out.push_str(&format!("{:?},{:?}", self.abscissa[i], self.signal[i]));
            if let Some(se) = &self.stderr {
                out.push_str(&format!(",{:?}", se[i]));
            }
            out.push('\n');
        }
        out
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), SequenceError> {
    if !(v.is_finite() && v > 0.0) {
        return Err(SequenceError::InvalidInput(format!("{name} must be > 0, got {v}")));
    }
    Ok(())
}

fn check_grid(name: &str, v: &[f64], min: f64) -> Result<(), SequenceError> {
    if v.is_empty() {
        return Err(SequenceError::InvalidInput(format!("{name} is empty")));
    }
    if v.iter().any(|x| !(x.is_finite() && *x >= min)) || v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SequenceError::InvalidInput(format!(
            "{name} must be strictly increasing and >= {min}"
        )));
    }
    Ok(())
}

/// Clamps round-off negatives of populations and rates.
fn non_negative(v: f64) -> f64 {
    if v < 0.0 && v > -1e-9 {
        0.0
    } else {
        v
    }
}

/// Piecewise-constant segment of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub duration: f64,
    pub drives: Vec<Drive>,
    pub two_photon_detuning: f64,
    /// Exponential amplitude factor `exp(−t/τ)` on fluorescence recorded
    /// during this segment.
    pub falling_edge_tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PulseSchedule {
    pub segments: Vec<Segment>,
}

impl PulseSchedule {
    pub fn validate(&self) -> Result<(), SequenceError> {
        for (i, s) in self.segments.iter().enumerate() {
            check_positive(&format!("segment {i} duration"), s.duration)?;
            if let Some(tau) = s.falling_edge_tau {
                check_positive(&format!("segment {i} falling edge"), tau)?;
            }
        }
        if !self.total_duration().is_finite() {
            return Err(SequenceError::InvalidInput("schedule duration is not finite".into()));
        }
        Ok(())
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// State after each segment, using exact segment propagators.
    pub fn propagate(&self, rates: &RateSet, rho0: &DensityMatrix) -> Result<Vec<DensityMatrix>, SequenceError> {
        self.validate()?;
        let mut rho = DensityMatrix::checked(rho0.0)?;
        let mut out = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            let model = build_driven_model(&s.drives, rates, s.two_photon_detuning)?;
            rho = Propagator::new(&model, s.duration).apply(&rho);
            out.push(rho);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RabiConfig {
    pub drive: RamanDrive,
    pub rates: RateSet,
    /// ns.
    pub pulse_length: f64,
    /// ns.
    pub time_step: f64,
    pub falling_edge_tau: Option<f64>,
    pub tolerance: f64,
}

/// Fluorescence during a single bichromatic pulse, starting in `|1⟩`.
pub fn rabi_experiment(cfg: &RabiConfig) -> Result<ExperimentTrace, SequenceError> {
    check_positive("pulse_length", cfg.pulse_length)?;
    check_positive("time_step", cfg.time_step)?;
    if cfg.time_step > cfg.pulse_length {
        return Err(SequenceError::InvalidInput("time_step exceeds pulse_length".into()));
    }
    let model = cfg.drive.model(&cfg.rates, 0.0)?;
    let n = (cfg.pulse_length / cfg.time_step + 1e-9).floor() as usize + 1;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * cfg.time_step).collect();
    let traj = evolve_sampled(&model, &DensityMatrix::pure(0), &times, cfg.tolerance)?;
    let mut signal = fluorescence(&traj.states, &cfg.rates);
    if let Some(tau) = cfg.falling_edge_tau {
        check_positive("falling_edge_tau", tau)?;
        for (s, t) in signal.iter_mut().zip(&times) {
            *s *= (-t / tau).exp();
        }
    }
    let mut params = BTreeMap::new();
    cfg.drive.describe(&mut params);
    describe_rates(&cfg.rates, &mut params);
    params.insert("pulse_length_ns".into(), cfg.pulse_length);
    params.insert("tolerance".into(), cfg.tolerance);
    if let Some(tau) = cfg.falling_edge_tau {
        params.insert("falling_edge_tau_ns".into(), tau);
    }
    Ok(ExperimentTrace {
        label: "time_ns".into(),
        abscissa: times,
        signal: signal.into_iter().map(non_negative).collect(),
        stderr: None,
        meta: TraceMeta {
            sequence: "rabi".into(),
            params,
            seed: None,
            trajectories: 1,
        },
        physicality: traj.physicality,
    })
}

/// Readout versus the phase φ of the last pulse: `c + Re(q·e^{iφ})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fringe {
    pub c: f64,
    pub q: C64,
}

impl Fringe {
    pub fn envelope(&self) -> f64 {
        self.c + self.q.norm()
    }

    pub fn at_zero_phase(&self) -> f64 {
        self.c + self.q.re
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutMode {
    /// Maximum over a phase scan of the last pulse.
    Envelope,
    /// Raw readout at zero relative phase.
    Fringes,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoherenceKind {
    Ramsey,
    /// Hahn echo with a refocusing pulse of this duration (ns).
    Echo { pi: f64 },
}

/// Ramsey or Hahn-echo sequence starting in `|1⟩` and reading the `|2⟩`
/// population after the last π/2 pulse. Delays are total free evolution
/// times.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceExperiment {
    pub drive: RamanDrive,
    pub rates: RateSet,
    pub pi_half: f64,
    pub kind: CoherenceKind,
    pub delays: Vec<f64>,
    pub mode: ReadoutMode,
    /// Splitting pieces per pulse for noise inside pulses.
    pub pulse_pieces: usize,
}

const PHASE_SAMPLES: usize = 4;

pub struct PreparedCoherence {
    half_piece: Propagator,
    pi_piece: Option<Propagator>,
    free: Vec<Propagator>,
}

fn check_rotation(drive: &RamanDrive, duration: f64, expected: f64) -> Result<(), SequenceError> {
    let actual = drive.effective_rabi() * duration;
    if (actual - expected).abs() > 0.01 * expected {
        return Err(SequenceError::MiscalibratedPulse { expected, actual });
    }
    Ok(())
}

fn phase_rotate(v: &mut VecRho, phi: f64) {
    if phi == 0.0 {
        return;
    }
    let u = Complex::from_polar(1.0, phi);
    // ρ → UρU† with U = diag(1, e^{iφ}, 1, 1); index = 4·col + row
    for k in 0..4 {
        if k != 1 {
            v[4 * k + 1] *= u;
            v[4 + k] *= u.conj();
        }
    }
}

impl CoherenceExperiment {
    pub fn ramsey(
        drive: RamanDrive,
        rates: RateSet,
        pi_half: f64,
        delays: Vec<f64>,
        mode: ReadoutMode,
    ) -> Result<Self, SequenceError> {
        let exp = Self {
            drive,
            rates,
            pi_half,
            kind: CoherenceKind::Ramsey,
            delays,
            mode,
            pulse_pieces: 8,
        };
        exp.validate()?;
        Ok(exp)
    }

    pub fn echo(
        drive: RamanDrive,
        rates: RateSet,
        pi_half: f64,
        pi: f64,
        delays: Vec<f64>,
    ) -> Result<Self, SequenceError> {
        let exp = Self {
            drive,
            rates,
            pi_half,
            kind: CoherenceKind::Echo { pi },
            delays,
            mode: ReadoutMode::Envelope,
            pulse_pieces: 8,
        };
        exp.validate()?;
        Ok(exp)
    }

    pub fn validate(&self) -> Result<(), SequenceError> {
        check_positive("pi_half", self.pi_half)?;
        check_grid("delays", &self.delays, 0.0)?;
        if self.pulse_pieces == 0 {
            return Err(SequenceError::InvalidInput("pulse_pieces must be >= 1".into()));
        }
        check_rotation(&self.drive, self.pi_half, PI / 2.0)?;
        if let CoherenceKind::Echo { pi } = self.kind {
            check_positive("pi", pi)?;
            check_rotation(&self.drive, pi, PI)?;
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            CoherenceKind::Ramsey => "ramsey",
            CoherenceKind::Echo { .. } => "echo",
        }
    }

    fn pulse_time(&self) -> f64 {
        match self.kind {
            CoherenceKind::Ramsey => 2.0 * self.pi_half,
            CoherenceKind::Echo { pi } => 2.0 * self.pi_half + pi,
        }
    }

    /// Length of the longest sequence, ns.
    pub fn horizon(&self) -> f64 {
        self.pulse_time() + self.delays.last().copied().unwrap_or(0.0)
    }

    pub fn prepare(&self) -> Result<PreparedCoherence, SequenceError> {
        self.validate()?;
        let pulse = self.drive.model(&self.rates, 0.0)?;
        let pl = pulse.superoperator();
        let k = self.pulse_pieces as f64;
        let free_model = build_driven_model(&[], &self.rates, self.drive.applied_two_photon_detuning()?)?;
        let fl = free_model.superoperator();
        let free_fraction = match self.kind {
            CoherenceKind::Ramsey => 1.0,
            CoherenceKind::Echo { .. } => 0.5,
        };
        Ok(PreparedCoherence {
            half_piece: Propagator::from_superoperator(&pl, self.pi_half / k),
            pi_piece: match self.kind {
                CoherenceKind::Ramsey => None,
                CoherenceKind::Echo { pi } => Some(Propagator::from_superoperator(&pl, pi / k)),
            },
            free: self
                .delays
                .iter()
                .map(|&d| Propagator::from_superoperator(&fl, free_fraction * d))
                .collect(),
        })
    }

    fn pulse(&self, v: &mut VecRho, piece: &Propagator, duration: f64, start: f64, path: &DetuningPath) {
        let k = self.pulse_pieces;
        let h = duration / k as f64;
        for i in 0..k {
            let t0 = start + i as f64 * h;
            // symmetric splitting of the detuning noise around each piece
            phase_rotate(v, path.integral(t0, t0 + 0.5 * h));
            *v = piece.matrix * *v;
            phase_rotate(v, path.integral(t0 + 0.5 * h, t0 + h));
        }
    }

    fn free(&self, v: &mut VecRho, prop: &Propagator, duration: f64, start: f64, path: &DetuningPath) {
        *v = prop.matrix * *v;
        phase_rotate(v, path.integral(start, start + duration));
    }

    /// Phase-resolved readout at every delay for one detuning realization.
    pub fn run(&self, prep: &PreparedCoherence, path: &DetuningPath, physicality: &mut Physicality) -> Vec<Fringe> {
        let start = DensityMatrix::pure(0).to_vec();
        self.delays
            .iter()
            .zip(&prep.free)
            .map(|(&delay, free)| {
                let mut v = start;
                let mut t = 0.0;
                self.pulse(&mut v, &prep.half_piece, self.pi_half, t, path);
                t += self.pi_half;
                match self.kind {
                    CoherenceKind::Ramsey => {
                        self.free(&mut v, free, delay, t, path);
                        t += delay;
                    }
                    CoherenceKind::Echo { pi } => {
                        let pi_piece = prep.pi_piece.as_ref().expect("echo has a π propagator");
                        self.free(&mut v, free, 0.5 * delay, t, path);
                        t += 0.5 * delay;
                        self.pulse(&mut v, pi_piece, pi, t, path);
                        t += pi;
                        self.free(&mut v, free, 0.5 * delay, t, path);
                        t += 0.5 * delay;
                    }
                }
                let mut c = 0.0;
                let mut q = C64::new(0.0, 0.0);
                for m in 0..PHASE_SAMPLES {
                    let phi = 2.0 * PI * m as f64 / PHASE_SAMPLES as f64;
                    let mut w = v;
                    phase_rotate(&mut w, phi);
                    self.pulse(&mut w, &prep.half_piece, self.pi_half, t, path);
                    let rho = DensityMatrix::from_vec(&w);
                    physicality.record(&rho);
                    let p = rho.population(1);
                    c += p / PHASE_SAMPLES as f64;
                    q += Complex::from_polar(2.0 * p / PHASE_SAMPLES as f64, -phi);
                }
                Fringe { c, q }
            })
            .collect()
    }

    pub fn signal(&self, fringes: &[Fringe]) -> Vec<f64> {
        fringes
            .iter()
            .map(|f| match self.mode {
                ReadoutMode::Envelope => f.envelope(),
                ReadoutMode::Fringes => f.at_zero_phase(),
            })
            .map(non_negative)
            .collect()
    }

    pub fn params(&self) -> BTreeMap<String, f64> {
        let mut params = BTreeMap::new();
        self.drive.describe(&mut params);
        describe_rates(&self.rates, &mut params);
        params.insert("pi_half_ns".into(), self.pi_half);
        if let CoherenceKind::Echo { pi } = self.kind {
            params.insert("pi_ns".into(), pi);
        }
        params.insert("pulse_pieces".into(), self.pulse_pieces as f64);
        params.insert("envelope_mode".into(), if self.mode == ReadoutMode::Envelope { 1.0 } else { 0.0 });
        params
    }

    /// Noise-free run.
    pub fn execute(&self) -> Result<ExperimentTrace, SequenceError> {
        let prep = self.prepare()?;
        let mut physicality = Physicality::default();
        let fringes = self.run(&prep, &DetuningPath::zero(), &mut physicality);
        Ok(ExperimentTrace {
            label: "delay_ns".into(),
            abscissa: self.delays.clone(),
            signal: self.signal(&fringes),
            stderr: None,
            meta: TraceMeta {
                sequence: self.name().into(),
                params: self.params(),
                seed: None,
                trajectories: 1,
            },
            physicality,
        })
    }
}

pub fn ramsey_experiment(
    drive: RamanDrive,
    rates: RateSet,
    pi_half: f64,
    delays: Vec<f64>,
    mode: ReadoutMode,
) -> Result<ExperimentTrace, SequenceError> {
    CoherenceExperiment::ramsey(drive, rates, pi_half, delays, mode)?.execute()
}

pub fn hahn_echo_experiment(
    drive: RamanDrive,
    rates: RateSet,
    pi_half: f64,
    pi: f64,
    delays: Vec<f64>,
) -> Result<ExperimentTrace, SequenceError> {
    CoherenceExperiment::echo(drive, rates, pi_half, pi, delays)?.execute()
}

/// Two-pulse optical-pumping relaxation measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct T1Config {
    pub rates: RateSet,
    pub pump: Transition,
    pub probe: Transition,
    /// rad/ns.
    pub pump_rabi: f64,
    /// ns.
    pub pump_duration: f64,
    pub probe_rabi: f64,
    pub probe_duration: f64,
    /// Waits between pump and probe, ns.
    pub delays: Vec<f64>,
    pub temperature_k: f64,
}

impl T1Config {
    /// B1 pump, A2 probe, with thermal rates for the given T₁ and temperature.
    pub fn thermal(t1_ns: f64, temperature_k: f64, spin_splitting_ghz: f64, delays: Vec<f64>) -> Self {
        Self {
            rates: RateSet::thermal(1.0 / 1.7, t1_ns, spin_splitting_ghz, temperature_k, 0.0),
            pump: Transition::B1,
            probe: Transition::A2,
            pump_rabi: 0.5,
            pump_duration: 200.0,
            probe_rabi: 0.5,
            probe_duration: 200.0,
            delays,
            temperature_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct T1Result {
    pub trace: ExperimentTrace,
    pub fit: Result<FitResult, FitError>,
    /// Pumped ground population reached, relative to its steady value.
    pub pumped_fraction: f64,
}

impl T1Result {
    pub fn t1(&self) -> Option<f64> {
        self.fit.as_ref().ok().map(|f| f.time_constant())
    }
}

fn single_tone(rabi: f64, t: Transition) -> Drive {
    let (g, e) = t.indices();
    Drive::new(rabi, 0.0, g, e)
}

fn ground_start(rates: &RateSet) -> DensityMatrix {
    let free = build_driven_model(&[], rates, 0.0).expect("empty drive set is valid");
    steady_state(&free).unwrap_or_else(|_| DensityMatrix::mixed_ground())
}

/// Mean fluorescence over `[0, window]` of a constant drive, trapezoid rule
/// on 21 points.
fn windowed_fluorescence(model: &LindbladModel, rates: &RateSet, rho: &DensityMatrix, window: f64, physicality: &mut Physicality) -> f64 {
    let n = 20;
    let step = Propagator::new(model, window / n as f64);
    let mut state = *rho;
    let mut sum = 0.0;
    for i in 0..=n {
        let f = rates.gamma_rad * state.excited_population();
        sum += if i == 0 || i == n { 0.5 * f } else { f };
        physicality.record(&state);
        if i < n {
            state = step.apply(&state);
        }
    }
    sum / n as f64
}

pub fn optical_pumping_t1(cfg: &T1Config) -> Result<T1Result, SequenceError> {
    check_positive("pump_rabi", cfg.pump_rabi)?;
    check_positive("pump_duration", cfg.pump_duration)?;
    check_positive("probe_rabi", cfg.probe_rabi)?;
    check_positive("probe_duration", cfg.probe_duration)?;
    check_grid("delays", &cfg.delays, 0.0)?;
    let rates = &cfg.rates;
    let rho0 = ground_start(rates);
    let pump = build_driven_model(&[single_tone(cfg.pump_rabi, cfg.pump)], rates, 0.0)?;
    let pumped = Propagator::new(&pump, cfg.pump_duration).apply(&rho0);
    let target = 1 - cfg.pump.indices().0;
    let steady = steady_state(&pump)?.population(target);
    let pumped_fraction = pumped.population(target) / steady;
    if pumped_fraction < 0.99 {
        return Err(SequenceError::PumpTooShort {
            reached: pumped_fraction,
            steady,
        });
    }
    let free = build_driven_model(&[], rates, 0.0)?;
    let fl = free.superoperator();
    let probe = build_driven_model(&[single_tone(cfg.probe_rabi, cfg.probe)], rates, 0.0)?;
    let window = 0.05 * cfg.probe_duration;
    let results: Vec<(f64, Physicality)> = cfg
        .delays
        .par_iter()
        .map(|&d| {
            let mut phys = Physicality::default();
            let rho = Propagator::from_superoperator(&fl, d).apply(&pumped);
            let s = windowed_fluorescence(&probe, rates, &rho, window, &mut phys);
            (non_negative(s), phys)
        })
        .collect();
    let mut physicality = Physicality::of(&pumped);
    let mut signal = Vec::with_capacity(results.len());
    for (s, p) in results {
        physicality.merge(&p);
        signal.push(s);
    }
    let fit = fit_exponential(&cfg.delays, &signal, ExpMode::Recovery);
    let mut params = BTreeMap::new();
    describe_rates(rates, &mut params);
    params.insert("pump_rabi_rad_per_ns".into(), cfg.pump_rabi);
    params.insert("pump_duration_ns".into(), cfg.pump_duration);
    params.insert("probe_rabi_rad_per_ns".into(), cfg.probe_rabi);
    params.insert("probe_duration_ns".into(), cfg.probe_duration);
    params.insert("temperature_k".into(), cfg.temperature_k);
    Ok(T1Result {
        trace: ExperimentTrace {
            label: "delay_ns".into(),
            abscissa: cfg.delays.clone(),
            signal,
            stderr: None,
            meta: TraceMeta {
                sequence: format!("t1_pump_{}_probe_{}", cfg.pump.label(), cfg.probe.label()),
                params,
                seed: None,
                trajectories: 1,
            },
            physicality,
        },
        fit,
        pumped_fraction,
    })
}

/// Single-laser (optionally repumped) excitation scan over the four lines
/// between the lowest ground and excited doublets.
#[derive(Debug, Clone, PartialEq)]
pub struct PleConfig {
    pub field: MagneticField,
    pub params: SiVParams,
    /// Ground relaxation, dephasing and branching; `gamma_rad` is taken from
    /// `params`.
    pub rates: RateSet,
    /// Rabi frequency on a unit-strength line, rad/ns.
    pub probe_rabi: f64,
    /// Probe frequencies relative to the zero-field line, GHz.
    pub frequencies: Vec<f64>,
    /// Incoherent `|1⟩ ↔ |2⟩` mixing rate from a second laser, 1/ns.
    pub repump_rate: Option<f64>,
}

/// Line positions (GHz) and strengths of the four lowest-doublet lines.
pub fn lowest_lines(field: &MagneticField, params: &SiVParams) -> Result<Vec<(Transition, f64, f64)>, SequenceError> {
    let (_, _, table) = optical_structure(field, params)?;
    Ok(Transition::all()
        .iter()
        .map(|&t| {
            let line = table.get(t.label()).expect("lowest-doublet labels exist");
            (t, line.frequency_offset_ghz, line.relative_strength)
        })
        .collect())
}

struct PleSetup {
    lines: Vec<(Transition, f64, f64)>,
    rates: RateSet,
}

impl PleConfig {
    fn setup(&self) -> Result<PleSetup, SequenceError> {
        check_positive("probe_rabi", self.probe_rabi)?;
        if let Some(r) = self.repump_rate {
            if !(r.is_finite() && r >= 0.0) {
                return Err(SequenceError::InvalidInput(format!("repump rate must be >= 0, got {r}")));
            }
        }
        let rates = RateSet {
            gamma_rad: self.params.gamma_rad,
            ..self.rates
        };
        Ok(PleSetup {
            lines: lowest_lines(&self.field, &self.params)?,
            rates,
        })
    }

    fn model_at(&self, setup: &PleSetup, frequency_ghz: f64) -> Result<LindbladModel, SequenceError> {
        let drives: Vec<Drive> = setup
            .lines
            .iter()
            .map(|&(t, f, s)| {
                let (g, e) = t.indices();
                Drive::new(self.probe_rabi * s.sqrt(), 2.0 * PI * (frequency_ghz - f), g, e)
            })
            .collect();
        let mut model = build_driven_model(&drives, &setup.rates, 0.0)?;
        if let Some(r) = self.repump_rate {
            let mut up = crate::levels::Mat4::zeros();
            up[(1, 0)] = C64::new(1.0, 0.0);
            model.push_channel(up, r);
            model.push_channel(up.transpose(), r);
        }
        Ok(model)
    }

    fn fluorescence_at(&self, setup: &PleSetup, frequency_ghz: f64) -> Result<(f64, DensityMatrix), SequenceError> {
        let model = self.model_at(setup, frequency_ghz)?;
        let ss = steady_state(&model)?;
        Ok((non_negative(setup.rates.gamma_rad * ss.excited_population()), ss))
    }
}

pub fn ple_scan(cfg: &PleConfig) -> Result<ExperimentTrace, SequenceError> {
    check_grid("frequencies", &cfg.frequencies, f64::NEG_INFINITY)?;
    let setup = cfg.setup()?;
    let points: Vec<Result<(f64, DensityMatrix), SequenceError>> = cfg
        .frequencies
        .par_iter()
        .map(|&f| cfg.fluorescence_at(&setup, f))
        .collect();
    let mut signal = Vec::with_capacity(points.len());
    let mut physicality = Physicality::default();
    for p in points {
        let (s, rho) = p?;
        physicality.record(&rho);
        signal.push(s);
    }
    let mut params = BTreeMap::new();
    describe_rates(&setup.rates, &mut params);
    params.insert("field_tesla".into(), cfg.field.magnitude_tesla);
    params.insert("polar_angle_deg".into(), cfg.field.polar_angle_deg);
    params.insert("probe_rabi_rad_per_ns".into(), cfg.probe_rabi);
    params.insert("repump_rate_per_ns".into(), cfg.repump_rate.unwrap_or(0.0));
    Ok(ExperimentTrace {
        label: "frequency_ghz".into(),
        abscissa: cfg.frequencies.clone(),
        signal,
        stderr: None,
        meta: TraceMeta {
            sequence: "ple".into(),
            params,
            seed: None,
            trajectories: 1,
        },
        physicality,
    })
}

/// Steady-state fluorescence with the probe exactly on each line.
pub fn ple_line_heights(cfg: &PleConfig) -> Result<Vec<(Transition, f64)>, SequenceError> {
    let setup = cfg.setup()?;
    setup
        .lines
        .iter()
        .map(|&(t, f, _)| Ok((t, cfg.fluorescence_at(&setup, f)?.0)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub rates: RateSet,
    /// Must address `|2⟩` (A2 or B2).
    pub pump: Transition,
    pub pump_rabi: f64,
    pub pump_duration: f64,
    /// `|1⟩–|2⟩` splitting in rad/ns; the pump tone also drives the `|1⟩`
    /// line this far off resonance. Zero disables that coupling.
    pub ground_splitting: f64,
}

/// `ρ₁₁` after pumping from the maximally mixed ground state.
pub fn init_fidelity(cfg: &InitConfig) -> Result<f64, SequenceError> {
    let (g, e) = cfg.pump.indices();
    if g != 1 {
        return Err(SequenceError::InvalidInput(format!(
            "pump {} does not address |2>",
            cfg.pump.label()
        )));
    }
    if !(cfg.pump_duration.is_finite() && cfg.pump_duration >= 0.0) {
        return Err(SequenceError::InvalidInput("pump_duration must be >= 0".into()));
    }
    check_positive("pump_rabi", cfg.pump_rabi)?;
    let rho0 = DensityMatrix::mixed_ground();
    if cfg.pump_duration == 0.0 {
        return Ok(rho0.population(0));
    }
    let mut drives = vec![Drive::new(cfg.pump_rabi, 0.0, 1, e)];
    if cfg.ground_splitting > 0.0 {
        drives.push(Drive::new(cfg.pump_rabi, -cfg.ground_splitting, 0, e));
    }
    let model = build_driven_model(&drives, &cfg.rates, 0.0)?;
    Ok(Propagator::new(&model, cfg.pump_duration).apply(&rho0).population(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{fit_damped_sinusoid, fit_edged_sinusoid, fit_exponential};

    fn ramsey_drive() -> RamanDrive {
        RamanDrive::for_rotation(PI / 2.0, 4.0, 10.0)
    }

    fn delays(max: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| max * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn rotation_constructor_is_exact() {
        let d = ramsey_drive();
        assert!((d.effective_rabi() * 4.0 - PI / 2.0).abs() < 1e-12);
        assert!((d.detuning / d.omega_1 - 10.0).abs() < 1e-12);
        let c = RamanDrive::calibrated(0.01, 20.0);
        assert!((c.effective_rabi() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn two_pi_half_pulses_invert() {
        let d = ramsey_drive();
        let rates = RateSet { gamma_rad: 0.0, ..RateSet::default() };
        let model = d.model(&rates, 0.0).unwrap();
        let rho = Propagator::new(&model, 8.0).apply(&DensityMatrix::pure(0));
        assert!(rho.population(1) >= 0.99, "{}", rho.population(1));
    }

    #[test]
    fn ramsey_without_dephasing_is_flat() {
        let rates = RateSet { gamma_rad: 0.0, ..RateSet::default() };
        let t = ramsey_experiment(ramsey_drive(), rates, 4.0, delays(150.0, 16), ReadoutMode::Envelope).unwrap();
        let mean = t.signal.iter().sum::<f64>() / t.signal.len() as f64;
        assert!(t.signal.iter().all(|s| (s / mean - 1.0).abs() < 0.01));
        assert!(t.physicality.is_physical());
    }

    #[test]
    fn ramsey_envelope_tracks_markovian_dephasing() {
        let rates = RateSet { gamma_phi: 1.0 / 29.0, ..RateSet::default() };
        let t = ramsey_experiment(ramsey_drive(), rates, 4.0, delays(150.0, 31), ReadoutMode::Envelope).unwrap();
        let fit = fit_exponential(&t.abscissa, &t.signal, ExpMode::Decay).unwrap();
        assert!((fit.time_constant() / 29.0 - 1.0).abs() < 0.05, "{}", fit.time_constant());
    }

    #[test]
    fn ramsey_fringes_oscillate_at_two_photon_detuning() {
        let detuning = 2.0 * PI * 0.05;
        let drive = RamanDrive { two_photon_detuning: detuning, ..ramsey_drive() };
        let rates = RateSet { gamma_rad: 0.0, ..RateSet::default() };
        let t = ramsey_experiment(drive, rates, 4.0, delays(120.0, 241), ReadoutMode::Fringes).unwrap();
        let fit = fit_damped_sinusoid(&t.abscissa, &t.signal).unwrap();
        assert!((fit.get("frequency") / 0.05 - 1.0).abs() < 0.02, "{}", fit.get("frequency"));
    }

    #[test]
    fn miscalibrated_pulse_rejected() {
        let r = ramsey_experiment(ramsey_drive(), RateSet::default(), 4.1, delays(10.0, 3), ReadoutMode::Envelope);
        assert!(matches!(r, Err(SequenceError::MiscalibratedPulse { .. })));
        let r = hahn_echo_experiment(ramsey_drive(), RateSet::default(), 4.0, 7.8, delays(10.0, 3));
        assert!(matches!(r, Err(SequenceError::MiscalibratedPulse { .. })));
    }

    #[test]
    fn markovian_echo_matches_ramsey() {
        let rates = RateSet { gamma_phi: 1.0 / 29.0, ..RateSet::default() };
        let x = delays(150.0, 31);
        let r = ramsey_experiment(ramsey_drive(), rates, 4.0, x.clone(), ReadoutMode::Envelope).unwrap();
        let e = hahn_echo_experiment(ramsey_drive(), rates, 4.0, 8.0, x.clone()).unwrap();
        let tr = fit_exponential(&x, &r.signal, ExpMode::Decay).unwrap().time_constant();
        let te = fit_exponential(&x, &e.signal, ExpMode::Decay).unwrap().time_constant();
        assert!((te / tr - 1.0).abs() < 0.1, "{te} vs {tr}");
    }

    #[test]
    fn phase_scan_reconstructs_readout() {
        // the four-sample fringe must reproduce a direct readout at any phase
        let rates = RateSet { gamma_phi: 0.01, ..RateSet::default() };
        let exp = CoherenceExperiment::ramsey(ramsey_drive(), rates, 4.0, vec![17.0], ReadoutMode::Envelope).unwrap();
        let prep = exp.prepare().unwrap();
        let fringe = exp.run(&prep, &DetuningPath::zero(), &mut Physicality::default())[0];
        let model = ramsey_drive().model(&rates, 0.0).unwrap();
        let free = build_driven_model(&[], &rates, 0.0).unwrap();
        for phi in [0.3, 1.9, 4.0] {
            let mut rho = Propagator::new(&model, 4.0).apply(&DensityMatrix::pure(0));
            rho = Propagator::new(&free, 17.0).apply(&rho);
            let mut v = rho.to_vec();
            phase_rotate(&mut v, phi);
            let out = Propagator::new(&model, 4.0).apply(&DensityMatrix::from_vec(&v));
            let predicted = fringe.c + (fringe.q * Complex::from_polar(1.0, phi)).re;
            assert!((out.population(1) - predicted).abs() < 1e-10);
        }
    }

    #[test]
    fn rabi_frequency_and_scaling() {
        let raman = 2.0 * PI * 1.54e-3;
        let drive = RamanDrive::calibrated(raman, 2.0 * PI * 3.0).with_spectator(Spectator {
            ratio: 1.0,
            excited_splitting: 2.0 * PI * 6.0,
        });
        let cfg = RabiConfig {
            drive,
            rates: RateSet::default(),
            pulse_length: 3000.0,
            time_step: 2.0,
            falling_edge_tau: None,
            tolerance: 1e-7,
        };
        let t = rabi_experiment(&cfg).unwrap();
        let f = fit_damped_sinusoid(&t.abscissa, &t.signal).unwrap().get("frequency");
        assert!((f / 1.54e-3 - 1.0).abs() < 0.02, "{f}");
        assert!(t.physicality.is_physical());

        let doubled = RabiConfig { drive: drive.scaled(2f64.sqrt()), ..cfg.clone() };
        let t2 = rabi_experiment(&doubled).unwrap();
        let f2 = fit_damped_sinusoid(&t2.abscissa, &t2.signal).unwrap().get("frequency");
        assert!((f2 / f - 2.0).abs() < 0.04, "{f2} vs {f}");

        let edged = RabiConfig { falling_edge_tau: Some(2000.0), ..cfg };
        let t3 = rabi_experiment(&edged).unwrap();
        let f3 = fit_edged_sinusoid(&t3.abscissa, &t3.signal).unwrap().get("frequency");
        assert!((f3 / f - 1.0).abs() < 0.02);
        let head: f64 = t3.signal[..300].iter().sum();
        let tail: f64 = t3.signal[t3.signal.len() - 300..].iter().sum();
        assert!(tail < head);
    }

    #[test]
    fn t1_recovery_without_relaxation_is_flat() {
        let cfg = T1Config::thermal(f64::INFINITY, 0.012, 5.88, delays(2000.0, 12).into_iter().map(|d| d + 20.0).collect());
        let r = optical_pumping_t1(&cfg).unwrap();
        let first = r.trace.signal[0];
        assert!(r.trace.signal.iter().all(|s| (s / first - 1.0).abs() < 0.01));
    }

    #[test]
    fn t1_recovers_injected_time() {
        let d: Vec<f64> = (0..30).map(|i| 20.0 + 1500.0 * i as f64 / 29.0).collect();
        let r = optical_pumping_t1(&T1Config::thermal(303.0, 3.7, 5.88, d)).unwrap();
        let t1 = r.t1().unwrap();
        assert!((t1 / 303.0 - 1.0).abs() < 0.05, "{t1}");
        assert!(r.pumped_fraction >= 0.99);
    }

    #[test]
    fn short_pump_rejected() {
        let mut cfg = T1Config::thermal(303.0, 3.7, 5.88, vec![20.0, 40.0]);
        cfg.pump_duration = 1.0;
        assert!(matches!(optical_pumping_t1(&cfg), Err(SequenceError::PumpTooShort { .. })));
    }

    #[test]
    fn init_fidelity_behaviour() {
        let rates = RateSet::thermal(1.0 / 1.7, 108_000.0, 5.88, 0.012, 0.0);
        let base = InitConfig {
            rates,
            pump: Transition::A2,
            pump_rabi: 0.3,
            pump_duration: 0.0,
            ground_splitting: 2.0 * PI * 5.88,
        };
        assert_eq!(init_fidelity(&base).unwrap(), 0.5);
        let mut prev = 0.5;
        for k in 0..12 {
            let f = init_fidelity(&InitConfig { pump_duration: 2f64.powi(k), ..base.clone() }).unwrap();
            assert!(f >= prev - 1e-12, "{k}: {f} < {prev}");
            prev = f;
        }
        assert!(prev >= 0.9993, "{prev}");
        assert!(init_fidelity(&InitConfig { pump: Transition::A1, ..base }).is_err());
    }

    fn ple_config(relax_t1: f64, temperature: f64, repump: Option<f64>) -> PleConfig {
        PleConfig {
            field: MagneticField::operating_point(),
            params: SiVParams::default(),
            rates: RateSet::thermal(1.0 / 1.7, relax_t1, 5.88, temperature, 0.0),
            probe_rabi: 0.1,
            frequencies: (0..=400).map(|i| -111.0 + 0.025 * i as f64).collect(),
            repump_rate: repump,
        }
    }

    #[test]
    fn ple_edges_vanish_and_pumping_suppresses_lines() {
        let cfg = ple_config(303.0, 3.7, None);
        let t = ple_scan(&cfg).unwrap();
        let max = t.signal.iter().copied().fold(0.0, f64::max);
        assert!(t.signal[0] < 1e-3 * max && t.signal[t.signal.len() - 1] < 1e-3 * max);
        let warm = ple_line_heights(&cfg).unwrap();
        let cold = ple_line_heights(&ple_config(108_000.0, 0.012, None)).unwrap();
        for ((t, w), (_, c)) in warm.iter().zip(&cold) {
            // cross lines stay partly bright through off-resonant excitation
            let bound = if matches!(t, Transition::A1 | Transition::B2) { 2.0 } else { 1.2 };
            assert!(w / c >= bound, "{t:?}: {w} vs {c}");
        }
        let repumped = ple_line_heights(&ple_config(108_000.0, 0.012, Some(0.01))).unwrap();
        for ((t, r), (_, c)) in repumped.iter().zip(&cold) {
            assert!(r > c, "{t:?}");
        }
    }

    #[test]
    fn csv_layout() {
        let t = ExperimentTrace {
            label: "delay_ns".into(),
            abscissa: vec![0.0, 2.5],
            signal: vec![1.0, 0.1],
            stderr: Some(vec![0.0, 1e-20]),
            meta: TraceMeta { sequence: "x".into(), params: BTreeMap::new(), seed: None, trajectories: 2 },
            physicality: Physicality::default(),
        };
        assert_eq!(t.to_csv(), "delay_ns,signal,stderr\n0.0,1.0,0.0\n2.5,0.1,1e-20\n");
    }

    #[test]
    fn schedule_propagation() {
        let schedule = PulseSchedule {
            segments: vec![
                Segment { duration: 4.0, drives: ramsey_drive().drives(), two_photon_detuning: 0.0, falling_edge_tau: None },
                Segment { duration: 4.0, drives: ramsey_drive().drives(), two_photon_detuning: 0.0, falling_edge_tau: None },
            ],
        };
        let rates = RateSet { gamma_rad: 0.0, ..RateSet::default() };
        let states = schedule.propagate(&rates, &DensityMatrix::pure(0)).unwrap();
        assert!(states[1].population(1) > 0.99);
        assert!((states[0].population(1) - 0.5).abs() < 0.02);
        let bad = PulseSchedule { segments: vec![Segment { duration: 0.0, drives: vec![], two_photon_detuning: 0.0, falling_edge_tau: None }] };
        assert!(bad.validate().is_err());
    }
}
