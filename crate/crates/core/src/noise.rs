//! Ornstein–Uhlenbeck detuning noise on the two-photon detuning, Monte Carlo
//! averaging of coherence experiments and calibration of the bath.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::Physicality;
use crate::fit::{fit_exponential, ExpMode, FitError};
use crate::levels::C64;
use crate::sequences::{CoherenceExperiment, ExperimentTrace, Fringe, ReadoutMode, SequenceError, TraceMeta};

pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha), stream = trajectory index";

/// Largest path step used for averaging, ns.
pub const MAX_PATH_STEP: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("invalid noise parameter: {0}")]
    InvalidParameter(String),
    #[error("time step {dt} exceeds tau_c/10 = {limit}")]
    StepTooCoarse { dt: f64, limit: f64 },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("calibration target unreachable: {0}")]
    Unreachable(String),
}

/// Stationary OU process with standard deviation `sigma` (rad/ns) and
/// correlation time `tau_c` (ns). `tau_c = ∞` is quasi-static noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OUProcess {
    pub sigma: f64,
    pub tau_c: f64,
}

impl OUProcess {
    pub fn new(sigma: f64, tau_c: f64) -> Result<Self, NoiseError> {
        let p = Self { sigma, tau_c };
        p.validate()?;
        Ok(p)
    }

    /// White-noise limit with dephasing rate `sigma²·tau_c`.
    pub fn with_dephasing_rate(rate: f64, tau_c: f64) -> Result<Self, NoiseError> {
        Self::new((rate / tau_c).sqrt(), tau_c)
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(NoiseError::InvalidParameter(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.tau_c > 0.0) {
            return Err(NoiseError::InvalidParameter(format!("tau_c must be > 0, got {}", self.tau_c)));
        }
        Ok(())
    }

    /// Path step used by [`average_with_noise`].
    pub fn path_step(&self) -> f64 {
        (self.tau_c / 10.0).min(MAX_PATH_STEP)
    }

    /// `n` samples spaced `dt`, exact discretization from a stationary start.
    pub fn sample_path<R: Rng + ?Sized>(&self, dt: f64, n: usize, rng: &mut R) -> Result<Vec<f64>, NoiseError> {
        self.validate()?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(NoiseError::InvalidParameter(format!("dt must be > 0, got {dt}")));
        }
        let limit = self.tau_c / 10.0;
        if dt > limit {
            return Err(NoiseError::StepTooCoarse { dt, limit });
        }
        let a = (-dt / self.tau_c).exp();
        let kick = self.sigma * (-(-2.0 * dt / self.tau_c).exp_m1()).sqrt();
        let mut out = Vec::with_capacity(n);
        if n == 0 {
            return Ok(out);
        }
        let mut x = self.sigma * rng.sample::<f64, _>(StandardNormal);
        out.push(x);
        for _ in 1..n {
            x = a * x + kick * rng.sample::<f64, _>(StandardNormal);
            out.push(x);
        }
        Ok(out)
    }
}

/// Generator for trajectory `index` of a run keyed by `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Detuning samples on a uniform grid with the running integral of the
/// linear interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct DetuningPath {
    dt: f64,
    values: Vec<f64>,
    cumulative: Vec<f64>,
}

impl DetuningPath {
    pub fn zero() -> Self {
        Self {
            dt: 1.0,
            values: Vec::new(),
            cumulative: Vec::new(),
        }
    }

    pub fn from_samples(dt: f64, values: Vec<f64>) -> Self {
        let mut cumulative = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                acc += 0.5 * dt * (values[i - 1] + v);
            }
            cumulative.push(acc);
        }
        Self { dt, values, cumulative }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn antiderivative(&self, t: f64) -> f64 {
        let n = self.values.len();
        if n == 0 {
            return 0.0;
        }
        if n == 1 {
            return self.values[0] * t;
        }
        let k = ((t / self.dt).floor().max(0.0) as usize).min(n - 2);
        let s = t - k as f64 * self.dt;
        let (x0, x1) = (self.values[k], self.values[k + 1]);
        self.cumulative[k] + x0 * s + (x1 - x0) * s * s / (2.0 * self.dt)
    }

    /// `∫ₐᵇ δ(t) dt`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.antiderivative(b) - self.antiderivative(a)
    }
}

/// Free-induction coherence `⟨e^{iφ}⟩` under OU noise.
pub fn fid_coherence(process: &OUProcess, t: f64) -> f64 {
    let (s2, tc) = (process.sigma * process.sigma, process.tau_c);
    if tc.is_infinite() {
        return (-0.5 * s2 * t * t).exp();
    }
    let u = t / tc;
    let g = if u < 1e-3 {
        u * u * (0.5 - u / 6.0 + u * u / 24.0)
    } else {
        u - 1.0 + (-u).exp()
    };
    (-s2 * tc * tc * g).exp()
}

/// Hahn-echo coherence (refocusing pulse at `t/2`) under OU noise.
pub fn echo_coherence(process: &OUProcess, t: f64) -> f64 {
    let (s2, tc) = (process.sigma * process.sigma, process.tau_c);
    if tc.is_infinite() {
        return 1.0;
    }
    let u = t / tc;
    // series near u = 0 where the closed form cancels catastrophically
    let g = if u < 1e-2 {
        u * u * u * (1.0 / 12.0 - u / 32.0)
    } else {
        u - 3.0 + 4.0 * (-0.5 * u).exp() - (-u).exp()
    };
    (-s2 * tc * tc * g).exp()
}

/// Monte Carlo average of a coherence experiment over `n_traj` OU
/// realizations. Fringes are averaged before the envelope is taken; the
/// standard error uses per-trajectory readouts projected on the mean phase.
pub fn average_with_noise(
    exp: &CoherenceExperiment,
    process: &OUProcess,
    n_traj: usize,
    seed: u64,
) -> Result<ExperimentTrace, NoiseError> {
    process.validate()?;
    if n_traj < 2 {
        return Err(NoiseError::InvalidParameter("n_traj must be >= 2".into()));
    }
    let prep = exp.prepare()?;
    let dt = process.path_step();
    let n = (exp.horizon() / dt).ceil() as usize + 2;
    let runs: Vec<Result<(Vec<Fringe>, Physicality), NoiseError>> = (0..n_traj)
        .into_par_iter()
        .map(|k| {
            let mut rng = trajectory_rng(seed, k as u64);
            let path = DetuningPath::from_samples(dt, process.sample_path(dt, n, &mut rng)?);
            let mut phys = Physicality::default();
            let fringes = exp.run(&prep, &path, &mut phys);
            Ok((fringes, phys))
        })
        .collect();
    let runs: Vec<(Vec<Fringe>, Physicality)> = runs.into_iter().collect::<Result<_, _>>()?;
    let points = exp.delays.len();
    let mut mean = vec![Fringe { c: 0.0, q: C64::new(0.0, 0.0) }; points];
    let mut physicality = Physicality::default();
    for (fringes, phys) in &runs {
        physicality.merge(phys);
        for (m, f) in mean.iter_mut().zip(fringes) {
            m.c += f.c;
            m.q += f.q;
        }
    }
    let inv = 1.0 / n_traj as f64;
    for m in &mut mean {
        m.c *= inv;
        m.q *= inv;
    }
    let stderr = (0..points)
        .map(|i| {
            let direction = if mean[i].q.norm() > 0.0 {
                mean[i].q.conj() / mean[i].q.norm()
            } else {
                C64::new(0.0, 0.0)
            };
            let project = |f: &Fringe| match exp.mode {
                ReadoutMode::Envelope => f.c + (f.q * direction).re,
                ReadoutMode::Fringes => f.at_zero_phase(),
            };
            let centre = project(&mean[i]);
            let ss: f64 = runs.iter().map(|(f, _)| (project(&f[i]) - centre).powi(2)).sum();
            (ss / (n_traj - 1) as f64).sqrt() * inv.sqrt()
        })
        .collect();
    let mut params = exp.params();
    params.insert("ou_sigma_rad_per_ns".into(), process.sigma);
    params.insert("ou_tau_c_ns".into(), process.tau_c);
    params.insert("path_step_ns".into(), dt);
    Ok(ExperimentTrace {
        label: "delay_ns".into(),
        abscissa: exp.delays.clone(),
        signal: exp.signal(&mean),
        stderr: Some(stderr),
        meta: TraceMeta {
            sequence: exp.name().into(),
            params,
            seed: Some(seed),
            trajectories: n_traj,
        },
        physicality,
    })
}

/// Targets for [`calibrate_bath_noise`].
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTarget {
    /// Fitted Ramsey time to reproduce, ns.
    pub t2_star: f64,
    /// Desired echo/Ramsey time ratio.
    pub echo_ratio: f64,
    /// Markovian dephasing present in both sequences, 1/ns.
    pub gamma_phi: f64,
    pub ramsey_delays: Vec<f64>,
    pub echo_delays: Vec<f64>,
    pub tau_c_ladder: Vec<f64>,
    /// Extra effective free time contributed by finite pulses, ns.
    pub pulse_offset: f64,
}

impl CalibrationTarget {
    /// 31-point delay grids spanning five expected decay times and a
    /// 1 ns to 100 µs ladder of correlation times.
    pub fn new(t2_star: f64, echo_ratio: f64, gamma_phi: f64) -> Self {
        let grid = |max: f64| (0..31).map(|i| max * i as f64 / 30.0).collect::<Vec<_>>();
        Self {
            t2_star,
            echo_ratio,
            gamma_phi,
            ramsey_delays: grid(5.0 * t2_star),
            echo_delays: grid(5.0 * t2_star * echo_ratio),
            tau_c_ladder: (0..=20).map(|i| 10f64.powf(i as f64 / 4.0)).collect(),
            pulse_offset: 0.0,
        }
    }

    /// Accounts for rectangular π/2 pulses of `pi_half` ns, which extend the
    /// effective free evolution by `4·pi_half/π`.
    pub fn with_pi_half(mut self, pi_half: f64) -> Self {
        self.pulse_offset = 4.0 * pi_half / std::f64::consts::PI;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPoint {
    pub process: OUProcess,
    pub t2_star: f64,
    pub t2_echo: f64,
}

impl CalibrationPoint {
    pub fn ratio(&self) -> f64 {
        self.t2_echo / self.t2_star
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BathCalibration {
    pub best: CalibrationPoint,
    pub ladder: Vec<CalibrationPoint>,
}

/// Exponential-fit coherence times of the analytic Ramsey and echo decays.
pub fn analytic_coherence_times(
    process: &OUProcess,
    gamma_phi: f64,
    ramsey_delays: &[f64],
    echo_delays: &[f64],
    pulse_offset: f64,
) -> Result<(f64, f64), NoiseError> {
    let ramsey: Vec<f64> = ramsey_delays
        .iter()
        .map(|&d| d + pulse_offset)
        .map(|t| (-gamma_phi * t).exp() * fid_coherence(process, t))
        .collect();
    let echo: Vec<f64> = echo_delays
        .iter()
        .map(|&d| d + pulse_offset)
        .map(|t| (-gamma_phi * t).exp() * echo_coherence(process, t))
        .collect();
    let r = fit_exponential(ramsey_delays, &ramsey, ExpMode::Decay)?;
    let e = fit_exponential(echo_delays, &echo, ExpMode::Decay)?;
    Ok((r.time_constant(), e.time_constant()))
}

fn sigma_for_t2_star(target: &CalibrationTarget, tau_c: f64) -> Result<CalibrationPoint, NoiseError> {
    let eval = |sigma: f64| -> Result<CalibrationPoint, NoiseError> {
        let process = OUProcess::new(sigma, tau_c)?;
        let (t2_star, t2_echo) =
            analytic_coherence_times(
            &process,
            target.gamma_phi,
            &target.ramsey_delays,
            &target.echo_delays,
            target.pulse_offset,
        )?;
        Ok(CalibrationPoint { process, t2_star, t2_echo })
    };
    let quiet = eval(0.0)?;
    if quiet.t2_star < target.t2_star {
        return Err(NoiseError::Unreachable(format!(
            "Markovian dephasing alone gives T2* = {} ns",
            quiet.t2_star
        )));
    }
    let mut lo = 0.0;
    let mut hi = 1.0 / target.t2_star;
    while eval(hi)?.t2_star > target.t2_star {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(NoiseError::Unreachable("no noise amplitude reaches T2*".into()));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if eval(mid)?.t2_star > target.t2_star {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    eval(0.5 * (lo + hi))
}

/// For each correlation time on the ladder, bisects the amplitude that
/// reproduces the Ramsey time and keeps the point whose echo/Ramsey ratio is
/// closest to the target.
pub fn calibrate_bath_noise(target: &CalibrationTarget) -> Result<BathCalibration, NoiseError> {
    if !(target.t2_star > 0.0 && target.echo_ratio > 0.0 && target.gamma_phi >= 0.0) {
        return Err(NoiseError::InvalidParameter("calibration targets must be positive".into()));
    }
    if target.tau_c_ladder.is_empty() || target.tau_c_ladder.iter().any(|t| !(*t > 0.0)) {
        return Err(NoiseError::InvalidParameter("tau_c ladder must be positive and non-empty".into()));
    }
    let ladder = target
        .tau_c_ladder
        .par_iter()
        .map(|&tc| sigma_for_t2_star(target, tc))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let best = *ladder
        .iter()
        .min_by(|a, b| {
            let da = (a.ratio() - target.echo_ratio).abs();
            let db = (b.ratio() - target.echo_ratio).abs();
            da.total_cmp(&db)
        })
        .expect("ladder is non-empty");
    Ok(BathCalibration { best, ladder })
}
