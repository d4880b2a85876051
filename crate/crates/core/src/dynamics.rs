//! Rotating-frame Lindblad dynamics for the four-level Λ system.
//!
//! Basis order is `|1⟩, |2⟩, |eA⟩, |eB⟩` (indices 0..4). Angular frequencies
//! are in rad/ns and times in ns. Density matrices are vectorized column-major,
//! so that `vec(A X B) = (Bᵀ ⊗ A) vec(X)`.

use std::collections::VecDeque;

use nalgebra::{Matrix4, SMatrix, SVector, SymmetricEigen, SVD};
use thiserror::Error;

use crate::constants::boltzmann_ratio;
use crate::levels::{Mat4, C64};

pub const DIM: usize = 4;
pub type SuperOp = SMatrix<C64, 16, 16>;
pub type VecRho = SVector<C64, 16>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid drive topology: {0}")]
    InvalidTopology(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("step control failed at t = {time} ns (step {step:e} ns)")]
    ToleranceNotMet { time: f64, step: f64 },
    #[error("steady state is not unique (null space dimension {0})")]
    DegenerateSteadyState(usize),
    #[error("steady-state residual {0:e} exceeds 1e-9")]
    SteadyStateResidual(f64),
    #[error("invalid density matrix: {0}")]
    InvalidState(String),
}

/// One laser tone acting on a single ground→excited transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drive {
    /// Rabi frequency Ω, rad/ns.
    pub rabi: f64,
    /// Laser minus transition frequency, rad/ns.
    pub detuning: f64,
    pub ground: usize,
    pub excited: usize,
    pub phase: f64,
}

impl Drive {
    pub fn new(rabi: f64, detuning: f64, ground: usize, excited: usize) -> Self {
        Self {
            rabi,
            detuning,
            ground,
            excited,
            phase: 0.0,
        }
    }
}

/// Incoherent rates, all in 1/ns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSet {
    pub gamma_rad: f64,
    /// Radiative branching into `|1⟩` and `|2⟩`.
    pub branching: [f64; 2],
    /// Total spin relaxation rate 1/T₁ (up + down).
    pub gamma_spin_relax: f64,
    /// Up/down ratio, exp(−hν/kT) in thermal equilibrium.
    pub up_down_ratio: f64,
    /// Pure dephasing rate of the `|1⟩–|2⟩` coherence.
    pub gamma_phi: f64,
}

impl Default for RateSet {
    fn default() -> Self {
        Self {
            gamma_rad: 1.0 / 1.7,
            branching: [0.5, 0.5],
            gamma_spin_relax: 0.0,
            up_down_ratio: 0.0,
            gamma_phi: 0.0,
        }
    }
}

impl RateSet {
    /// Rates with spin relaxation time `t1_ns` obeying detailed balance for a
    /// spin splitting of `splitting_ghz` at `temperature_k`.
    pub fn thermal(
        gamma_rad: f64,
        t1_ns: f64,
        splitting_ghz: f64,
        temperature_k: f64,
        gamma_phi: f64,
    ) -> Self {
        Self {
            gamma_rad,
            branching: [0.5, 0.5],
            gamma_spin_relax: if t1_ns.is_finite() && t1_ns > 0.0 { 1.0 / t1_ns } else { 0.0 },
            up_down_ratio: boltzmann_ratio(splitting_ghz, temperature_k),
            gamma_phi,
        }
    }

    pub fn relax_down(&self) -> f64 {
        self.gamma_spin_relax / (1.0 + self.up_down_ratio)
    }

    pub fn relax_up(&self) -> f64 {
        self.gamma_spin_relax * self.up_down_ratio / (1.0 + self.up_down_ratio)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let fields = [
            ("gamma_rad", self.gamma_rad),
            ("branching[0]", self.branching[0]),
            ("branching[1]", self.branching[1]),
            ("gamma_spin_relax", self.gamma_spin_relax),
            ("up_down_ratio", self.up_down_ratio),
            ("gamma_phi", self.gamma_phi),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DynamicsError::InvalidParameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        let sum = self.branching[0] + self.branching[1];
        if (sum - 1.0).abs() > 1e-12 {
            return Err(DynamicsError::InvalidParameter(format!(
                "branching fractions sum to {sum}"
            )));
        }
        Ok(())
    }
}

/// Hermitian, unit-trace, positive 4×4 state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityMatrix(pub Mat4);

impl DensityMatrix {
    pub fn pure(index: usize) -> Self {
        let mut m = Mat4::zeros();
        m[(index, index)] = C64::new(1.0, 0.0);
        Self(m)
    }

    pub fn from_populations(p: [f64; 4]) -> Self {
        Self(Matrix4::from_diagonal(&nalgebra::Vector4::from_iterator(
            p.iter().map(|&x| C64::new(x, 0.0)),
        )))
    }

    pub fn mixed_ground() -> Self {
        Self::from_populations([0.5, 0.5, 0.0, 0.0])
    }

    pub fn checked(m: Mat4) -> Result<Self, DynamicsError> {
        let rho = Self(m);
        let p = Physicality::of(&rho);
        if p.max_hermiticity_error > 1e-10 || p.max_trace_error > 1e-9 || p.min_eigenvalue < -1e-9 {
            return Err(DynamicsError::InvalidState(format!(
                "trace error {:e}, hermiticity {:e}, min eigenvalue {:e}",
                p.max_trace_error, p.max_hermiticity_error, p.min_eigenvalue
            )));
        }
        Ok(rho)
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.0
    }

    pub fn population(&self, i: usize) -> f64 {
        self.0[(i, i)].re
    }

    pub fn populations(&self) -> [f64; 4] {
        std::array::from_fn(|i| self.population(i))
    }

    pub fn excited_population(&self) -> f64 {
        self.population(2) + self.population(3)
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn to_vec(&self) -> VecRho {
        VecRho::from_column_slice(self.0.as_slice())
    }

    pub fn from_vec(v: &VecRho) -> Self {
        Self(Mat4::from_column_slice(v.as_slice()))
    }

    /// `U ρ U†`.
    pub fn conjugate_by(&self, u: &Mat4) -> Self {
        Self(u * self.0 * u.adjoint())
    }
}

/// Worst-case deviations from a valid density matrix seen over a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Physicality {
    pub max_trace_error: f64,
    pub max_hermiticity_error: f64,
    pub min_eigenvalue: f64,
}

impl Default for Physicality {
    fn default() -> Self {
        Self {
            max_trace_error: 0.0,
            max_hermiticity_error: 0.0,
            min_eigenvalue: f64::INFINITY,
        }
    }
}

impl Physicality {
    pub fn of(rho: &DensityMatrix) -> Self {
        let mut p = Self::default();
        p.record(rho);
        p
    }

    pub fn record(&mut self, rho: &DensityMatrix) {
        let m = &rho.0;
        self.max_trace_error = self.max_trace_error.max((m.trace() - C64::new(1.0, 0.0)).norm());
        let herm = (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        self.max_hermiticity_error = self.max_hermiticity_error.max(herm);
        let sym = (m + m.adjoint()) * C64::new(0.5, 0.0);
        let min = SymmetricEigen::new(sym).eigenvalues.min();
        self.min_eigenvalue = self.min_eigenvalue.min(min);
    }

    pub fn merge(&mut self, other: &Physicality) {
        self.max_trace_error = self.max_trace_error.max(other.max_trace_error);
        self.max_hermiticity_error = self.max_hermiticity_error.max(other.max_hermiticity_error);
        self.min_eigenvalue = self.min_eigenvalue.min(other.min_eigenvalue);
    }

    pub fn is_physical(&self) -> bool {
        self.max_trace_error <= 1e-9 && self.max_hermiticity_error <= 1e-10 && self.min_eigenvalue >= -1e-9
    }
}

/// Jump operator with its rate; the dissipator uses `rate · D[op]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub op: Mat4,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LindbladModel {
    pub hamiltonian: Mat4,
    pub channels: Vec<Channel>,
}

fn ket_bra(i: usize, j: usize) -> Mat4 {
    let mut m = Mat4::zeros();
    m[(i, j)] = C64::new(1.0, 0.0);
    m
}

impl LindbladModel {
    pub fn new(hamiltonian: Mat4) -> Self {
        Self {
            hamiltonian,
            channels: Vec::new(),
        }
    }

    pub fn push_channel(&mut self, op: Mat4, rate: f64) {
        if rate > 0.0 {
            self.channels.push(Channel { op, rate });
        }
    }

    /// Adds radiative decay, thermal spin relaxation and spin dephasing.
    pub fn add_rates(&mut self, rates: &RateSet) {
        for e in 2..4 {
            for g in 0..2 {
                self.push_channel(ket_bra(g, e), rates.gamma_rad * rates.branching[g]);
            }
        }
        self.push_channel(ket_bra(0, 1), rates.relax_down());
        self.push_channel(ket_bra(1, 0), rates.relax_up());
        let sz = ket_bra(0, 0) - ket_bra(1, 1);
        self.push_channel(sz, 0.5 * rates.gamma_phi);
    }

    pub fn superoperator(&self) -> SuperOp {
        let id = Mat4::identity();
        let i = C64::new(0.0, 1.0);
        let mut l = (kron(&id, &self.hamiltonian) - kron(&self.hamiltonian.transpose(), &id)) * -i;
        for ch in &self.channels {
            let c = &ch.op;
            let cdc = c.adjoint() * c;
            let half = C64::new(0.5, 0.0);
            let d = kron(&c.conjugate(), c) - kron(&id, &cdc) * half - kron(&cdc.transpose(), &id) * half;
            l += d * C64::new(ch.rate, 0.0);
        }
        l
    }

    /// `dρ/dt` for a single state.
    pub fn apply(&self, rho: &DensityMatrix) -> Mat4 {
        let h = &self.hamiltonian;
        let r = &rho.0;
        let i = C64::new(0.0, 1.0);
        let mut out = (h * r - r * h) * -i;
        for ch in &self.channels {
            let c = &ch.op;
            let cdc = c.adjoint() * c;
            out += (c * r * c.adjoint() - (cdc * r + r * cdc) * C64::new(0.5, 0.0)) * C64::new(ch.rate, 0.0);
        }
        out
    }
}

/// `A ⊗ B` for 4×4 factors.
pub fn kron(a: &Mat4, b: &Mat4) -> SuperOp {
    let mut out = SuperOp::zeros();
    for ar in 0..4 {
        for ac in 0..4 {
            let x = a[(ar, ac)];
            if x == C64::new(0.0, 0.0) {
                continue;
            }
            for br in 0..4 {
                for bc in 0..4 {
                    out[(4 * ar + br, 4 * ac + bc)] = x * b[(br, bc)];
                }
            }
        }
    }
    out
}

fn check_drives(drives: &[Drive]) -> Result<(), DynamicsError> {
    for (k, d) in drives.iter().enumerate() {
        if d.ground > 1 || !(2..4).contains(&d.excited) {
            return Err(DynamicsError::InvalidTopology(format!(
                "drive {k} targets ({}, {}); expected a ground level 0..2 and an excited level 2..4",
                d.ground, d.excited
            )));
        }
        if !(d.rabi.is_finite() && d.rabi >= 0.0) {
            return Err(DynamicsError::InvalidParameter(format!("drive {k} Rabi frequency {}", d.rabi)));
        }
        if !d.detuning.is_finite() || !d.phase.is_finite() {
            return Err(DynamicsError::InvalidParameter(format!("drive {k} is not finite")));
        }
        for (m, other) in drives[..k].iter().enumerate() {
            if other.ground == d.ground && other.excited == d.excited {
                return Err(DynamicsError::InvalidTopology(format!(
                    "drives {m} and {k} address the same transition"
                )));
            }
        }
    }
    Ok(())
}

/// Rotating-frame Hamiltonian for an arbitrary set of tones on the
/// ground→excited transitions. Each tone fixes `H_ee − H_gg = −detuning`;
/// closed loops of tones must agree. `two_photon_detuning` additionally
/// lowers the `|2⟩` energy.
pub fn build_driven_model(
    drives: &[Drive],
    rates: &RateSet,
    two_photon_detuning: f64,
) -> Result<LindbladModel, DynamicsError> {
    check_drives(drives)?;
    rates.validate()?;
    if !two_photon_detuning.is_finite() {
        return Err(DynamicsError::InvalidParameter("two-photon detuning is not finite".into()));
    }

    let mut energy: [Option<f64>; DIM] = [None; DIM];
    let scale = drives.iter().map(|d| d.detuning.abs()).fold(1.0, f64::max);
    for root in 0..DIM {
        if energy[root].is_some() {
            continue;
        }
        energy[root] = Some(0.0);
        let mut queue = VecDeque::from([root]);
        while let Some(level) = queue.pop_front() {
            let here = energy[level].unwrap();
            for d in drives {
                let (other, target) = if d.ground == level {
                    (d.excited, here - d.detuning)
                } else if d.excited == level {
                    (d.ground, here + d.detuning)
                } else {
                    continue;
                };
                match energy[other] {
                    None => {
                        energy[other] = Some(target);
                        queue.push_back(other);
                    }
                    Some(existing) if (existing - target).abs() > 1e-9 * scale => {
                        return Err(DynamicsError::InvalidTopology(format!(
                            "tone detunings around a closed loop disagree by {:e} rad/ns",
                            existing - target
                        )));
                    }
                    Some(_) => {}
                }
            }
        }
    }

    let mut h = Mat4::zeros();
    for (i, e) in energy.iter().enumerate() {
        h[(i, i)] = C64::new(e.unwrap(), 0.0);
    }
    h[(1, 1)] -= C64::new(two_photon_detuning, 0.0);
    for d in drives {
        let coupling = C64::from_polar(0.5 * d.rabi, d.phase);
        h[(d.excited, d.ground)] += coupling;
        h[(d.ground, d.excited)] += coupling.conj();
    }
    let mut model = LindbladModel::new(h);
    model.add_rates(rates);
    Ok(model)
}

/// Λ model: the drives address distinct ground levels through one common
/// excited level.
pub fn build_lambda_model(
    drives: &[Drive],
    rates: &RateSet,
    two_photon_detuning: f64,
) -> Result<LindbladModel, DynamicsError> {
    check_drives(drives)?;
    if drives.is_empty() || drives.len() > 2 {
        return Err(DynamicsError::InvalidTopology(format!(
            "a Λ system takes one or two drives, got {}",
            drives.len()
        )));
    }
    if drives.len() == 2 {
        if drives[0].excited != drives[1].excited {
            return Err(DynamicsError::InvalidTopology("drives do not share an excited level".into()));
        }
        if drives[0].ground == drives[1].ground {
            return Err(DynamicsError::InvalidTopology("drives share a ground level".into()));
        }
    }
    build_driven_model(drives, rates, two_photon_detuning)
}

/// States at requested times plus a physicality summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    pub physicality: Physicality,
}

impl Trajectory {
    pub fn last(&self) -> &DensityMatrix {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn populations(&self, level: usize) -> Vec<f64> {
        self.states.iter().map(|r| r.population(level)).collect()
    }
}

// Dormand–Prince 5(4) tableau; the system is autonomous so the nodes drop out.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn r(x: f64) -> C64 {
    C64::new(x, 0.0)
}

struct Stepper<'a> {
    l: &'a SuperOp,
    tolerance: f64,
    span: f64,
    h: f64,
    k1: VecRho,
}

impl<'a> Stepper<'a> {
    fn new(l: &'a SuperOp, y: &VecRho, tolerance: f64, span: f64) -> Self {
        let norm = (0..16)
            .map(|i| l.row(i).iter().map(|z| z.norm()).sum::<f64>())
            .fold(0.0, f64::max);
        let h = if norm > 0.0 { (0.01 / norm).min(span) } else { span };
        Self {
            l,
            tolerance,
            span,
            h,
            k1: l * y,
        }
    }

    /// Advances `y` from `t` to exactly `t_end` with local error per step held
    /// below `tolerance · h / span`.
    fn advance(&mut self, y: &mut VecRho, t: &mut f64, t_end: f64) -> Result<(), DynamicsError> {
        let l = self.l;
        let h_min = 1e-13 * self.span.max(1.0);
        while *t < t_end {
            let remaining = t_end - *t;
            let last = self.h >= remaining;
            let h = if last { remaining } else { self.h };
            let hc = r(h);
            let k1 = self.k1;
            let k2 = l * (*y + k1 * r(A21) * hc);
            let k3 = l * (*y + (k1 * r(A31) + k2 * r(A32)) * hc);
            let k4 = l * (*y + (k1 * r(A41) + k2 * r(A42) + k3 * r(A43)) * hc);
            let k5 = l * (*y + (k1 * r(A51) + k2 * r(A52) + k3 * r(A53) + k4 * r(A54)) * hc);
            let k6 = l * (*y + (k1 * r(A61) + k2 * r(A62) + k3 * r(A63) + k4 * r(A64) + k5 * r(A65)) * hc);
            let y_new = *y + (k1 * r(B1) + k3 * r(B3) + k4 * r(B4) + k5 * r(B5) + k6 * r(B6)) * hc;
            let k7 = l * y_new;
            let err_vec =
                (k1 * r(E1) + k3 * r(E3) + k4 * r(E4) + k5 * r(E5) + k6 * r(E6) + k7 * r(E7)) * hc;
            let err = err_vec.iter().map(|z| z.norm()).fold(0.0, f64::max);
            let allowed = self.tolerance * h / self.span;
            let ratio = err / allowed;
            if ratio <= 1.0 {
                *y = y_new;
                self.k1 = k7;
                *t = if last { t_end } else { *t + h };
                let grow = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.25)).clamp(0.2, 5.0) };
                // a clipped final step says nothing about the natural step
                if !last || grow < 1.0 {
                    self.h = (h * grow).max(h_min);
                }
                renormalize(y);
            } else {
                let shrink = (0.9 * ratio.powf(-0.25)).clamp(0.1, 0.9);
                self.h = h * shrink;
                if self.h < h_min {
                    return Err(DynamicsError::ToleranceNotMet { time: *t, step: self.h });
                }
            }
        }
        Ok(())
    }
}

fn renormalize(y: &mut VecRho) {
    let trace: f64 = (0..DIM).map(|i| y[5 * i].re).sum();
    let drift = trace - 1.0;
    if drift != 0.0 && drift.abs() <= 1e-12 {
        *y /= r(trace);
    }
}

fn check_tolerance(tolerance: f64) -> Result<(), DynamicsError> {
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(DynamicsError::InvalidParameter(format!("tolerance must be > 0, got {tolerance}")));
    }
    Ok(())
}

/// Integrates from `t = 0` and reports the state at every accepted step.
pub fn evolve(
    model: &LindbladModel,
    rho0: &DensityMatrix,
    duration: f64,
    tolerance: f64,
) -> Result<Trajectory, DynamicsError> {
    check_tolerance(tolerance)?;
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(DynamicsError::InvalidParameter(format!("duration must be >= 0, got {duration}")));
    }
    let rho0 = DensityMatrix::checked(rho0.0)?;
    let l = model.superoperator();
    let mut y = rho0.to_vec();
    let mut t = 0.0;
    let mut out = Trajectory {
        times: vec![0.0],
        states: vec![rho0],
        physicality: Physicality::of(&rho0),
    };
    if duration == 0.0 {
        return Ok(out);
    }
    let mut stepper = Stepper::new(&l, &y, tolerance, duration);
    while t < duration {
        let target = (t + stepper.h).min(duration);
        stepper.advance(&mut y, &mut t, target)?;
        let rho = DensityMatrix::from_vec(&y);
        out.physicality.record(&rho);
        out.times.push(t);
        out.states.push(rho);
    }
    Ok(out)
}

/// Integrates from `t = 0` and reports the state at each time in `times`
/// (non-decreasing, non-negative).
pub fn evolve_sampled(
    model: &LindbladModel,
    rho0: &DensityMatrix,
    times: &[f64],
    tolerance: f64,
) -> Result<Trajectory, DynamicsError> {
    check_tolerance(tolerance)?;
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(DynamicsError::InvalidParameter("sample times must be finite, >= 0 and sorted".into()));
    }
    let rho0 = DensityMatrix::checked(rho0.0)?;
    let l = model.superoperator();
    let span = times.last().copied().unwrap_or(0.0);
    let mut y = rho0.to_vec();
    let mut t = 0.0;
    let mut out = Trajectory {
        times: Vec::with_capacity(times.len()),
        states: Vec::with_capacity(times.len()),
        physicality: Physicality::of(&rho0),
    };
    let mut stepper = Stepper::new(&l, &y, tolerance, span.max(f64::MIN_POSITIVE));
    for &target in times {
        stepper.advance(&mut y, &mut t, target)?;
        let rho = DensityMatrix::from_vec(&y);
        out.physicality.record(&rho);
        out.times.push(target);
        out.states.push(rho);
    }
    Ok(out)
}

/// Exact propagator `exp(L·t)` of a time-independent segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    pub matrix: SuperOp,
}

impl Propagator {
    pub fn new(model: &LindbladModel, duration: f64) -> Self {
        Self::from_superoperator(&model.superoperator(), duration)
    }

    pub fn from_superoperator(l: &SuperOp, duration: f64) -> Self {
        Self {
            matrix: (l * r(duration)).exp(),
        }
    }

    pub fn identity() -> Self {
        Self {
            matrix: SuperOp::identity(),
        }
    }

    pub fn apply(&self, rho: &DensityMatrix) -> DensityMatrix {
        let mut v = self.matrix * rho.to_vec();
        renormalize(&mut v);
        DensityMatrix::from_vec(&v)
    }

    /// `other` after `self`.
    pub fn then(&self, other: &Propagator) -> Propagator {
        Propagator {
            matrix: other.matrix * self.matrix,
        }
    }
}

/// Unique trace-one fixed point of the Lindbladian.
pub fn steady_state(model: &LindbladModel) -> Result<DensityMatrix, DynamicsError> {
    let l = model.superoperator();
    let svd = SVD::new(l, false, false);
    let largest = svd.singular_values.max();
    let threshold = 1e-11 * largest.max(1e-300);
    let null_dim = svd.singular_values.iter().filter(|&&s| s <= threshold).count();
    if null_dim > 1 {
        return Err(DynamicsError::DegenerateSteadyState(null_dim));
    }

    // one population row of L is redundant; replace it by the trace condition
    let mut a = l;
    let mut b = VecRho::zeros();
    for j in 0..16 {
        a[(0, j)] = C64::new(0.0, 0.0);
    }
    for k in 0..DIM {
        a[(0, 5 * k)] = C64::new(1.0, 0.0);
    }
    b[0] = C64::new(1.0, 0.0);
    let v = a.lu().solve(&b).ok_or(DynamicsError::DegenerateSteadyState(2))?;
    let m = Mat4::from_column_slice(v.as_slice());
    let m = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let rho = DensityMatrix(m / m.trace());
    let residual = (l * rho.to_vec()).iter().map(|z| z.norm()).fold(0.0, f64::max);
    if residual > 1e-9 {
        return Err(DynamicsError::SteadyStateResidual(residual));
    }
    Ok(rho)
}

/// Photon emission rate `Γ·(ρ_eA + ρ_eB)` per state, photons/ns.
pub fn fluorescence(states: &[DensityMatrix], rates: &RateSet) -> Vec<f64> {
    states
        .iter()
        .map(|rho| (rates.gamma_rad * rho.excited_population()).max(0.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn no_rates() -> RateSet {
        RateSet {
            gamma_rad: 0.0,
            ..RateSet::default()
        }
    }

    #[test]
    fn single_drive_hamiltonian_is_textbook() {
        let omega = 0.7;
        let m = build_lambda_model(&[Drive::new(omega, 0.0, 0, 2)], &no_rates(), 0.0).unwrap();
        let mut expected = Mat4::zeros();
        expected[(0, 2)] = r(omega / 2.0);
        expected[(2, 0)] = r(omega / 2.0);
        assert_eq!(m.hamiltonian, expected);
        assert!(m.channels.is_empty());
    }

    #[test]
    fn lambda_hamiltonian_has_no_ground_coupling() {
        let delta = 5.0;
        let drives = [Drive::new(0.3, delta, 0, 2), Drive::new(0.4, delta, 1, 2)];
        let m = build_lambda_model(&drives, &no_rates(), 0.0).unwrap();
        let h = m.hamiltonian;
        assert_eq!(h[(0, 1)], r(0.0));
        assert_eq!(h[(2, 2)], r(-delta));
        assert_eq!(h[(1, 1)], r(0.0));
        assert_eq!(h[(2, 0)], r(0.15));
        assert_eq!(h[(2, 1)], r(0.2));
    }

    #[test]
    fn two_photon_detuning_shifts_second_ground_level() {
        let drives = [Drive::new(0.3, 1.0, 0, 2), Drive::new(0.4, 0.8, 1, 2)];
        let m = build_lambda_model(&drives, &no_rates(), 0.05).unwrap();
        assert!((m.hamiltonian[(1, 1)].re - (0.8 - 1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn topology_errors() {
        let bad = [Drive::new(0.3, 0.0, 0, 2), Drive::new(0.3, 0.0, 1, 3)];
        assert!(matches!(
            build_lambda_model(&bad, &no_rates(), 0.0),
            Err(DynamicsError::InvalidTopology(_))
        ));
        let same = [Drive::new(0.3, 0.0, 0, 2), Drive::new(0.3, 0.0, 0, 3)];
        assert!(matches!(
            build_lambda_model(&same, &no_rates(), 0.0),
            Err(DynamicsError::InvalidTopology(_))
        ));
        let out_of_range = [Drive::new(0.3, 0.0, 2, 3)];
        assert!(build_driven_model(&out_of_range, &no_rates(), 0.0).is_err());
        let loop_mismatch = [
            Drive::new(0.3, 0.0, 0, 2),
            Drive::new(0.3, 0.0, 1, 2),
            Drive::new(0.3, 1.0, 0, 3),
            Drive::new(0.3, 0.0, 1, 3),
        ];
        assert!(matches!(
            build_driven_model(&loop_mismatch, &no_rates(), 0.0),
            Err(DynamicsError::InvalidTopology(_))
        ));
    }

    #[test]
    fn superoperator_matches_direct_application() {
        let drives = [Drive { phase: 0.4, ..Drive::new(0.3, 2.0, 0, 2) }, Drive::new(0.5, 1.5, 1, 2)];
        let rates = RateSet {
            gamma_spin_relax: 0.01,
            up_down_ratio: 0.3,
            gamma_phi: 0.02,
            ..RateSet::default()
        };
        let m = build_lambda_model(&drives, &rates, 0.1).unwrap();
        let mut rho = Mat4::zeros();
        for i in 0..4 {
            for j in 0..4 {
                rho[(i, j)] = C64::new((i + 2 * j) as f64 * 0.1, (i as f64 - j as f64) * 0.05);
            }
        }
        let rho = DensityMatrix(rho);
        let direct = m.apply(&rho);
        let via = DensityMatrix::from_vec(&(m.superoperator() * rho.to_vec())).0;
        assert!((direct - via).norm() < 1e-14);
    }

    #[test]
    fn frozen_model_is_exact() {
        let m = LindbladModel::new(Mat4::zeros());
        let rho0 = DensityMatrix::pure(1);
        let traj = evolve(&m, &rho0, 50.0, 1e-8).unwrap();
        assert!(traj.states.iter().all(|s| *s == rho0));
        let traj = evolve_sampled(&m, &rho0, &[0.0, 1.0, 10.0], 1e-8).unwrap();
        assert!(traj.states.iter().all(|s| *s == rho0));
    }

    #[test]
    fn resonant_rabi_matches_analytic() {
        let omega = 2.0 * PI * 0.1;
        let m = build_lambda_model(&[Drive::new(omega, 0.0, 0, 2)], &no_rates(), 0.0).unwrap();
        let period = 2.0 * PI / omega;
        let times: Vec<f64> = (0..=400).map(|k| k as f64 * 10.0 * period / 400.0).collect();
        let traj = evolve_sampled(&m, &DensityMatrix::pure(0), &times, 1e-9).unwrap();
        let err = times
            .iter()
            .zip(&traj.states)
            .map(|(t, s)| (s.population(2) - (omega * t / 2.0).sin().powi(2)).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");
        assert!(traj.physicality.is_physical());
    }

    #[test]
    fn radiative_decay_is_exponential() {
        let gamma = 1.0 / 1.7;
        let rates = RateSet {
            gamma_rad: gamma,
            ..RateSet::default()
        };
        let m = build_driven_model(&[], &rates, 0.0).unwrap();
        let traj = evolve(&m, &DensityMatrix::pure(2), 20.0, 1e-9).unwrap();
        let err = traj
            .times
            .iter()
            .zip(&traj.states)
            .map(|(t, s)| (s.population(2) - (-gamma * t).exp()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "max error {err}");
        let f = fluorescence(&traj.states[..1], &rates);
        assert!((f[0] - gamma).abs() < 1e-15);
    }

    #[test]
    fn propagator_agrees_with_integrator() {
        let drives = [Drive::new(0.4, 1.0, 0, 2), Drive::new(0.3, 1.0, 1, 2)];
        let rates = RateSet {
            gamma_spin_relax: 0.01,
            gamma_phi: 0.03,
            ..RateSet::default()
        };
        let m = build_lambda_model(&drives, &rates, 0.0).unwrap();
        let rho0 = DensityMatrix::pure(0);
        let rk = evolve_sampled(&m, &rho0, &[37.0], 1e-11).unwrap();
        let ex = Propagator::new(&m, 37.0).apply(&rho0);
        assert!((rk.last().0 - ex.0).norm() < 1e-9);
    }

    #[test]
    fn tolerance_halving_self_convergence() {
        let drives = [Drive::new(0.8, 3.0, 0, 2), Drive::new(0.8, 3.0, 1, 2)];
        let m = build_lambda_model(&drives, &RateSet::default(), 0.0).unwrap();
        let times: Vec<f64> = (1..=20).map(|k| k as f64 * 5.0).collect();
        for tol in [1e-5, 1e-7] {
            let a = evolve_sampled(&m, &DensityMatrix::pure(0), &times, tol).unwrap();
            let b = evolve_sampled(&m, &DensityMatrix::pure(0), &times, tol / 2.0).unwrap();
            for (x, y) in a.states.iter().zip(&b.states) {
                for i in 0..4 {
                    assert!((x.population(i) - y.population(i)).abs() < tol);
                }
            }
        }
    }

    #[test]
    fn raman_oscillation_follows_adiabatic_elimination() {
        let omega = 0.5;
        let delta = 20.0 * omega;
        let drives = [Drive::new(omega, delta, 0, 2), Drive::new(omega, delta, 1, 2)];
        let m = build_lambda_model(&drives, &no_rates(), 0.0).unwrap();
        let raman = omega * omega / (2.0 * delta);
        let half_period = PI / raman;
        let times: Vec<f64> = (0..=2000).map(|k| k as f64 * 1.5 * half_period / 2000.0).collect();
        let traj = evolve_sampled(&m, &DensityMatrix::pure(0), &times, 1e-8).unwrap();
        let p2 = traj.populations(1);
        let (imax, pmax) = p2.iter().enumerate().fold((0, 0.0), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
        assert!(pmax > 0.99);
        assert!((times[imax] / half_period - 1.0).abs() < 0.05);
    }

    #[test]
    fn steady_state_spin_relaxation_only_at_zero_temperature() {
        let rates = RateSet {
            gamma_spin_relax: 0.01,
            up_down_ratio: 0.0,
            ..RateSet::default()
        };
        let m = build_driven_model(&[], &rates, 0.0).unwrap();
        let ss = steady_state(&m).unwrap();
        assert!((ss.population(0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn steady_state_obeys_detailed_balance() {
        let rates = RateSet::thermal(1.0 / 1.7, 1000.0, 5.88, 0.3, 0.0);
        let m = build_driven_model(&[], &rates, 0.0).unwrap();
        let ss = steady_state(&m).unwrap();
        let ratio = ss.population(1) / ss.population(0);
        let boltzmann = (-crate::constants::PLANCK * 5.88e9 / (crate::constants::BOLTZMANN * 0.3)).exp();
        assert!((ratio / boltzmann - 1.0).abs() < 1e-9, "{ratio} vs {boltzmann}");
        assert!((rates.relax_up() / rates.relax_down() - boltzmann).abs() < 1e-12);
    }

    #[test]
    fn pumping_a2_initializes_lower_spin() {
        let rates = RateSet::thermal(1.0 / 1.7, 108_000.0, 5.88, 0.012, 0.0);
        let m = build_lambda_model(&[Drive::new(0.2, 0.0, 1, 2)], &rates, 0.0).unwrap();
        let ss = steady_state(&m).unwrap();
        assert!(ss.population(0) >= 0.9993, "{}", ss.population(0));
    }

    #[test]
    fn degenerate_steady_state_detected() {
        let m = LindbladModel::new(Mat4::zeros());
        assert!(matches!(steady_state(&m), Err(DynamicsError::DegenerateSteadyState(_))));
    }

    #[test]
    fn invalid_inputs() {
        let m = LindbladModel::new(Mat4::zeros());
        assert!(evolve(&m, &DensityMatrix::pure(0), 1.0, 0.0).is_err());
        assert!(evolve(&m, &DensityMatrix::pure(0), -1.0, 1e-6).is_err());
        assert!(evolve(&m, &DensityMatrix::from_populations([0.5, 0.0, 0.0, 0.0]), 1.0, 1e-6).is_err());
        let rates = RateSet {
            branching: [0.6, 0.6],
            ..RateSet::default()
        };
        assert!(build_driven_model(&[], &rates, 0.0).is_err());
    }

    #[test]
    fn ground_fluorescence_vanishes() {
        let s = fluorescence(&[DensityMatrix::mixed_ground()], &RateSet::default());
        assert_eq!(s, vec![0.0]);
    }
}
