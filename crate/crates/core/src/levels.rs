//! Orbital-spin level structure of the SiV⁻ ground and excited manifolds.
//!
//! Each manifold is a 4-dimensional orbital ⊗ spin space. The orbital doublet
//! is treated as a pseudo-spin with `L_z = diag(+1, -1)`; the electron spin
//! uses Pauli matrices. Basis index = `2 * orbital + spin` with orbital
//! `0 = L+`, `1 = L-` and spin `0 = up`, `1 = down` along the defect axis.
//!
//! The effective Hamiltonian (in GHz) is
//!
//! ```text
//! H = (λ/2) L_z⊗σ_z + (g/2) μ_B B·(1⊗σ) + q μ_B B_z L_z⊗1
//! ```
//!
//! with λ the manifold spin-orbit splitting and q the orbital Zeeman quench.

use nalgebra::{Complex, Matrix4, SymmetricEigen, Vector3, Vector4};
use thiserror::Error;

use crate::constants::BOHR_MAGNETON_GHZ_PER_TESLA;

pub type C64 = Complex<f64>;
pub type Mat4 = Matrix4<C64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LevelsError {
    #[error("matrix is not Hermitian (max asymmetry {0:e})")]
    NonHermitianInput(f64),
    #[error("invalid magnetic field: {0}")]
    InvalidField(String),
    #[error("invalid emitter parameter: {0}")]
    InvalidParams(String),
    #[error("frequency grid is empty")]
    EmptyGrid,
    #[error("linewidth must be positive, got {0}")]
    InvalidLinewidth(f64),
}

/// Static magnetic field in the defect frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagneticField {
    pub magnitude_tesla: f64,
    /// Angle from the defect symmetry axis, degrees.
    pub polar_angle_deg: f64,
    pub azimuth_deg: f64,
}

impl MagneticField {
    pub fn new(magnitude_tesla: f64, polar_angle_deg: f64) -> Result<Self, LevelsError> {
        let field = Self {
            magnitude_tesla,
            polar_angle_deg,
            azimuth_deg: 0.0,
        };
        field.validate()?;
        Ok(field)
    }

    pub fn zero() -> Self {
        Self {
            magnitude_tesla: 0.0,
            polar_angle_deg: 0.0,
            azimuth_deg: 0.0,
        }
    }

    /// 0.21 T at 70.5° from the defect axis.
    pub fn operating_point() -> Self {
        Self {
            magnitude_tesla: 0.21,
            polar_angle_deg: 70.5,
            azimuth_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), LevelsError> {
        if !(self.magnitude_tesla.is_finite() && self.magnitude_tesla >= 0.0) {
            return Err(LevelsError::InvalidField(format!(
                "magnitude must be >= 0, got {}",
                self.magnitude_tesla
            )));
        }
        if !(0.0..=180.0).contains(&self.polar_angle_deg) {
            return Err(LevelsError::InvalidField(format!(
                "polar angle must lie in [0, 180], got {}",
                self.polar_angle_deg
            )));
        }
        if !self.azimuth_deg.is_finite() {
            return Err(LevelsError::InvalidField("azimuth must be finite".into()));
        }
        Ok(())
    }

    /// Cartesian field vector in tesla.
    pub fn vector(&self) -> Vector3<f64> {
        let theta = self.polar_angle_deg.to_radians();
        let phi = self.azimuth_deg.to_radians();
        self.magnitude_tesla
            * Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
    }

    /// Unit vector along the field, or the defect axis when the field vanishes.
    pub fn axis(&self) -> Vector3<f64> {
        if self.magnitude_tesla > 0.0 {
            self.vector() / self.magnitude_tesla
        } else {
            Vector3::z()
        }
    }
}

/// Physical constants of the emitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiVParams {
    /// Ground-state spin-orbit splitting, GHz.
    pub lambda_gs_ghz: f64,
    /// Excited-state spin-orbit splitting, GHz.
    pub lambda_es_ghz: f64,
    pub g_spin: f64,
    /// Orbital Zeeman quench factor in the ground manifold.
    pub orbital_quench: f64,
    /// Orbital Zeeman quench factor in the excited manifold.
    pub orbital_quench_es: f64,
    /// Radiative decay rate of the excited states, 1/ns.
    pub gamma_rad: f64,
}

impl Default for SiVParams {
    fn default() -> Self {
        Self {
            lambda_gs_ghz: 48.0,
            lambda_es_ghz: 260.0,
            g_spin: 2.0,
            orbital_quench: 0.1,
            orbital_quench_es: 0.3,
            gamma_rad: 1.0 / 1.7,
        }
    }
}

impl SiVParams {
    pub fn validate(&self) -> Result<(), LevelsError> {
        let non_negative = [
            ("lambda_gs_ghz", self.lambda_gs_ghz),
            ("lambda_es_ghz", self.lambda_es_ghz),
            ("orbital_quench", self.orbital_quench),
            ("orbital_quench_es", self.orbital_quench_es),
            ("gamma_rad", self.gamma_rad),
        ];
        for (name, value) in non_negative {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LevelsError::InvalidParams(format!("{name} must be >= 0, got {value}")));
            }
        }
        if !(self.g_spin.is_finite() && self.g_spin > 0.0) {
            return Err(LevelsError::InvalidParams(format!(
                "g_spin must be > 0, got {}",
                self.g_spin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Manifold {
    Ground,
    Excited,
}

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

fn pauli() -> [Matrix4<C64>; 3] {
    // 1 ⊗ σ_x, 1 ⊗ σ_y, 1 ⊗ σ_z
    let i = C64::i();
    let z = C64::new(0.0, 0.0);
    let o = c(1.0);
    let sx = Matrix4::from_row_slice(&[z, o, z, z, o, z, z, z, z, z, z, o, z, z, o, z]);
    let sy = Matrix4::from_row_slice(&[z, -i, z, z, i, z, z, z, z, z, z, -i, z, z, i, z]);
    let sz = Matrix4::from_diagonal(&Vector4::new(o, -o, o, -o));
    [sx, sy, sz]
}

fn orbital_z() -> Mat4 {
    Matrix4::from_diagonal(&Vector4::new(c(1.0), c(1.0), c(-1.0), c(-1.0)))
}

/// Spin operator `n·S` (S = σ/2) acting on the spin factor.
pub fn spin_projection_operator(axis: &Vector3<f64>) -> Mat4 {
    let [sx, sy, sz] = pauli();
    (sx * c(axis.x) + sy * c(axis.y) + sz * c(axis.z)) * c(0.5)
}

/// Effective spin-orbit + Zeeman Hamiltonian of one manifold, in GHz.
pub fn build_manifold_hamiltonian(
    manifold: Manifold,
    field: &MagneticField,
    params: &SiVParams,
) -> Mat4 {
    let (lambda, quench) = match manifold {
        Manifold::Ground => (params.lambda_gs_ghz, params.orbital_quench),
        Manifold::Excited => (params.lambda_es_ghz, params.orbital_quench_es),
    };
    let [sx, sy, sz] = pauli();
    let lz = orbital_z();
    let b = field.vector();
    let mu = BOHR_MAGNETON_GHZ_PER_TESLA;

    let spin_orbit = lz * sz * c(0.5 * lambda);
    let spin_zeeman = (sx * c(b.x) + sy * c(b.y) + sz * c(b.z)) * c(0.5 * params.g_spin * mu);
    let orbital_zeeman = lz * c(quench * mu * b.z);
    let h = spin_orbit + spin_zeeman + orbital_zeeman;
    debug_assert!(hermiticity_error(&h) <= 1e-12);
    h
}

/// Largest elementwise |H - H†|.
pub fn hermiticity_error(h: &Mat4) -> f64 {
    (h - h.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Eigen-decomposition of one manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct Levels {
    /// Ascending energies relative to the manifold mean, GHz.
    pub energies: [f64; 4],
    /// Eigenvectors as columns, in the orbital ⊗ spin basis.
    pub states: Mat4,
    /// ⟨n·S⟩ per level along the quantization axis used at construction.
    pub spin_expectations: [f64; 4],
}

impl Levels {
    pub fn state(&self, i: usize) -> Vector4<C64> {
        self.states.column(i).into_owned()
    }

    /// Returns ⟨n·S⟩ for every level along `axis`.
    pub fn spin_along(&self, axis: &Vector3<f64>) -> [f64; 4] {
        let op = spin_projection_operator(axis);
        std::array::from_fn(|i| {
            let v = self.state(i);
            (v.adjoint() * op * v)[(0, 0)].re
        })
    }

    /// Weight of the spin-up (along the defect axis) component of level `i`.
    pub fn spin_up_weight(&self, i: usize) -> f64 {
        let v = self.state(i);
        v[0].norm_sqr() + v[2].norm_sqr()
    }

    fn with_spin_axis(mut self, axis: &Vector3<f64>) -> Self {
        self.spin_expectations = self.spin_along(axis);
        self
    }
}

/// Operator used to split degenerate eigenspaces: spin first, orbital second.
fn degeneracy_resolver() -> Mat4 {
    let [_, _, sz] = pauli();
    sz + orbital_z() * c(0.125)
}

fn fix_phase(v: &mut Vector4<C64>) {
    let mut best = 0;
    let mut best_norm = -1.0;
    for (i, z) in v.iter().enumerate() {
        // earlier indices win near-ties
        if z.norm() > best_norm * (1.0 + 1e-12) {
            best = i;
            best_norm = z.norm();
        }
    }
    if best_norm > 0.0 {
        let phase = v[best].conj() / best_norm;
        *v *= phase;
    }
}

fn dominant_index(v: &Vector4<C64>) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if v[i].norm() > v[best].norm() * (1.0 + 1e-12) {
            best = i;
        }
    }
    best
}

/// Hermitian eigen-decomposition with sorted energies, a stable basis in
/// degenerate subspaces and a fixed phase convention (largest component real
/// and positive).
pub fn eigenlevels(h: &Mat4) -> Result<Levels, LevelsError> {
    let scale = h.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let asym = hermiticity_error(h);
    if asym > 1e-10 * scale {
        return Err(LevelsError::NonHermitianInput(asym));
    }
    let sym = (h + h.adjoint()) * c(0.5);
    let eig = SymmetricEigen::new(sym);

    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let energies: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors: Vec<Vector4<C64>> = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let tol = 1e-9 * scale;
    let resolver = degeneracy_resolver();
    let mut start = 0;
    while start < 4 {
        let mut end = start + 1;
        while end < 4 && energies[end] - energies[start] <= tol {
            end += 1;
        }
        if end - start > 1 {
            resolve_block(&mut vectors[start..end], &resolver);
        }
        start = end;
    }

    for v in vectors.iter_mut() {
        fix_phase(v);
    }
    let mut states = Mat4::zeros();
    for (i, v) in vectors.iter().enumerate() {
        states.set_column(i, v);
    }
    let levels = Levels {
        energies: [energies[0], energies[1], energies[2], energies[3]],
        states,
        spin_expectations: [0.0; 4],
    };
    Ok(levels.with_spin_axis(&Vector3::z()))
}

/// Rotates a degenerate block onto eigenvectors of `resolver` restricted to
/// the block, then orders it by dominant basis index.
fn resolve_block(block: &mut [Vector4<C64>], resolver: &Mat4) {
    let k = block.len();
    let mut projected = nalgebra::DMatrix::<C64>::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            projected[(i, j)] = (block[i].adjoint() * resolver * block[j])[(0, 0)];
        }
    }
    let projected = (&projected + projected.adjoint()) * c(0.5);
    let eig = SymmetricEigen::new(projected);
    let mut rotated: Vec<Vector4<C64>> = (0..k)
        .map(|col| {
            let mut v = Vector4::zeros();
            for (row, basis) in block.iter().enumerate() {
                v += basis * eig.eigenvectors[(row, col)];
            }
            v.normalize()
        })
        .collect();
    rotated.sort_by_key(dominant_index);
    block.clone_from_slice(&rotated);
}

/// Diagonalized manifold with spin expectations along the field direction.
pub fn manifold_levels(
    manifold: Manifold,
    field: &MagneticField,
    params: &SiVParams,
) -> Result<Levels, LevelsError> {
    field.validate()?;
    params.validate()?;
    let h = build_manifold_hamiltonian(manifold, field, params);
    Ok(eigenlevels(&h)?.with_spin_axis(&field.axis()))
}

/// One optical line between a ground and an excited level.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Excited letter (A = lowest excited level) followed by ground number
    /// (1 = lowest ground level), e.g. `A1`.
    pub label: String,
    /// E_excited − E_ground relative to the zero-field line, GHz.
    pub frequency_offset_ghz: f64,
    /// Normalized so the strongest line is 1.
    pub relative_strength: f64,
    pub ground_index: usize,
    pub excited_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable {
    /// Sorted by frequency.
    pub entries: Vec<Transition>,
}

impl TransitionTable {
    pub fn get(&self, label: &str) -> Option<&Transition> {
        self.entries.iter().find(|t| t.label == label)
    }

    /// The four lines between the lowest ground and lowest excited doublets.
    pub fn lowest_doublet_lines(&self) -> Vec<&Transition> {
        self.entries
            .iter()
            .filter(|t| t.ground_index < 2 && t.excited_index < 2)
            .collect()
    }
}

pub fn transition_label(ground_index: usize, excited_index: usize) -> String {
    let letter = (b'A' + excited_index as u8) as char;
    format!("{letter}{}", ground_index + 1)
}

/// Squared spin overlap between two orbital⊗spin states, summed over all
/// orbital pairs (equal orbital dipole elements).
pub fn spin_overlap_strength(excited: &Vector4<C64>, ground: &Vector4<C64>) -> f64 {
    let mut total = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let overlap = excited[2 * a].conj() * ground[2 * b]
                + excited[2 * a + 1].conj() * ground[2 * b + 1];
            total += overlap.norm_sqr();
        }
    }
    total
}

/// All 16 ground→excited lines with spin-overlap strengths.
pub fn transition_table(ground: &Levels, excited: &Levels) -> TransitionTable {
    let mut entries = Vec::with_capacity(16);
    for e in 0..4 {
        for g in 0..4 {
            entries.push(Transition {
                label: transition_label(g, e),
                frequency_offset_ghz: excited.energies[e] - ground.energies[g],
                relative_strength: spin_overlap_strength(&excited.state(e), &ground.state(g)),
                ground_index: g,
                excited_index: e,
            });
        }
    }
    let max = entries
        .iter()
        .map(|t| t.relative_strength)
        .fold(0.0, f64::max);
    if max > 0.0 {
        for t in entries.iter_mut() {
            t.relative_strength /= max;
        }
    }
    entries.sort_by(|a, b| a.frequency_offset_ghz.total_cmp(&b.frequency_offset_ghz));
    TransitionTable { entries }
}

/// Ground, excited and transitions for a field/parameter set.
pub fn optical_structure(
    field: &MagneticField,
    params: &SiVParams,
) -> Result<(Levels, Levels, TransitionTable), LevelsError> {
    let ground = manifold_levels(Manifold::Ground, field, params)?;
    let excited = manifold_levels(Manifold::Excited, field, params)?;
    let table = transition_table(&ground, &excited);
    Ok((ground, excited, table))
}

/// Uniform frequency grid, inclusive of `start`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl FrequencyGrid {
    pub fn points(&self) -> Vec<f64> {
        if !(self.step > 0.0) || !(self.stop >= self.start) || !self.start.is_finite() {
            return Vec::new();
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.start + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub frequencies: Vec<f64>,
    pub values: Vec<f64>,
}

impl Spectrum {
    /// Indices of strict interior local maxima above `threshold`.
    pub fn peak_indices(&self, threshold: f64) -> Vec<usize> {
        let v = &self.values;
        (1..v.len().saturating_sub(1))
            .filter(|&i| v[i] > v[i - 1] && v[i] >= v[i + 1] && v[i] > threshold)
            .collect()
    }
}

/// Lorentzian with unit peak and full width at half maximum `fwhm`.
pub fn lorentzian(detuning: f64, fwhm: f64) -> f64 {
    let x = 2.0 * detuning / fwhm;
    1.0 / (1.0 + x * x)
}

/// Sum of unit-peak Lorentzians weighted by line strength.
pub fn ple_stick_spectrum(
    table: &TransitionTable,
    linewidth_ghz: f64,
    grid: &FrequencyGrid,
) -> Result<Spectrum, LevelsError> {
    if !(linewidth_ghz > 0.0) {
        return Err(LevelsError::InvalidLinewidth(linewidth_ghz));
    }
    let frequencies = grid.points();
    if frequencies.is_empty() {
        return Err(LevelsError::EmptyGrid);
    }
    let values = frequencies
        .iter()
        .map(|&f| {
            table
                .entries
                .iter()
                .map(|t| t.relative_strength * lorentzian(f - t.frequency_offset_ghz, linewidth_ghz))
                .sum()
        })
        .collect();
    Ok(Spectrum {
        frequencies,
        values,
    })
}
