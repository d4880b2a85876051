//! CODATA 2018 constants (SI) and derived conversion factors.

/// Planck constant, J s (exact).
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Boltzmann constant, J/K (exact).
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Bohr magneton, J/T.
pub const BOHR_MAGNETON: f64 = 9.274_010_078_3e-24;

/// Bohr magneton in frequency units, GHz/T.
pub const BOHR_MAGNETON_GHZ_PER_TESLA: f64 = BOHR_MAGNETON / PLANCK * 1e-9;

/// h·(1 GHz)/k_B in kelvin.
pub const KELVIN_PER_GHZ: f64 = PLANCK * 1e9 / BOLTZMANN;

/// Converts a cyclic frequency in GHz to an angular frequency in rad/ns.
pub fn ghz_to_angular(f_ghz: f64) -> f64 {
    std::f64::consts::TAU * f_ghz
}

/// Converts an angular frequency in rad/ns to a cyclic frequency in GHz.
pub fn angular_to_ghz(omega: f64) -> f64 {
    omega / std::f64::consts::TAU
}

/// Spin Zeeman splitting g·μ_B·B/h in GHz.
pub fn zeeman_splitting_ghz(field_tesla: f64, g: f64) -> f64 {
    g * BOHR_MAGNETON_GHZ_PER_TESLA * field_tesla
}

/// Boltzmann population ratio exp(−h·ν/(k_B·T)) for a splitting ν in GHz.
/// Zero temperature maps to zero.
pub fn boltzmann_ratio(splitting_ghz: f64, temperature_k: f64) -> f64 {
    if temperature_k <= 0.0 {
        return 0.0;
    }
    (-splitting_ghz * KELVIN_PER_GHZ / temperature_k).exp()
}
