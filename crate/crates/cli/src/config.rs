//! Run configuration: TOML file plus `--set` overrides.
//!
//! Every physical quantity carries its unit in the key name. Optional keys
//! that are left out get a value derived from the rest of the config during
//! [`RunConfig::resolve`], so the manifest always holds plain numbers.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use siv_core::constants::zeeman_splitting_ghz;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Envelope,
    Fringes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    None,
    Ou,
    /// σ and τc chosen so the analytic Ramsey and echo times hit the targets.
    Calibrated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    ExponentialDecay,
    ExponentialRecovery,
    GaussianDecay,
    DampedSinusoid,
    EdgedSinusoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemBlock {
    pub field_tesla: f64,
    pub polar_angle_deg: f64,
    pub azimuth_deg: f64,
    pub lambda_gs_ghz: f64,
    pub lambda_es_ghz: f64,
    pub g_spin: f64,
    pub orbital_quench: f64,
    pub orbital_quench_es: f64,
    pub excited_lifetime_ns: f64,
    pub temperature_mk: f64,
}

impl Default for SystemBlock {
    fn default() -> Self {
        Self {
            field_tesla: 0.21,
            polar_angle_deg: 70.5,
            azimuth_deg: 0.0,
            lambda_gs_ghz: 48.0,
            lambda_es_ghz: 260.0,
            g_spin: 2.0,
            orbital_quench: 0.1,
            orbital_quench_es: 0.3,
            excited_lifetime_ns: 1.7,
            temperature_mk: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatesBlock {
    /// 0 disables spin relaxation.
    pub t1_ns: f64,
    /// Spin splitting for detailed balance; defaults to g·μB·B.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spin_splitting_ghz: Option<f64>,
    /// Markovian dephasing time of the spin coherence; 0 disables it.
    pub dephasing_time_ns: f64,
    /// Radiative branching into the lower ground level.
    pub branching_lower: f64,
}

impl Default for RatesBlock {
    fn default() -> Self {
        Self {
            t1_ns: 108_000.0,
            spin_splitting_ghz: None,
            dephasing_time_ns: 29.0,
            branching_lower: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceBlock {
    pub rabi_frequency_mhz: f64,
    pub one_photon_detuning_ghz: f64,
    /// Amplitude ratio of the tone-1 coupling to the upper excited branch; 0 disables it.
    pub spectator_ratio: f64,
    pub rabi_duration_ns: f64,
    pub time_step_ns: f64,
    /// Fluorescence falling-edge time constant; 0 disables it.
    pub falling_edge_ns: f64,

    pub pi_half_ns: f64,
    pub pi_ns: f64,
    /// One-photon detuning over single-tone Rabi frequency of the coherence pulses.
    pub detuning_to_rabi: f64,
    pub ramsey_detuning_mhz: f64,
    pub readout: Readout,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub delay_start_ns: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delay_stop_ns: Option<f64>,
    pub delay_points: usize,

    pub pump_transition: String,
    pub probe_transition: String,
    pub pump_rabi_mhz: f64,
    pub pump_duration_ns: f64,
    pub probe_rabi_mhz: f64,
    pub probe_duration_ns: f64,

    pub init_transition: String,
    pub init_rabi_mhz: f64,
    pub init_duration_ns: f64,
    pub init_points: usize,
    /// Splitting at which the init pump also drives the other ground level; 0 disables it.
    pub init_off_resonant_ghz: f64,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub ple_start_ghz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ple_stop_ghz: Option<f64>,
    pub ple_step_ghz: f64,
    pub ple_rabi_mhz: f64,
    /// Incoherent ground mixing from a second laser; 0 disables it.
    pub repump_rate_per_ns: f64,
}

impl Default for SequenceBlock {
    fn default() -> Self {
        Self {
            rabi_frequency_mhz: 1.54,
            one_photon_detuning_ghz: 3.0,
            spectator_ratio: 1.0,
            rabi_duration_ns: 3000.0,
            time_step_ns: 2.0,
            falling_edge_ns: 0.0,
            pi_half_ns: 4.0,
            pi_ns: 8.0,
            detuning_to_rabi: 10.0,
            ramsey_detuning_mhz: 0.0,
            readout: Readout::Envelope,
            delay_start_ns: None,
            delay_stop_ns: None,
            delay_points: 31,
            pump_transition: "B1".into(),
            probe_transition: "A2".into(),
            pump_rabi_mhz: 80.0,
            pump_duration_ns: 200.0,
            probe_rabi_mhz: 80.0,
            probe_duration_ns: 200.0,
            init_transition: "A2".into(),
            init_rabi_mhz: 50.0,
            init_duration_ns: 5000.0,
            init_points: 11,
            init_off_resonant_ghz: 0.0,
            ple_start_ghz: None,
            ple_stop_ghz: None,
            ple_step_ghz: 0.01,
            ple_rabi_mhz: 16.0,
            repump_rate_per_ns: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseBlock {
    pub model: NoiseModel,
    pub sigma_mhz: f64,
    pub tau_c_ns: f64,
    pub trajectories: usize,
    pub target_t2_star_ns: f64,
    pub target_echo_ratio: f64,
}

impl Default for NoiseBlock {
    fn default() -> Self {
        Self {
            model: NoiseModel::None,
            sigma_mhz: 5.0,
            tau_c_ns: 1000.0,
            trajectories: 400,
            target_t2_star_ns: 29.0,
            target_echo_ratio: 4.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsBlock {
    pub flipflop_khz: f64,
    pub bath_zeeman_mk: f64,
    pub resonant_mhz: f64,
    pub coupling_khz_per_ppm: f64,
    pub t1_low_ns: f64,
    pub t_low_mk: f64,
    pub t1_high_ns: f64,
    pub t_high_mk: f64,
    pub orbital_splitting_ghz: f64,
    pub t_floor_mk: f64,
    pub temperature_min_mk: f64,
    pub temperature_max_mk: f64,
    pub temperature_points: usize,
}

impl Default for ModelsBlock {
    fn default() -> Self {
        Self {
            flipflop_khz: 6.34,
            bath_zeeman_mk: 280.0,
            resonant_mhz: 1.15,
            coupling_khz_per_ppm: 1150.0 / 3.8,
            t1_low_ns: 108_000.0,
            t_low_mk: 12.0,
            t1_high_ns: 303.0,
            t_high_mk: 3700.0,
            orbital_splitting_ghz: 48.0,
            t_floor_mk: 40.0,
            temperature_min_mk: 10.0,
            temperature_max_mk: 10_000.0,
            temperature_points: 61,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitBlock {
    /// Delimiter-separated table with a header row.
    pub input: String,
    pub model: FitModel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_column: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_column: Option<String>,
}

impl Default for FitBlock {
    fn default() -> Self {
        Self {
            input: String::new(),
            model: FitModel::ExponentialDecay,
            x_column: None,
            y_column: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub dir: String,
    /// File stem; defaults to the subcommand name.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prefix: Option<String>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            prefix: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub system: SystemBlock,
    pub rates: RatesBlock,
    pub sequence: SequenceBlock,
    pub noise: NoiseBlock,
    pub models: ModelsBlock,
    pub fit: FitBlock,
    pub output: OutputBlock,
    /// Manifest-only sections, accepted and dropped on load.
    #[serde(skip_serializing)]
    pub run: Option<toml::Table>,
    #[serde(skip_serializing)]
    pub results: Option<toml::Table>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            system: SystemBlock::default(),
            rates: RatesBlock::default(),
            sequence: SequenceBlock::default(),
            noise: NoiseBlock::default(),
            models: ModelsBlock::default(),
            fit: FitBlock::default(),
            output: OutputBlock::default(),
            run: None,
            results: None,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key=value` (or `section.key=value`) to a raw table.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError(format!("override {spec:?} has an empty key")));
    }
    let mut node = table;
    for section in &path[..path.len() - 1] {
        node = node
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError(format!("override {key}: {section} is not a section")))?;
    }
    node.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses config text, then applies overrides in order.
    pub fn load(text: &str, source: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        // parse once typed so errors carry line and column
        toml::from_str::<RunConfig>(text).map_err(|e| ConfigError(format!("{source}: {e}")))?;
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError(format!("{source}: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(format!("after overrides: {e}")))?;
        cfg.run = None;
        cfg.results = None;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config serializes to a table")
    }

    pub fn spin_splitting_ghz(&self) -> f64 {
        self.rates
            .spin_splitting_ghz
            .unwrap_or_else(|| zeeman_splitting_ghz(self.system.field_tesla, self.system.g_spin))
    }

    /// Fills derived optional keys so the manifest is fully explicit.
    pub fn resolve(&mut self, subcommand: &str) {
        self.rates.spin_splitting_ghz = Some(self.spin_splitting_ghz());
        let s = &mut self.sequence;
        let (start, stop) = match subcommand {
            "t1" => (20.0, 20.0 + 5.0 * self.rates.t1_ns),
            "echo" => (0.0, 5.0 * self.noise.target_t2_star_ns * self.noise.target_echo_ratio),
            _ => (0.0, 5.0 * self.noise.target_t2_star_ns),
        };
        s.delay_start_ns.get_or_insert(start);
        s.delay_stop_ns.get_or_insert(stop);
        self.output.prefix.get_or_insert_with(|| subcommand.to_string());
    }

    pub fn delays(&self) -> Vec<f64> {
        let s = &self.sequence;
        let (a, b) = (s.delay_start_ns.unwrap_or(0.0), s.delay_stop_ns.unwrap_or(0.0));
        linspace(a, b, s.delay_points)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::load("", "inline", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn override_beats_file() {
        let text = "[system]\ntemperature_mk = 100.0\n";
        let cfg = RunConfig::load(text, "inline", &["system.temperature_mk=3700".into()]).unwrap();
        assert_eq!(cfg.system.temperature_mk, 3700.0);
    }

    #[test]
    fn override_parses_strings_and_numbers() {
        let cfg = RunConfig::load(
            "",
            "inline",
            &["sequence.pump_transition=A1".into(), "seed=42".into(), "noise.model=\"ou\"".into()],
        )
        .unwrap();
        assert_eq!(cfg.sequence.pump_transition, "A1");
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.noise.model, NoiseModel::Ou);
    }

    #[test]
    fn unknown_key_reports_line_and_name() {
        let err = RunConfig::load("[system]\nfield_tesla = 0.2\nfeild_gauss = 3\n", "cfg.toml", &[]).unwrap_err();
        assert!(err.0.contains("feild_gauss"), "{}", err.0);
        assert!(err.0.contains("line 3"), "{}", err.0);
    }

    #[test]
    fn wrong_type_rejected() {
        assert!(RunConfig::load("seed = \"abc\"\n", "inline", &[]).is_err());
        assert!(RunConfig::load("", "inline", &["noise.model=brownian".into()]).is_err());
        assert!(RunConfig::load("", "inline", &["novalue".into()]).is_err());
        assert!(RunConfig::load("", "inline", &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::load("", "inline", &["sequence.delay_points=7".into()]).unwrap();
        cfg.resolve("echo");
        let text = toml::to_string(&cfg.to_toml()).unwrap();
        let back = RunConfig::load(&text, "manifest", &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn manifest_sections_ignored() {
        let text = "[run]\nversion = \"0.1.0\"\n[results]\nT1_ns = 3.0\n";
        assert_eq!(RunConfig::load(text, "m", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn resolve_defaults_follow_subcommand() {
        let mut cfg = RunConfig::default();
        cfg.resolve("t1");
        assert_eq!(cfg.sequence.delay_start_ns, Some(20.0));
        assert_eq!(cfg.sequence.delay_stop_ns, Some(20.0 + 540_000.0));
        assert_eq!(cfg.output.prefix.as_deref(), Some("t1"));
        assert!((cfg.spin_splitting_ghz() - 5.878).abs() < 1e-3);
    }

    #[test]
    fn linspace_endpoints() {
        assert_eq!(linspace(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
        assert_eq!(linspace(2.0, 5.0, 1), vec![2.0]);
        assert!(linspace(0.0, 1.0, 0).is_empty());
    }
}
