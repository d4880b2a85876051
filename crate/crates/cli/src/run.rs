use std::f64::consts::PI;
use std::fmt::Display;

use siv_core::dynamics::RateSet;
use siv_core::fit::{
    fit_damped_sinusoid, fit_edged_sinusoid, fit_exponential, fit_gaussian_decay, ExpMode, FitResult,
};
use siv_core::levels::{optical_structure, MagneticField, SiVParams};
use siv_core::models::{
    bath_density_ppm, calibrate_t1_model, echo_rate, spin_t1_rate, EchoModelParams, T1Calibration,
};
use siv_core::noise::{average_with_noise, calibrate_bath_noise, CalibrationTarget, OUProcess};
use siv_core::sequences::{
    init_fidelity, lowest_lines, optical_pumping_t1, ple_line_heights, ple_scan, rabi_experiment,
    CoherenceExperiment, ExperimentTrace, InitConfig, PleConfig, RabiConfig, RamanDrive, ReadoutMode, Spectator,
    T1Config, Transition,
};

use crate::config::{linspace, FitModel, NoiseModel, Readout, RunConfig};

pub const SUBCOMMANDS: [&str; 11] = [
    "levels", "ple", "rabi", "ramsey", "echo", "t1", "fidelity", "eq1", "t1model", "bathdensity", "fit",
];

#[derive(Debug)]
pub enum RunError {
    Config(String),
    Numerical(String),
}

fn config_err(what: &str, e: impl Display) -> RunError {
    RunError::Config(format!("{what}: {e}"))
}

fn numerical(op: &str, e: impl Display) -> RunError {
    RunError::Numerical(format!("{op} failed: {e}"))
}

/// Files to write (suffix, contents) and scalar results for the report.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<(String, String)>,
    pub results: Vec<(String, toml::Value)>,
}

impl Outcome {
    fn file(&mut self, suffix: &str, contents: String) {
        self.files.push((suffix.to_string(), contents));
    }

    fn num(&mut self, key: &str, v: f64) {
        self.results.push((key.to_string(), toml::Value::Float(v)));
    }

    fn text(&mut self, key: &str, v: impl Into<String>) {
        self.results.push((key.to_string(), toml::Value::String(v.into())));
    }

    fn fit_report(&mut self, fit: &FitResult) {
        self.text("fit_model", fit.model_name.clone());
        for (i, name) in fit.names.iter().enumerate() {
            self.num(name, fit.params[i]);
            self.num(&format!("{name}_stderr"), fit.uncertainties[i]);
        }
        self.num("fit_residual_norm", fit.residual_norm);
        self.results.push(("fit_converged".into(), toml::Value::Boolean(fit.converged)));
    }
}

/// Comma-separated table, shortest round-trip floats, LF endings.
pub fn csv_table(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn mhz(f: f64) -> f64 {
    2.0 * PI * f * 1e-3
}

fn field(cfg: &RunConfig) -> Result<MagneticField, RunError> {
    let s = &cfg.system;
    let f = MagneticField {
        magnitude_tesla: s.field_tesla,
        polar_angle_deg: s.polar_angle_deg,
        azimuth_deg: s.azimuth_deg,
    };
    f.validate().map_err(|e| config_err("system", e))?;
    Ok(f)
}

fn params(cfg: &RunConfig) -> Result<SiVParams, RunError> {
    let s = &cfg.system;
    if !(s.excited_lifetime_ns > 0.0) {
        return Err(config_err("system", "excited_lifetime_ns must be > 0"));
    }
    let p = SiVParams {
        lambda_gs_ghz: s.lambda_gs_ghz,
        lambda_es_ghz: s.lambda_es_ghz,
        g_spin: s.g_spin,
        orbital_quench: s.orbital_quench,
        orbital_quench_es: s.orbital_quench_es,
        gamma_rad: 1.0 / s.excited_lifetime_ns,
    };
    p.validate().map_err(|e| config_err("system", e))?;
    Ok(p)
}

fn temperature_k(cfg: &RunConfig) -> Result<f64, RunError> {
    let t = cfg.system.temperature_mk;
    if !(t.is_finite() && t >= 0.0) {
        return Err(config_err("system", format!("temperature_mk must be >= 0, got {t}")));
    }
    Ok(t * 1e-3)
}

fn rates(cfg: &RunConfig) -> Result<RateSet, RunError> {
    let r = &cfg.rates;
    if !(r.t1_ns.is_finite() && r.t1_ns >= 0.0) {
        return Err(config_err("rates", format!("t1_ns must be >= 0, got {}", r.t1_ns)));
    }
    if !(r.dephasing_time_ns.is_finite() && r.dephasing_time_ns >= 0.0) {
        return Err(config_err("rates", "dephasing_time_ns must be >= 0"));
    }
    let gamma_phi = if r.dephasing_time_ns > 0.0 { 1.0 / r.dephasing_time_ns } else { 0.0 };
    let mut set = RateSet::thermal(
        params(cfg)?.gamma_rad,
        r.t1_ns,
        cfg.spin_splitting_ghz(),
        temperature_k(cfg)?,
        gamma_phi,
    );
    set.branching = [r.branching_lower, 1.0 - r.branching_lower];
    set.validate().map_err(|e| config_err("rates", e))?;
    Ok(set)
}

fn transition(name: &str, key: &str) -> Result<Transition, RunError> {
    name.parse().map_err(|e| config_err(key, e))
}

fn delays(cfg: &RunConfig) -> Result<Vec<f64>, RunError> {
    let d = cfg.delays();
    if d.len() < 2 || d.iter().any(|x| !x.is_finite() || *x < 0.0) || d.windows(2).any(|w| w[1] <= w[0]) {
        return Err(config_err(
            "sequence",
            "delays must be >= 0 and strictly increasing with delay_points >= 2",
        ));
    }
    Ok(d)
}

fn trace_report(out: &mut Outcome, trace: &ExperimentTrace) {
    out.num("max_trace_error", trace.physicality.max_trace_error);
    out.num("max_hermiticity_error", trace.physicality.max_hermiticity_error);
    if trace.physicality.min_eigenvalue.is_finite() {
        out.num("min_eigenvalue", trace.physicality.min_eigenvalue);
    }
    out.file(".csv", trace.to_csv());
}

pub fn run(subcommand: &str, cfg: &RunConfig) -> Result<Outcome, RunError> {
    match subcommand {
        "levels" => levels(cfg),
        "ple" => ple(cfg),
        "rabi" => rabi(cfg),
        "ramsey" | "echo" => coherence(subcommand, cfg),
        "t1" => t1(cfg),
        "fidelity" => fidelity(cfg),
        "eq1" => echo_model(cfg),
        "t1model" => t1model(cfg),
        "bathdensity" => bathdensity(cfg),
        "fit" => fit(cfg),
        other => Err(RunError::Config(format!("unknown subcommand {other:?}"))),
    }
}

fn levels(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let (field, params) = (field(cfg)?, params(cfg)?);
    let (ground, excited, table) = optical_structure(&field, &params).map_err(|e| numerical("diagonalization", e))?;
    let mut out = Outcome::default();
    let mut rows = Vec::new();
    for (m, levels) in [(0.0, &ground), (1.0, &excited)] {
        for i in 0..4 {
            rows.push(vec![m, (i + 1) as f64, levels.energies[i], levels.spin_expectations[i]]);
        }
    }
    for (i, e) in ground.energies.iter().enumerate() {
        out.num(&format!("ground_{}_ghz", i + 1), *e);
    }
    for (i, e) in excited.energies.iter().enumerate() {
        out.num(&format!("excited_{}_ghz", i + 1), *e);
    }
    out.file(".csv", csv_table(&["excited_manifold", "level", "energy_ghz", "spin_projection"], &rows));
    let mut lines = String::from("label,frequency_offset_ghz,relative_strength\n");
    for t in &table.entries {
        lines.push_str(&format!("{},{:?},{:?}\n", t.label, t.frequency_offset_ghz, t.relative_strength));
    }
    out.file("_transitions.csv", lines);
    Ok(out)
}

fn ple(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let (field, params) = (field(cfg)?, params(cfg)?);
    let s = &cfg.sequence;
    let lines = lowest_lines(&field, &params).map_err(|e| numerical("line positions", e))?;
    let lo = lines.iter().map(|l| l.1).fold(f64::INFINITY, f64::min);
    let hi = lines.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
    let (start, stop) = (s.ple_start_ghz.unwrap_or(lo - 1.0), s.ple_stop_ghz.unwrap_or(hi + 1.0));
    if !(s.ple_step_ghz > 0.0 && stop > start) {
        return Err(config_err("sequence", "need ple_step_ghz > 0 and ple_stop_ghz > ple_start_ghz"));
    }
    let n = ((stop - start) / s.ple_step_ghz + 1e-9).floor() as usize + 1;
    let pc = PleConfig {
        field,
        params,
        rates: rates(cfg)?,
        probe_rabi: mhz(s.ple_rabi_mhz),
        frequencies: (0..n).map(|i| start + i as f64 * s.ple_step_ghz).collect(),
        repump_rate: (s.repump_rate_per_ns > 0.0).then_some(s.repump_rate_per_ns),
    };
    let trace = ple_scan(&pc).map_err(|e| numerical("PLE scan", e))?;
    let heights = ple_line_heights(&pc).map_err(|e| numerical("PLE line heights", e))?;
    let mut out = Outcome::default();
    for ((t, f, strength), (_, h)) in lines.iter().zip(&heights) {
        out.num(&format!("{}_frequency_ghz", t.label()), *f);
        out.num(&format!("{}_strength", t.label()), *strength);
        out.num(&format!("{}_height_per_ns", t.label()), *h);
    }
    trace_report(&mut out, &trace);
    Ok(out)
}

fn rabi(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let s = &cfg.sequence;
    let mut drive = RamanDrive::calibrated(mhz(s.rabi_frequency_mhz), 2.0 * PI * s.one_photon_detuning_ghz);
    if s.spectator_ratio > 0.0 {
        let (_, excited, _) = optical_structure(&field(cfg)?, &params(cfg)?).map_err(|e| numerical("diagonalization", e))?;
        drive = drive.with_spectator(Spectator {
            ratio: s.spectator_ratio,
            excited_splitting: 2.0 * PI * (excited.energies[1] - excited.energies[0]),
        });
    }
    let rc = RabiConfig {
        drive,
        rates: rates(cfg)?,
        pulse_length: s.rabi_duration_ns,
        time_step: s.time_step_ns,
        falling_edge_tau: (s.falling_edge_ns > 0.0).then_some(s.falling_edge_ns),
        tolerance: 1e-7,
    };
    let trace = rabi_experiment(&rc).map_err(|e| match e {
        siv_core::sequences::SequenceError::InvalidInput(m) => config_err("sequence", m),
        e => numerical("Rabi evolution", e),
    })?;
    let fitted = if rc.falling_edge_tau.is_some() {
        fit_edged_sinusoid(&trace.abscissa, &trace.signal)
    } else {
        fit_damped_sinusoid(&trace.abscissa, &trace.signal)
    }
    .map_err(|e| numerical("sinusoid fit", e))?;
    let mut out = Outcome::default();
    out.num("rabi_frequency_mhz", fitted.get("frequency") * 1e3);
    out.fit_report(&fitted);
    trace_report(&mut out, &trace);
    Ok(out)
}

fn coherence(kind: &str, cfg: &RunConfig) -> Result<Outcome, RunError> {
    let s = &cfg.sequence;
    let base = rates(cfg)?;
    let mut drive = RamanDrive::for_rotation(PI / 2.0, s.pi_half_ns, s.detuning_to_rabi);
    drive.two_photon_detuning = mhz(s.ramsey_detuning_mhz);
    let delays = delays(cfg)?;
    let exp = if kind == "echo" {
        CoherenceExperiment::echo(drive, base, s.pi_half_ns, s.pi_ns, delays)
    } else {
        let mode = match s.readout {
            Readout::Envelope => ReadoutMode::Envelope,
            Readout::Fringes => ReadoutMode::Fringes,
        };
        CoherenceExperiment::ramsey(drive, base, s.pi_half_ns, delays, mode)
    }
    .map_err(|e| config_err("sequence", e))?;

    let n = &cfg.noise;
    let process = match n.model {
        NoiseModel::None => None,
        NoiseModel::Ou => Some(OUProcess::new(mhz(n.sigma_mhz), n.tau_c_ns).map_err(|e| config_err("noise", e))?),
        NoiseModel::Calibrated => {
            let target = CalibrationTarget::new(n.target_t2_star_ns, n.target_echo_ratio, base.gamma_phi)
                .with_pi_half(s.pi_half_ns);
            let cal = calibrate_bath_noise(&target).map_err(|e| numerical("noise calibration", e))?;
            Some(cal.best.process)
        }
    };
    let mut out = Outcome::default();
    let trace = match process {
        None => exp.execute().map_err(|e| numerical("coherence evolution", e))?,
        Some(p) => {
            if n.trajectories < 2 {
                return Err(config_err("noise", "trajectories must be >= 2"));
            }
            out.num("ou_sigma_rad_per_ns", p.sigma);
            out.num("ou_tau_c_ns", p.tau_c);
            average_with_noise(&exp, &p, n.trajectories, cfg.seed).map_err(|e| numerical("Monte Carlo average", e))?
        }
    };
    if s.readout == Readout::Envelope || kind == "echo" {
        let f = fit_exponential(&trace.abscissa, &trace.signal, ExpMode::Decay)
            .map_err(|e| numerical("exponential fit", e))?;
        let key = if kind == "echo" { "T2_echo_ns" } else { "T2_star_ns" };
        out.num(key, f.time_constant());
        out.num(&format!("{key}_stderr"), f.time_constant_uncertainty());
    }
    trace_report(&mut out, &trace);
    Ok(out)
}

fn t1(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let s = &cfg.sequence;
    if !(cfg.rates.t1_ns > 0.0) {
        return Err(config_err("rates", "t1 needs t1_ns > 0"));
    }
    let tc = T1Config {
        rates: rates(cfg)?,
        pump: transition(&s.pump_transition, "sequence.pump_transition")?,
        probe: transition(&s.probe_transition, "sequence.probe_transition")?,
        pump_rabi: mhz(s.pump_rabi_mhz),
        pump_duration: s.pump_duration_ns,
        probe_rabi: mhz(s.probe_rabi_mhz),
        probe_duration: s.probe_duration_ns,
        delays: delays(cfg)?,
        temperature_k: temperature_k(cfg)?,
    };
    let r = optical_pumping_t1(&tc).map_err(|e| match e {
        siv_core::sequences::SequenceError::InvalidInput(m) => config_err("sequence", m),
        e => numerical("optical pumping", e),
    })?;
    let mut out = Outcome::default();
    out.num("pumped_fraction", r.pumped_fraction);
    let fit = r.fit.as_ref().map_err(|e| numerical("recovery fit", e))?;
    out.num("T1_ns", fit.time_constant());
    out.num("T1_ns_stderr", fit.time_constant_uncertainty());
    trace_report(&mut out, &r.trace);
    Ok(out)
}

fn fidelity(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let s = &cfg.sequence;
    if s.init_points < 1 || !(s.init_duration_ns >= 0.0) {
        return Err(config_err("sequence", "need init_points >= 1 and init_duration_ns >= 0"));
    }
    let base = InitConfig {
        rates: rates(cfg)?,
        pump: transition(&s.init_transition, "sequence.init_transition")?,
        pump_rabi: mhz(s.init_rabi_mhz),
        pump_duration: s.init_duration_ns,
        ground_splitting: 2.0 * PI * s.init_off_resonant_ghz,
    };
    let mut rows = Vec::new();
    for d in linspace(0.0, s.init_duration_ns, s.init_points.max(2)) {
        let f = init_fidelity(&InitConfig { pump_duration: d, ..base.clone() }).map_err(|e| match e {
            siv_core::sequences::SequenceError::InvalidInput(m) => config_err("sequence", m),
            e => numerical("initialization", e),
        })?;
        rows.push(vec![d, f]);
    }
    let mut out = Outcome::default();
    out.num("rho11", rows.last().expect("at least two points")[1]);
    out.file(".csv", csv_table(&["pump_duration_ns", "rho11"], &rows));
    Ok(out)
}

fn temperature_grid(cfg: &RunConfig) -> Result<Vec<f64>, RunError> {
    let m = &cfg.models;
    if !(m.temperature_min_mk > 0.0 && m.temperature_max_mk > m.temperature_min_mk && m.temperature_points >= 2) {
        return Err(config_err("models", "need 0 < temperature_min_mk < temperature_max_mk and temperature_points >= 2"));
    }
    let (a, b) = (m.temperature_min_mk.ln(), m.temperature_max_mk.ln());
    Ok(linspace(a, b, m.temperature_points).into_iter().map(|x| x.exp() * 1e-3).collect())
}

fn echo_model(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let m = &cfg.models;
    let p = EchoModelParams {
        c: 2.0 * PI * m.flipflop_khz * 1e-6,
        t_z: m.bath_zeeman_mk * 1e-3,
        gamma_res: mhz(m.resonant_mhz),
    };
    if [p.c, p.t_z, p.gamma_res].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(config_err("models", "echo-model parameters must be >= 0"));
    }
    let t = temperature_k(cfg)?;
    let rate = echo_rate(t, &p);
    let rows: Vec<Vec<f64>> = temperature_grid(cfg)?
        .into_iter()
        .map(|t| {
            let r = echo_rate(t, &p);
            vec![t, r, 1.0 / r]
        })
        .collect();
    let mut out = Outcome::default();
    out.num("temperature_k", t);
    out.num("echo_rate_mhz", rate / (2.0 * PI) * 1e3);
    out.num("T2_echo_ns", 1.0 / rate);
    out.file(".csv", csv_table(&["temperature_k", "echo_rate_rad_per_ns", "t2_echo_ns"], &rows));
    Ok(out)
}

fn t1model(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let m = &cfg.models;
    let cal = T1Calibration {
        t_low: m.t_low_mk * 1e-3,
        t1_low_ns: m.t1_low_ns,
        t_high: m.t_high_mk * 1e-3,
        t1_high_ns: m.t1_high_ns,
    };
    let p = calibrate_t1_model(&cal, cfg.spin_splitting_ghz(), m.orbital_splitting_ghz, m.t_floor_mk * 1e-3)
        .map_err(|e| numerical("T1 model calibration", e))?;
    p.validate().map_err(|e| config_err("models", e))?;
    let rows: Vec<Vec<f64>> = temperature_grid(cfg)?
        .into_iter()
        .map(|t| {
            let r = spin_t1_rate(t, &p);
            vec![t, r, 1.0 / r]
        })
        .collect();
    let t = temperature_k(cfg)?;
    let mut out = Outcome::default();
    out.num("a_direct_per_ns", p.a_direct);
    out.num("a_orbital_per_ns", p.a_orbital);
    out.num("temperature_k", t);
    out.num("T1_ns", 1.0 / spin_t1_rate(t, &p));
    out.num("endpoint_rate_ratio", spin_t1_rate(cal.t_high, &p) / spin_t1_rate(cal.t_low, &p));
    out.file(".csv", csv_table(&["temperature_k", "rate_per_ns", "t1_ns"], &rows));
    Ok(out)
}

fn bathdensity(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let m = &cfg.models;
    let coupling = mhz(m.coupling_khz_per_ppm * 1e-3);
    let density = bath_density_ppm(mhz(m.resonant_mhz), coupling).map_err(|e| config_err("models", e))?;
    let mut rows = Vec::new();
    for g in linspace(0.0, 2.0 * m.resonant_mhz, 21) {
        rows.push(vec![g, bath_density_ppm(mhz(g), coupling).map_err(|e| config_err("models", e))?]);
    }
    let mut out = Outcome::default();
    out.num("density_ppm", density);
    out.file(".csv", csv_table(&["resonant_mhz", "density_ppm"], &rows));
    Ok(out)
}

fn read_columns(cfg: &RunConfig) -> Result<(String, String, Vec<f64>, Vec<f64>), RunError> {
    let f = &cfg.fit;
    if f.input.is_empty() {
        return Err(config_err("fit", "input is not set"));
    }
    let text = std::fs::read_to_string(&f.input).map_err(|e| config_err(&format!("fit.input {}", f.input), e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| config_err("fit.input", "empty file"))?
        .split(',')
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &Option<String>, default: usize| -> Result<usize, RunError> {
        match name {
            Some(n) => header.iter().position(|h| h == n).ok_or_else(|| config_err("fit", format!("no column {n:?}"))),
            None if default < header.len() => Ok(default),
            None => Err(config_err("fit.input", "needs at least two columns")),
        }
    };
    let (xi, yi) = (find(&f.x_column, 0)?, find(&f.y_column, 1)?);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let cell = |i: usize| -> Result<f64, RunError> {
            cells
                .get(i)
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| config_err("fit.input", format!("data row {} column {} is not a number", n + 1, i + 1)))
        };
        x.push(cell(xi)?);
        y.push(cell(yi)?);
    }
    Ok((header[xi].clone(), header[yi].clone(), x, y))
}

fn evaluate(model: FitModel, r: &FitResult, x: f64) -> f64 {
    let p = |n: &str| r.get(n);
    let sinus = || p("amplitude") * (-p("decay_rate") * x).exp() * (2.0 * PI * p("frequency") * x + p("phase")).cos();
    match model {
        FitModel::ExponentialDecay => p("amplitude") * (-p("rate") * x).exp() + p("offset"),
        FitModel::ExponentialRecovery => p("amplitude") * (1.0 - (-p("rate") * x).exp()) + p("offset"),
        FitModel::GaussianDecay => p("amplitude") * (-(x / p("tau")).powi(2)).exp() + p("offset"),
        FitModel::DampedSinusoid => sinus() + p("offset"),
        FitModel::EdgedSinusoid => (-p("edge_rate") * x).exp() * (sinus() + p("offset")),
    }
}

fn fit(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let (xn, yn, x, y) = read_columns(cfg)?;
    let result = match cfg.fit.model {
        FitModel::ExponentialDecay => fit_exponential(&x, &y, ExpMode::Decay),
        FitModel::ExponentialRecovery => fit_exponential(&x, &y, ExpMode::Recovery),
        FitModel::GaussianDecay => fit_gaussian_decay(&x, &y),
        FitModel::DampedSinusoid => fit_damped_sinusoid(&x, &y),
        FitModel::EdgedSinusoid => fit_edged_sinusoid(&x, &y),
    }
    .map_err(|e| numerical("fit", e))?;
    let mut out = Outcome::default();
    out.fit_report(&result);
    if matches!(cfg.fit.model, FitModel::ExponentialDecay | FitModel::ExponentialRecovery) {
        out.num("time_constant", result.time_constant());
        out.num("time_constant_stderr", result.time_constant_uncertainty());
    }
    let rows: Vec<Vec<f64>> = x
        .iter()
        .zip(&y)
        .map(|(&xi, &yi)| {
            let m = evaluate(cfg.fit.model, &result, xi);
            vec![xi, yi, m, yi - m]
        })
        .collect();
    out.file(".csv", csv_table(&[&xn, &yn, "model", "residual"], &rows));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let s = csv_table(&["a", "b"], &[vec![1.0, 0.5], vec![2.0, 1e-20]]);
        assert_eq!(s, "a,b\n1.0,0.5\n2.0,1e-20\n");
    }

    #[test]
    fn echo_model_defaults_give_reference_time() {
        let out = echo_model(&RunConfig::default()).unwrap();
        let t2 = out.results.iter().find(|(k, _)| k == "T2_echo_ns").unwrap().1.as_float().unwrap();
        assert!((t2 / 138.3 - 1.0).abs() < 0.005);
    }

    #[test]
    fn zero_field_ground_levels() {
        let mut cfg = RunConfig::default();
        cfg.system.field_tesla = 0.0;
        let out = levels(&cfg).unwrap();
        let get = |k: &str| out.results.iter().find(|(n, _)| n == k).unwrap().1.as_float().unwrap();
        assert!((get("ground_1_ghz") + 24.0).abs() < 1e-9);
        assert!((get("ground_2_ghz") + 24.0).abs() < 1e-9);
        assert!((get("ground_3_ghz") - 24.0).abs() < 1e-9);
        assert!((get("ground_4_ghz") - 24.0).abs() < 1e-9);
    }

    #[test]
    fn bath_density_default() {
        let out = bathdensity(&RunConfig::default()).unwrap();
        assert!((out.results[0].1.as_float().unwrap() - 3.8).abs() < 1e-12);
    }

    #[test]
    fn bad_transition_is_config_error() {
        let mut cfg = RunConfig::default();
        cfg.sequence.init_transition = "C3".into();
        assert!(matches!(fidelity(&cfg), Err(RunError::Config(_))));
        cfg.sequence.init_transition = "A1".into();
        assert!(matches!(fidelity(&cfg), Err(RunError::Config(_))));
    }

    #[test]
    fn miscalibrated_echo_is_config_error() {
        let mut cfg = RunConfig::default();
        cfg.resolve("echo");
        cfg.sequence.pi_ns = 5.0;
        assert!(matches!(coherence("echo", &cfg), Err(RunError::Config(_))));
    }
}
