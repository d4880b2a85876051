use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sivsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sivsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn out_arg(dir: &Path) -> String {
    dir.display().to_string()
}

fn result(o: &Output, key: &str) -> f64 {
    let text = stdout(o);
    let line = text
        .lines()
        .find(|l| l.starts_with(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no {key} in output:\n{text}"));
    line.split(" = ").nth(1).unwrap().parse().unwrap()
}

#[test]
fn echo_model_subcommand_reports_echo_time() {
    let dir = tempfile::tempdir().unwrap();
    let o = sivsim(&["eq1", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("T2_echo_ns = 138.3"), "{}", stdout(&o));
    let csv = fs::read_to_string(dir.path().join("eq1.csv")).unwrap();
    assert!(csv.starts_with("temperature_k,echo_rate_rad_per_ns,t2_echo_ns\n"));
    assert!(dir.path().join("eq1.manifest.toml").exists());
}

#[test]
fn zero_field_levels() {
    let dir = tempfile::tempdir().unwrap();
    let o = sivsim(&["levels", "--set", "system.field_tesla=0", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    for (k, v) in [("ground_1_ghz", -24.0), ("ground_2_ghz", -24.0), ("ground_3_ghz", 24.0), ("ground_4_ghz", 24.0)] {
        assert!((result(&o, k) - v).abs() < 1e-9, "{k}");
    }
    let lines = fs::read_to_string(dir.path().join("levels_transitions.csv")).unwrap();
    assert_eq!(lines.lines().count(), 17);
}

#[test]
fn noise_free_rerun_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = sivsim(&["ramsey", "--quiet", "--out", &out_arg(d.path())]);
        assert_eq!(o.status.code(), Some(0));
        assert!(stdout(&o).is_empty());
    }
    let x = fs::read(a.path().join("ramsey.csv")).unwrap();
    assert_eq!(x, fs::read(b.path().join("ramsey.csv")).unwrap());
    assert!(String::from_utf8(x).unwrap().starts_with("delay_ns,signal\n"));
}

#[test]
fn seeded_monte_carlo_rerun_is_byte_identical() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |d: &Path, seed: &str| {
        let o = sivsim(&[
            "echo",
            "--set",
            "noise.model=ou",
            "--set",
            "sequence.delay_points=6",
            "--trajectories",
            "16",
            "--seed",
            seed,
            "--out",
            &out_arg(d),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read_to_string(d.join("echo.csv")).unwrap()
    };
    let x = run(a.path(), "5");
    assert!(x.starts_with("delay_ns,signal,stderr\n"));
    assert_eq!(x, run(b.path(), "5"));
    assert_ne!(x, run(c.path(), "6"));
}

#[test]
fn manifest_reruns_to_same_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o = sivsim(&[
        "t1",
        "--set",
        "rates.t1_ns=303",
        "--set",
        "system.temperature_mk=3700",
        "--set",
        "sequence.delay_points=12",
        "--out",
        &out_arg(a.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!((result(&o, "T1_ns") / 303.0 - 1.0).abs() < 0.05);
    let manifest = a.path().join("t1.manifest.toml");
    let text = fs::read_to_string(&manifest).unwrap();
    assert!(text.contains("t1_ns = 303.0"));
    assert!(text.contains("temperature_mk = 3700.0"));
    assert!(text.contains("delay_stop_ns = 1535.0"));
    assert!(text.contains("version = \""));

    let o2 = sivsim(&["t1", "--config", manifest.to_str().unwrap(), "--out", &out_arg(b.path())]);
    assert_eq!(o2.status.code(), Some(0), "{}", String::from_utf8_lossy(&o2.stderr));
    assert_eq!(fs::read(a.path().join("t1.csv")).unwrap(), fs::read(b.path().join("t1.csv")).unwrap());
    let strip_dir = |s: String| s.lines().filter(|l| !l.starts_with("dir = ")).collect::<Vec<_>>().join("\n");
    assert_eq!(
        strip_dir(text),
        strip_dir(fs::read_to_string(b.path().join("t1.manifest.toml")).unwrap())
    );
}

#[test]
fn config_file_is_not_modified() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let text = "seed = 3\n\n[system]\ntemperature_mk = 100.0\n";
    fs::write(&cfg, text).unwrap();
    let o = sivsim(&["eq1", "--config", cfg.to_str().unwrap(), "--set", "system.temperature_mk=12", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&cfg).unwrap(), text);
    let manifest = fs::read_to_string(dir.path().join("eq1.manifest.toml")).unwrap();
    assert!(manifest.contains("temperature_mk = 12"));
    assert!(manifest.contains("seed = 3"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[system]\nfield_tesla = 0.21\nfield_gauss = 3\n").unwrap();
    let o = sivsim(&["levels", "--config", bad.to_str().unwrap(), "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("field_gauss") && err.contains("line 3"), "{err}");

    for args in [
        vec!["levels", "--set", "system.polar_angle_deg=200"],
        vec!["teleport"],
        vec!["t1", "--set", "sequence.pump_transition=Z9"],
        vec!["echo", "--set", "sequence.pi_ns=5"],
        vec!["ramsey", "--set", "noise.model=ou", "--trajectories", "1"],
        vec!["fit"],
    ] {
        let mut a = args.clone();
        let out = out_arg(dir.path());
        a.extend(["--out", &out]);
        assert_eq!(sivsim(&a).status.code(), Some(2), "{args:?}");
    }
    assert!(!dir.path().join("levels.csv").exists());
}

#[test]
fn numerical_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("flat.csv");
    fs::write(&data, "x,y\n0,1\n1,1\n2,1\n3,1\n4,1\n5,1\n").unwrap();
    let o = sivsim(&["fit", "--set", &format!("fit.input={:?}", data.to_str().unwrap()), "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("fit failed"));
}

#[test]
fn fit_recovers_ramsey_time() {
    let dir = tempfile::tempdir().unwrap();
    let o = sivsim(&["ramsey", "--out", &out_arg(dir.path())]);
    let t2 = result(&o, "T2_star_ns");
    let input = dir.path().join("ramsey.csv");
    let o = sivsim(&[
        "fit",
        "--set",
        &format!("fit.input={:?}", input.to_str().unwrap()),
        "--set",
        "fit.y_column=signal",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!((result(&o, "time_constant") / t2 - 1.0).abs() < 1e-6);
    let csv = fs::read_to_string(dir.path().join("fit.csv")).unwrap();
    assert!(csv.starts_with("delay_ns,signal,model,residual\n"));
    let max_res = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap().abs())
        .fold(0.0, f64::max);
    assert!(max_res < 1e-3);
}

#[test]
fn remaining_subcommands_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let cases: [(&str, &[&str], &str); 5] = [
        ("ple", &["--set", "sequence.ple_step_ghz=0.1"], "frequency_ghz,signal\n"),
        ("rabi", &["--set", "rates.dephasing_time_ns=0", "--set", "sequence.rabi_frequency_mhz=4.13", "--set", "sequence.rabi_duration_ns=1000"], "time_ns,signal\n"),
        ("fidelity", &["--set", "sequence.init_points=3"], "pump_duration_ns,rho11\n"),
        ("t1model", &[], "temperature_k,rate_per_ns,t1_ns\n"),
        ("bathdensity", &[], "resonant_mhz,density_ppm\n"),
    ];
    for (sub, extra, header) in cases {
        let mut a = vec![sub];
        a.extend_from_slice(extra);
        a.extend(["--out", &out]);
        let o = sivsim(&a);
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
        let csv = fs::read_to_string(dir.path().join(format!("{sub}.csv"))).unwrap();
        assert!(csv.starts_with(header), "{sub}: {}", &csv[..csv.len().min(80)]);
        assert!(!csv.contains('\r'));
        match sub {
            "rabi" => assert!((result(&o, "rabi_frequency_mhz") / 4.13 - 1.0).abs() < 0.02),
            "fidelity" => assert!(result(&o, "rho11") >= 0.9993),
            "t1model" => assert!((result(&o, "T1_ns") / 108_000.0 - 1.0).abs() < 1e-9),
            "bathdensity" => assert!((result(&o, "density_ppm") - 3.8).abs() < 1e-12),
            _ => {}
        }
    }
}
