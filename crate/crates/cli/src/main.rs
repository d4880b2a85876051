mod config;
mod run;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use config::RunConfig;
use run::{RunError, SUBCOMMANDS};

/// Batch simulator for the SiV electron spin: level structure, optical
/// spectroscopy, coherent control, relaxation and decoherence models.
#[derive(Parser, Debug)]
#[command(name = "sivsim", version)]
struct Args {
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(SUBCOMMANDS))]
    subcommand: String,

    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set system.temperature_mk=3700`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Monte Carlo trajectories (overrides `noise.trajectories`).
    #[arg(long)]
    trajectories: Option<usize>,

    #[arg(long)]
    quiet: bool,
}

/// Writes next to the target and renames over it.
fn write_atomic(path: &Path, contents: &str) -> std::io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

fn load(args: &Args) -> Result<RunConfig, String> {
    let (text, source) = match &args.config {
        Some(p) => (
            fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?,
            p.display().to_string(),
        ),
        None => (String::new(), "defaults".to_string()),
    };
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(n) = args.trajectories {
        overrides.push(format!("noise.trajectories={n}"));
    }
    if let Some(dir) = &args.out {
        let dir = toml::Value::String(dir.display().to_string());
        overrides.push(format!("output.dir={dir}"));
    }
    let mut cfg = RunConfig::load(&text, &source, &overrides).map_err(|e| e.0)?;
    cfg.resolve(&args.subcommand);
    Ok(cfg)
}

fn manifest(subcommand: &str, cfg: &RunConfig, files: &[String], results: &[(String, toml::Value)]) -> String {
    let mut table = cfg.to_toml();
    let mut run = toml::Table::new();
    run.insert("subcommand".into(), subcommand.into());
    run.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    run.insert("rng".into(), siv_core::noise::RNG_ALGORITHM.into());
    run.insert(
        "files".into(),
        toml::Value::Array(files.iter().map(|f| f.as_str().into()).collect()),
    );
    table.insert("run".into(), run.into());
    table.insert("results".into(), toml::Table::from_iter(results.iter().cloned()).into());
    toml::to_string(&table).expect("manifest serializes")
}

fn execute(args: &Args) -> Result<(), (u8, String)> {
    let cfg = load(args).map_err(|e| (2, format!("config error: {e}")))?;
    let outcome = run::run(&args.subcommand, &cfg).map_err(|e| match e {
        RunError::Config(m) => (2, format!("config error: {m}")),
        RunError::Numerical(m) => (1, format!("numerical failure: {m}")),
    })?;
    let dir = cfg.out_dir();
    let stem = cfg.output.prefix.clone().unwrap_or_else(|| args.subcommand.clone());
    let io = |e: std::io::Error| (1, format!("writing output: {e}"));
    fs::create_dir_all(&dir).map_err(io)?;
    let mut names = Vec::new();
    for (suffix, contents) in &outcome.files {
        let name = format!("{stem}{suffix}");
        write_atomic(&dir.join(&name), contents).map_err(io)?;
        names.push(name);
    }
    let text = manifest(&args.subcommand, &cfg, &names, &outcome.results);
    write_atomic(&dir.join(format!("{stem}.manifest.toml")), &text).map_err(io)?;
    if !args.quiet {
        for (k, v) in &outcome.results {
            match v {
                toml::Value::Float(x) => println!("{k} = {x}"),
                other => println!("{k} = {other}"),
            }
        }
        for n in &names {
            println!("wrote {}", dir.join(n).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("sivsim {}: {msg}", args.subcommand);
            ExitCode::from(code)
        }
    }
}
