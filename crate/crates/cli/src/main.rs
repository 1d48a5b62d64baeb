use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slowlight::config::{format_f64, ConfigError, ConfigFile, RunConfig, ScenarioName};
use slowlight::io::{IoError, RunDirectory};
use slowlight::scenarios::{self, ScenarioReport};

/// Slow-light pulses in moving media: dispersion curves, rays and wave packets.
#[derive(Debug, Parser)]
#[command(name = "slowlight", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file (sectioned key = value, units attached to every quantity).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory. Defaults to `runs/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run the built-in acceptance assertions; a failed check sets the exit code.
    #[arg(long, global = true)]
    check: bool,
    /// Multiply the wave grid points by this factor and divide its time step by it.
    #[arg(long, global = true, value_name = "FACTOR")]
    resolution_scale: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Group-velocity curves and a check against the full dispersion relation.
    Dispersion,
    /// Trace a single ray from the configured launch.
    Ray,
    /// Evolve the configured wave packet.
    Wave,
    /// Run one of the reference scenarios.
    Scenario {
        #[arg(value_parser = parse_scenario)]
        name: ScenarioName,
    },
    /// Flow-drop and group-velocity sweep of the reflected phase.
    Sweep,
}

fn parse_scenario(s: &str) -> Result<ScenarioName, String> {
    s.parse::<ScenarioName>().map_err(|e| e.to_string())
}

impl Command {
    fn label(&self) -> String {
        match self {
            Command::Dispersion => "dispersion".into(),
            Command::Ray => "ray".into(),
            Command::Wave => "wave".into(),
            Command::Scenario { name } => format!("scenario {name}"),
            Command::Sweep => "sweep".into(),
        }
    }

    fn default_dir(&self) -> PathBuf {
        match self {
            Command::Scenario { name } => Path::new("runs").join(name.as_str()),
            other => Path::new("runs").join(other.label()),
        }
    }

    fn scenario(&self) -> Option<ScenarioName> {
        match self {
            Command::Scenario { name } => Some(*name),
            Command::Sweep => Some(ScenarioName::Sonar),
            _ => None,
        }
    }
}

enum Failure {
    Config(String),
    Numerical(slowlight::Error),
    Check(Vec<String>),
    Io(IoError),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Check(_) => 4,
            Failure::Io(_) => 5,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(e) => write!(f, "configuration error: {e}"),
            Failure::Numerical(e) => write!(f, "numerical failure: {e}"),
            Failure::Check(names) => write!(f, "checks failed: {}", names.join(", ")),
            Failure::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Io(e)
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            ConfigFile::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    let wanted = cli.command.scenario();
    if let (Some(w), Some(f)) = (wanted, file.scenario_name()) {
        if w != f {
            return Err(Failure::Config(format!("configuration is for scenario {f}, not {w}")));
        }
    }
    let cfg = file.resolve(wanted).map_err(|e: ConfigError| Failure::Config(e.to_string()))?;
    match cli.resolution_scale {
        Some(f) => cfg.with_resolution_scale(f).map_err(|e| Failure::Config(e.to_string())),
        None => Ok(cfg),
    }
}

fn execute(command: &Command, cfg: &RunConfig) -> slowlight::Result<ScenarioReport> {
    match command {
        Command::Dispersion => scenarios::run_dispersion(cfg),
        Command::Ray => scenarios::run_ray_mode(cfg),
        Command::Wave => scenarios::run_wave_mode(cfg),
        Command::Scenario { name } => scenarios::run_scenario(*name, cfg),
        Command::Sweep => scenarios::run_sonar(cfg),
    }
}

fn print_report(report: &ScenarioReport, dir: &Path, enforce: bool) {
    println!("{} -> {}", report.name, dir.display());
    for q in &report.quantities {
        println!("  {:<36} {:>24} {:<6} [{:?}]", q.name, format_f64(q.value), q.unit, q.provenance);
    }
    for c in &report.checks {
        let tag = match (c.passed, enforce) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "fail (not enforced)",
        };
        println!("  {tag}  {}: {}", c.name, c.detail);
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let dir = cli.out.clone().unwrap_or_else(|| cli.command.default_dir());
    let mut out = RunDirectory::create(&dir, &cli.command.label(), &cfg)?;
    let report = match execute(&cli.command, &cfg) {
        Ok(r) => r,
        Err(e) => {
            out.fail(&e.to_string())?;
            return Err(Failure::Numerical(e));
        }
    };
    out.finish(&report)?;
    print_report(&report, &dir, cli.check);
    if cli.check {
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
        if !failed.is_empty() {
            return Err(Failure::Check(failed));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("slowlight: {f}");
            ExitCode::from(f.code())
        }
    }
}
