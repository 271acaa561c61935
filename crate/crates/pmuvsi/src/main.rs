use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pmuvsi::harness::{self, ScenarioConfig, ScenarioKind};
use pmuvsi::{io, HarnessError};
use pmuvsi_core::agents::{NoiseModel, ReferenceMode};

#[derive(Parser)]
#[command(name = "pmuvsi", version, about = "Distributed circle-geometry voltage stability index")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its CSV and JSON reports.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Proportional,
    Directional,
    Noise,
    LineOutage,
    ThreeBus,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reference {
    Flat,
    OperatingPoint,
}

#[derive(clap::Args)]
struct RunArgs {
    scenario: Scenario,
    /// Case file (.m or .json); defaults to the bundled case for the scenario.
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Stop the continuation at this loading.
    #[arg(long)]
    lambda_max: Option<f64>,
    /// Magnitude noise standard deviation, per unit.
    #[arg(long)]
    noise_sv: Option<f64>,
    /// Angle noise standard deviation, degrees.
    #[arg(long)]
    noise_stheta: Option<f64>,
    /// Line-outage scenario: time at which agents refresh their admittance rows.
    #[arg(long)]
    refresh_admittance_at: Option<f64>,
    #[arg(long)]
    enforce_q_limits: bool,
    #[arg(long, value_enum, default_value_t = Reference::OperatingPoint)]
    reference: Reference,
}

fn configure(args: &RunArgs) -> pmuvsi::Result<ScenarioConfig> {
    let (case, label) = match (&args.case, args.scenario) {
        (Some(path), _) => (io::load_case(path)?, path.display().to_string()),
        (None, Scenario::ThreeBus) => (io::three_bus(), "three_bus.json".to_string()),
        (None, _) => (io::ieee30(), "case_ieee30.m".to_string()),
    };
    let mut cfg = match args.scenario {
        Scenario::Proportional => ScenarioConfig::proportional(case, &label),
        Scenario::Directional => ScenarioConfig::directional(case, &label),
        Scenario::Noise => ScenarioConfig::noise_study(case, &label, args.seed),
        Scenario::LineOutage => ScenarioConfig::line_outage(case, &label),
        Scenario::ThreeBus => ScenarioConfig::three_bus(case, &label),
    };
    if let Some(t) = args.refresh_admittance_at {
        match &mut cfg.kind {
            ScenarioKind::LineOutage { refresh_at, .. } => *refresh_at = Some(t),
            _ => {
                return Err(HarnessError::Config(
                    "--refresh-admittance-at applies to the line-outage scenario only".into(),
                ))
            }
        }
    }
    let sigma_v = args.noise_sv.unwrap_or(cfg.noise.sigma_v);
    let sigma_theta = args.noise_stheta.unwrap_or(cfg.noise.sigma_theta_deg);
    cfg.noise = NoiseModel::new(sigma_v, sigma_theta, args.seed)?;
    cfg.cpf.lambda_limit = args.lambda_max;
    cfg.cpf.enforce_q_limits = args.enforce_q_limits;
    cfg.reference = match args.reference {
        Reference::Flat => ReferenceMode::FlatNoLoad,
        Reference::OperatingPoint => ReferenceMode::OperatingPoint,
    };
    Ok(cfg)
}

fn execute(args: &RunArgs) -> pmuvsi::Result<()> {
    let cfg = configure(args)?;
    let result = harness::run(&cfg)?;
    for path in harness::write_outputs(&result, &args.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("PMUVSI_LOG")).init();
    let cli = Cli::parse();
    let Command::Run(args) = cli.command;
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
