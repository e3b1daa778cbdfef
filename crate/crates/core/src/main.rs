use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use omav_relay::cli::{self, RunConfig, VehicleOverride};
use omav_relay::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VehicleArg {
    Omni,
    Under,
    Both,
}

impl From<VehicleArg> for VehicleOverride {
    fn from(v: VehicleArg) -> Self {
        match v {
            VehicleArg::Omni => VehicleOverride::Omni,
            VehicleArg::Under => VehicleOverride::Under,
            VehicleArg::Both => VehicleOverride::Both,
        }
    }
}

#[derive(Parser)]
#[command(name = "omav-relay", about = "NMPC relay scenario runner", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Increase output verbosity.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Run the closed-loop scenario and write CSV/JSON outputs.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "omni")]
        vehicle: VehicleArg,
        /// Override the scenario's RNG seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run both vehicles on the same scenario and print a comparison table.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve a single finite-horizon problem at time t and print a summary.
    SolveOcp {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        at: f64,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let result = match args.command {
        Command::Run {
            scenario,
            out,
            vehicle,
            seed,
        } => {
            let mut config = RunConfig::new(scenario, out);
            config.vehicle = vehicle.into();
            config.seed = seed;
            config.verbosity = args.verbose;
            cli::cmd_run(&config)
        }
        Command::Compare { scenario, out, seed } => {
            let mut config = RunConfig::new(scenario, out);
            config.vehicle = VehicleOverride::Both;
            config.seed = seed;
            config.verbosity = args.verbose;
            cli::cmd_compare(&config)
        }
        Command::SolveOcp { scenario, at } => cli::cmd_solve_ocp(&scenario, at),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
