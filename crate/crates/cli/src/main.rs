//! `sirconvex`: forward simulation, synthetic data, inversion and probes for
//! the spatial SIR coefficient inverse problem.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sirconvex::Error;

#[derive(Parser)]
#[command(name = "sirconvex", version, about)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a key, e.g. `--set inversion.lambda=4`. Repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the forward problem on the fine grid.
    Forward(ConfigArgs),
    /// Restrict, add noise and build the observation archive.
    MakeData(ConfigArgs),
    /// Minimize the functional and recover the coefficients.
    Invert(ConfigArgs),
    /// Score an inversion against the forward run.
    Evaluate(ConfigArgs),
    /// Invert once per lambda and tabulate the errors.
    SweepLambda {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
        lambdas: Vec<f64>,
    },
    /// Numerical probes of the weighted functional.
    Probe {
        #[command(subcommand)]
        probe: Probe,
    },
    /// Convert a field file to CSV, VTK or back to binary.
    Export {
        /// Field file, binary or CSV.
        input: PathBuf,
        #[arg(short, long, value_enum, default_value = "csv")]
        format: Format,
        /// Keep only the time level nearest to this time.
        #[arg(long)]
        time: Option<f64>,
        /// Destination; standard output if absent.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
pub enum Probe {
    /// Ratio of the weighted norms of `V f` and `f` on random smooth fields.
    Volterra {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        fields: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Second differences of `J` along random segments near the initial guess.
    Convexity {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 9)]
        points: usize,
        #[arg(long, default_value_t = 0.1)]
        radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Format {
    Csv,
    Vtk,
    Sirf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Forward(a) => commands::forward(&a),
        Command::MakeData(a) => commands::make_data(&a),
        Command::Invert(a) => commands::invert(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::SweepLambda { cfg, lambdas } => commands::sweep_lambda(&cfg, &lambdas),
        Command::Probe { probe } => commands::probe(probe),
        Command::Export {
            input,
            format,
            time,
            output,
        } => commands::export(&input, format, time, output.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    if e.is_numerical() {
        ExitCode::from(3)
    } else {
        ExitCode::from(2)
    }
}
