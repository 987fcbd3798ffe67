use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use flowdas::commands::{self, Command, Inputs};
use flowdas::config::{self, Overrides};
use flowdas::CliError;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Simulate,
    Train,
    Assimilate,
    Forecast,
    Bpf,
    Evaluate,
    Plot,
    Ablate,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::Train => Command::Train,
            Cmd::Assimilate => Command::Assimilate,
            Cmd::Forecast => Command::Forecast,
            Cmd::Bpf => Command::Bpf,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Plot => Command::Plot,
            Cmd::Ablate => Command::Ablate,
        }
    }
}

/// Data assimilation with learned stochastic-interpolant dynamics.
///
/// Exit codes: 0 success, 2 configuration error, 3 data or shape error,
/// 4 numerical failure.
#[derive(Debug, Parser)]
#[command(name = "flowdas", version)]
struct Args {
    command: Cmd,
    /// Experiment TOML (a preset name plus overrides).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created atomically.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "FLOWDAS_THREADS")]
    threads: Option<usize>,
    /// Guidance step size.
    #[arg(long)]
    zeta: Option<f64>,
    /// Monte-Carlo endpoint samples per node.
    #[arg(long = "J")]
    j: Option<usize>,
    /// Directory written by `simulate`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file or directory written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Run directory to evaluate or plot.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Case to plot.
    #[arg(long, default_value_t = 0)]
    case: usize,
}

fn run(args: Args) -> Result<(), CliError> {
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let cfg = config::load(&args.config)?;
    let cfg = config::apply(
        cfg,
        Overrides {
            seed: args.seed,
            zeta: args.zeta,
            mc_samples: args.j,
        },
    )?;
    let inputs = Inputs {
        data: args.data,
        model: args.model,
        run: args.run,
        case: args.case,
    };
    commands::execute(args.command.into(), &cfg, &args.out, args.force, &inputs)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowdas: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
