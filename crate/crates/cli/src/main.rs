use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hpotriage::commands::{self, CliError, RunFlags, EXIT_OK, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "hpotriage", version, about = "Grid-relative HPO experiments, troubleshooting and table replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Result store to append to; defaults to `<name>.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Surrogate seed; overrides the config and HPOTRIAGE_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker slots; overrides the config and HPOTRIAGE_SLOTS.
    #[arg(long)]
    slots: Option<usize>,
    /// One of RS, ASHA, BO+ASHA; defaults to every configured algorithm.
    #[arg(long)]
    algo: Option<String>,
    /// GST multiplier for `hpo`; defaults to the first ladder rung.
    #[arg(long)]
    budget_multiplier: Option<f64>,
    /// Space label for `hpo`, e.g. S_full, S_-wr or S_min.
    #[arg(long)]
    space: Option<String>,
}

impl From<RunArgs> for RunFlags {
    fn from(a: RunArgs) -> Self {
        RunFlags {
            config: a.config,
            out: a.out,
            seed: a.seed,
            slots: a.slots,
            algo: a.algo,
            budget_multiplier: a.budget_multiplier,
            space: a.space,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the grid baseline.
    Grid(RunArgs),
    /// Run each configured algorithm once per rep seed at one budget and space.
    Hpo(RunArgs),
    /// Run the troubleshooting procedure for each configured algorithm.
    Troubleshoot(RunArgs),
    /// Replay published-table fixtures through the verdict, procedure and mining logic.
    Replay {
        #[arg(required = true)]
        fixtures: Vec<PathBuf>,
    },
    /// Render a result store as tables.
    Report {
        /// Result store to read.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print (or write) a surrogate preset's spec as JSON.
    SurrogateGen {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cmd {
        Command::Grid(a) => commands::grid(&a.into(), &mut out),
        Command::Hpo(a) => commands::hpo(&a.into(), &mut out),
        Command::Troubleshoot(a) => commands::troubleshoot(&a.into(), &mut out),
        Command::Replay { fixtures } => commands::replay(&fixtures, &mut out).map(|_| ()),
        Command::Report { out: store } => commands::report(&store, &mut out),
        Command::SurrogateGen { preset, seed, out: path } => commands::surrogate_gen(&preset, seed, path.as_deref(), &mut out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
