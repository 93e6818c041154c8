use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lagot::bench::SETTINGS;
use lagot_cli::commands::{self, ExportArgs, TrainArgs};
use lagot_cli::{configure_threads, CliResult};

#[derive(Parser)]
#[command(name = "lagot", version, about = "Lagrangian optimal transport with learned spline geodesics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainFlags {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set batch=256`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Data directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue an interrupted run from its last checkpoint.
    #[arg(long, value_name = "RUN_DIR")]
    resume: Option<PathBuf>,
    /// Stop after this many total steps (rounds for `train-metric`).
    #[arg(long)]
    stop_after: Option<usize>,
}

impl From<TrainFlags> for TrainArgs {
    fn from(f: TrainFlags) -> Self {
        TrainArgs { config: f.config, sets: f.sets, data: f.data, out: f.out, resume: f.resume, stop_after: f.stop_after }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV files plus a manifest.
    GenData {
        #[arg(long, value_parser = SETTINGS)]
        setting: String,
        /// Samples per measure; defaults to the dataset's standard size.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a transport map between two measures.
    Train(TrainFlags),
    /// Learn a metric from a sequence of measures.
    TrainMetric(TrainFlags),
    /// Recompute evaluation numbers of a run into its metrics.json.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Held-out samples per measure.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write transport paths as CSV.
    ExportPaths {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Paths per measure pair.
        #[arg(long)]
        count: Option<usize>,
        /// Time samples per path.
        #[arg(long)]
        samples: Option<usize>,
        /// Adam steps refining each path before export.
        #[arg(long)]
        fine_tune: Option<usize>,
    },
    /// Draw samples, push-forwards, paths and the cost landscape as SVG.
    Plot {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData { setting, n, seed, out } => {
            println!("{}", commands::gen_data(&setting, n, seed, &out)?.display());
        }
        Command::Train(flags) => commands::train(&flags.into())?,
        Command::TrainMetric(flags) => commands::train_metric(&flags.into())?,
        Command::Eval { run, samples } => commands::eval(&run, samples)?,
        Command::ExportPaths { run, out, count, samples, fine_tune } => {
            let path = commands::export_paths(&run, out.as_deref(), &ExportArgs { count, samples, fine_tune })?;
            println!("{}", path.display());
        }
        Command::Plot { run, out } => println!("{}", commands::plot(&run, out.as_deref())?.display()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
