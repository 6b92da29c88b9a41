use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Influence tuning experiments on synthetic confounded text data.
#[derive(Parser, Debug)]
#[command(name = "inftune", version, about)]
struct Cli {
    /// Root directory for default output locations.
    #[arg(long, env = "INFTUNE_OUT", default_value = "runs", global = true)]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its spec echo.
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint, trace and summary.
    Train(TrainArgs),
    /// Per-probe confound influence difference of a checkpoint.
    Cid(CidArgs),
    /// Check every analytic derivative against finite differences.
    Gradcheck(GradcheckArgs),
    /// Multi-seed method comparison, optionally with an access-rate sweep.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Lenconf,
    Featconf,
}

impl Kind {
    fn as_str(self) -> &'static str {
        match self {
            Kind::Lenconf => "lenconf",
            Kind::Featconf => "featconf",
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    kind: Kind,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat `key = value` spec file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any spec key, e.g. `--set n_train=300`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output file; defaults to `<out-root>/data/<kind>-<seed>.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Where the dataset comes from: a file, or a generator run in memory.
#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long, conflicts_with = "kind")]
    data: Option<PathBuf>,
    /// Generate this dataset kind with default sizes instead of reading a file.
    #[arg(long)]
    kind: Option<Kind>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args, Debug)]
struct RunFlags {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    influence_lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    access_rate: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[arg(long)]
    influence_epochs: Option<usize>,
    #[arg(long)]
    probes_per_epoch: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    influence_batch_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    probe_count: Option<usize>,
    #[arg(long)]
    cid_every_round: Option<bool>,
    /// Override any config key, e.g. `--set beta2=0.99`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunFlags,
    /// Output directory; defaults to `<out-root>/train/<method>-<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScoreMethod {
    Cosine,
    Dot,
    Proj,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Subset {
    Full,
    LabelHeadRow,
}

#[derive(Args, Debug)]
struct CidArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 40)]
    probes: usize,
    /// Selects the same probes a training run with this seed measures.
    #[arg(long, default_value_t = 2021)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ScoreMethod::Cosine)]
    score: ScoreMethod,
    #[arg(long, value_enum, default_value_t = Subset::Full)]
    subset: Subset,
    /// Output CSV; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report as JSON here as well.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flip the sign of the r term (mutation check).
    #[arg(long, hide = true)]
    flip_r: bool,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunFlags,
    /// Comma-separated methods; defaults to all five.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Comma-separated seeds; defaults to 2021..=2025.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Extra influence-tuning runs at each confound access rate.
    #[arg(long, value_delimiter = ',')]
    access_rates: Vec<f64>,
    /// Output directory; defaults to `<out-root>/experiment`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&cli.out_root, a),
        Command::Train(a) => commands::train(&cli.out_root, a),
        Command::Cid(a) => commands::cid(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Experiment(a) => commands::experiment(&cli.out_root, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
