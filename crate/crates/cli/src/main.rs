mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Bi-ACT desk-scale simulator: bilateral data collection, policy training
/// and autonomous evaluation.
#[derive(Parser, Debug)]
#[command(name = "biact", version, about)]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for evaluation sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the bilateral / DOB / RFOB invariant suite.
    SimCheck(SimCheckArgs),
    /// Record demonstrations into episode directories.
    Collect(CollectArgs),
    /// Train a policy on collected episodes.
    Train(TrainArgs),
    /// Evaluate a checkpoint in autonomous mode.
    Eval(EvalArgs),
    /// Train full and w/o-force variants and compare them.
    Ablate(AblateArgs),
    /// Serve the teleoperation bridge.
    Serve(ServeArgs),
    /// Dump an episode's joint series as CSV.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
pub struct SimCheckArgs {
    /// Print the effective configuration as TOML.
    #[arg(long)]
    pub print_config: bool,
    /// Write the free-space session trace to this CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CollectArgs {
    #[arg(long)]
    pub episodes: usize,
    /// scripted | teleop
    #[arg(long, default_value = "scripted")]
    pub expert: String,
    /// Comma-separated object specs, e.g. `foam_ball,softball`.
    #[arg(long, default_value = "foam_ball,softball")]
    pub objects: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Give up after this many rejected attempts.
    #[arg(long, default_value_t = 10)]
    pub max_discards: usize,
    /// Bridge port for `--expert teleop`.
    #[arg(long, default_value_t = biact_core::teleop::DEFAULT_PORT)]
    pub port: u16,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Chunk length k.
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    pub latent_encoder_layers: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub kl_weight: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub steps: u64,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV (default: checkpoint path with `.metrics.csv`).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Train the w/o-force variant.
    #[arg(long)]
    pub no_force: bool,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Object spec; repeat or comma-separate for several.
    #[arg(long, default_value = "foam_ball,softball", value_delimiter = ',')]
    pub object: Vec<String>,
    /// chunk_serial | ensemble
    #[arg(long, default_value = "chunk_serial")]
    pub mode: String,
    /// Ensemble decay m.
    #[arg(long, default_value_t = 0.01)]
    pub decay: f64,
    /// JSON report path; trajectories go to `<out>.trajectories/`.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip per-trial trajectory CSVs.
    #[arg(long)]
    pub no_trajectories: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub steps: u64,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Held-out objects to evaluate on.
    #[arg(long, default_value = "glue_jar", value_delimiter = ',')]
    pub object: Vec<String>,
    #[arg(long, default_value = "chunk_serial")]
    pub mode: String,
    #[arg(long, default_value_t = 0.01)]
    pub decay: f64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value_t = biact_core::teleop::DEFAULT_PORT)]
    pub port: u16,
    /// Address to bind.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Static UI bundle; open its index.html in a browser.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Where recorded episodes go; recording is disabled without it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub episode: PathBuf,
    #[arg(long)]
    pub csv: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(commands::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
