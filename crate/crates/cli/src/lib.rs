//! Command-line front end: gradient checks, block forward passes, toy
//! training, dataset statistics and detection evaluation.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::{CliError, Exit};

/// Version of every JSON document printed with `--json`.
pub const OUTPUT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "sfmkit", version, about = "Scale-aware fusion block toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// TOML file with run settings; flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Size class boundaries as "small_max_area,medium_max_area".
    #[arg(long, global = true, value_name = "S,M", value_parser = config::parse_thresholds)]
    pub thresholds: Option<[f64; 2]>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub momentum: Option<f64>,
    #[arg(long = "weight-decay", global = true)]
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Apply a block checkpoint to a tensor file.
    Forward(ForwardArgs),
    /// Overfit the toy detector and write the loss trace.
    TrainToy(TrainArgs),
    /// Box counts and size-class percentages of a VOC annotation directory.
    Stats(StatsArgs),
    /// COCO-style evaluation of detections against VOC ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of random seeds per case.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Flip the sign of one op's backward pass.
    #[arg(long, hide = true, value_name = "OP")]
    pub inject_fault: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Train,
    Infer,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    /// Batch-norm statistics: per-input (train) or running averages (infer).
    #[arg(long, value_enum, default_value_t = ModeArg::Infer)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Image height and width.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// CSV loss trace; written to stdout when omitted (text mode).
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// Where to write the trained block as a JSON checkpoint.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Train the head alone, without the fusion block.
    #[arg(long)]
    pub no_sfm: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Directory of VOC XML files.
    pub dir: PathBuf,
    /// Image-list file; repeat for several splits, each named after its file stem.
    #[arg(long, value_name = "PATH")]
    pub list: Vec<PathBuf>,
    /// Split name when no list is given.
    #[arg(long, default_value = "all")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON-lines detections.
    #[arg(long, value_name = "PATH")]
    pub detections: PathBuf,
    /// Directory of VOC XML ground truth.
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub list: Option<PathBuf>,
}

impl Cli {
    /// Defaults, then the config file, then flags.
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let g = &self.global;
        let mut c = match &g.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($src:expr => $dst:ident),*) => { $(if let Some(v) = $src { c.$dst = v; })* };
        }
        set!(g.seed => seed, g.heads => heads, g.lr => lr, g.momentum => momentum,
             g.weight_decay => weight_decay, g.thresholds => thresholds);
        if let Command::TrainToy(t) = &self.command {
            set!(t.steps => steps, t.samples => samples, t.channels => channels,
                 t.size => size, t.batch_size => batch_size);
        }
        Ok(c)
    }
}

/// Sizes the rayon pool from `SFMKIT_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("SFMKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::config(format!(
            "SFMKIT_THREADS must be a positive integer, got '{v}'"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(e.to_string()))
}

/// Runs a parsed command line, writing results to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<Exit, CliError> {
    configure_threads()?;
    let cfg = cli.run_config()?;
    log::info!("settings: {}", cfg.summary());
    let json = cli.global.json;
    match &cli.command {
        Command::Gradcheck(a) => commands::gradcheck(a, &cfg, json, out),
        Command::Forward(a) => commands::forward(a, cli.global.heads, json, out),
        Command::TrainToy(a) => commands::train_toy(a, &cfg, json, out),
        Command::Stats(a) => commands::stats(a, &cfg, json, out),
        Command::Eval(a) => commands::eval(a, &cfg, json, out),
    }
}
