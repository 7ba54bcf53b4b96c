mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use nask::config::{Preset, RunConfig};

/// Curved text detection toolkit: label encoding, decoding, toy training,
/// evaluation, attention benchmarks, ablations and rendering.
#[derive(Parser, Debug)]
#[command(name = "nask", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied on top of the defaults or the `--config` file, in this
/// order: file, preset, explicit flags.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; missing fields keep their defaults.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Seed for data, initialization and training order (default 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sample points per instance (default 8).
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Attention groups; 0 swaps attention for two 1×1 convolutions (default 4).
    #[arg(long, global = true)]
    pub groups: Option<usize>,
    /// Threshold preset: total-text = (0.7, 0.6), ctw = (0.8, 0.4).
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,
    /// Text-region threshold (default 0.7).
    #[arg(long = "t-tr", global = true)]
    pub t_tr: Option<f64>,
    /// Centre-line threshold (default 0.6).
    #[arg(long = "t-tcl", global = true)]
    pub t_tcl: Option<f64>,
    /// Output directory (default "out").
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    TotalText,
    Ctw,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::TotalText => Preset::TotalText,
            PresetArg::Ctw => Preset::Ctw,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationAxis {
    #[value(name = "G", alias = "groups")]
    Groups,
    FirstStage,
    N,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Rasterize ground-truth geometry maps for every manifest sample.
    EncodeLabels {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Decode serialized geometry maps into polygons (JSON lines).
    Decode {
        /// Geometry map files written by encode-labels.
        #[arg(required = true)]
        maps: Vec<PathBuf>,
    },
    /// Train the toy detector on synthetic data or a manifest.
    TrainToy {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Overrides schedule.steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score detections against ground truth.
    Eval {
        /// Ground truth; a synthetic held-out set is used when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Trained model directory.
        #[arg(long, conflicts_with = "detections")]
        checkpoint: Option<PathBuf>,
        /// Precomputed detections in manifest format, one line per image.
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
        /// Also measure end-to-end throughput (nondeterministic).
        #[arg(long)]
        fps: bool,
    },
    /// Compare the analytic attention costs with counted work and timing.
    BenchAttention {
        /// Square feature sizes.
        #[arg(long, value_delimiter = ',', default_value = "8,16,24,32")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long = "group-counts", value_delimiter = ',', default_value = "1,2,4,8")]
        group_counts: Vec<usize>,
        /// Timed forward passes per row.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Sweep one axis and report held-out H-mean per value (CSV).
    Ablate {
        #[arg(long, value_enum)]
        axis: AblationAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Overrides schedule.steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Draw ground truth and detections as one SVG per image.
    Render {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, conflicts_with = "detections")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
    },
}

pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<nask::Error> for Failure {
    fn from(e: nask::Error) -> Self {
        match e {
            nask::Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn defaults_help() -> String {
    let presets: Vec<String> = Preset::ALL
        .iter()
        .map(|p| {
            let (a, b) = p.thresholds();
            format!("  {p:<11} t_tr = {a}, t_tcl = {b}")
        })
        .collect();
    format!(
        "Threshold presets:\n{}\n\nDefault configuration (any subset may be given with --config):\n{}",
        presets.join("\n"),
        RunConfig::default().to_json()
    )
}

fn main() -> ExitCode {
    let help = defaults_help();
    let matches = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|s| s.after_help(help.clone()))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
