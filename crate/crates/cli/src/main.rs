mod config;
mod eval;
mod heatmap;
mod infer;
mod io;
mod synth;
mod tile;
mod train;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "seamil",
    version,
    about = "Weakly-supervised whole-slide classification pipeline",
    args_override_self = true
)]
pub struct Cli {
    /// Root seed; every random draw of the run is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads [default: all cores for tiling and inference, 1 for training].
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML file with default flag values; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort: slide rasters, annotation masks and manifest.jsonl.
    Synth(synth::SynthArgs),
    /// Mask tissue and cut every slide of a manifest into overlapping tiles.
    Tile(tile::TileArgs),
    /// Train the patch-level tumor-region model.
    TrainSource(train::TrainSourceArgs),
    /// Train the slide-level attention MIL model on top of a source checkpoint.
    TrainTarget(train::TrainTargetArgs),
    /// Score every tile with a source checkpoint and flag regions of interest.
    InferRoi(infer::InferRoiArgs),
    /// Predict slide labels (and attention weights) with a target checkpoint.
    InferWsi(infer::InferWsiArgs),
    /// Compute a metric report from a prediction CSV.
    Eval(eval::EvalArgs),
    /// Render a probability, attention or CAM heatmap for one slide.
    Heatmap(heatmap::HeatmapArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Tile(_) => "tile",
            Command::TrainSource(_) => "train-source",
            Command::TrainTarget(_) => "train-target",
            Command::InferRoi(_) => "infer-roi",
            Command::InferWsi(_) => "infer-wsi",
            Command::Eval(_) => "eval",
            Command::Heatmap(_) => "heatmap",
        }
    }

    fn is_training(&self) -> bool {
        matches!(self, Command::TrainSource(_) | Command::TrainTarget(_))
    }
}

fn parse(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let cli = Cli::try_parse_from(&argv)?;
    let Some(path) = cli.config.clone() else {
        return Ok(cli);
    };
    let extra = config::flags_from_file(&path, cli.command.name())
        .map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{e:#}\n")))?;
    Cli::try_parse_from(config::splice(argv, cli.command.name(), extra))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let threads = cli.threads.unwrap_or(if cli.command.is_training() { 1 } else { 0 });
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth::run(a, seed),
        Command::Tile(a) => tile::run(a),
        Command::TrainSource(a) => train::run_source(a, seed),
        Command::TrainTarget(a) => train::run_target(a, seed),
        Command::InferRoi(a) => infer::run_roi(a),
        Command::InferWsi(a) => infer::run_wsi(a, seed),
        Command::Eval(a) => eval::run(a),
        Command::Heatmap(a) => heatmap::run(a),
    }
}

/// Short machine-readable category for the error line.
fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<seamil::Error>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<seamil::CheckpointError>() {
            return e.code();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<csv::Error>() {
            return "csv";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
        if let Some(e) = cause.downcast_ref::<image::ImageError>() {
            return if matches!(e, image::ImageError::IoError(_)) { "io" } else { "image" };
        }
    }
    "runtime"
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let rendered = e.render().to_string();
            eprint!("{rendered}");
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", error_line("usage", first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(error_kind(&e), &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
