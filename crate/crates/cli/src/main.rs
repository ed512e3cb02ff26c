//! `objdialog`: generate synthetic video dialogs, train the model, evaluate
//! it, answer single questions and export interaction matrices.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use objdialog::eval::Subset;

use settings::ConfigFlags;

#[derive(Parser)]
#[command(name = "objdialog", version, about = "Object-centric dialog over synthetic videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate worlds, features, dialogs and splits.
    GenData(GenDataArgs),
    /// Train a model and keep the best-validation checkpoint.
    Train(TrainArgs),
    /// Decode a test subset and report overlap metrics.
    Eval(EvalArgs),
    /// Answer one question of one dialog.
    Ask(AskArgs),
    /// Export the interaction matrix of every turn of a dialog.
    Trace(TraceArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub worlds: Option<usize>,
    #[arg(long)]
    pub turns: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Objects per world.
    #[arg(long)]
    pub n: Option<usize>,
    /// Frames per world.
    #[arg(long)]
    pub f: Option<usize>,
    /// Feature width.
    #[arg(long)]
    pub d: Option<usize>,
    /// Grid side length.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Dialogs scripted per world.
    #[arg(long)]
    pub dialogs: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, the log and the effective config.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present_any = ["oracle", "predictions_in"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// test, lds, fvs or copy.
    #[arg(long, default_value = "test")]
    pub split: Subset,
    /// Score the reference answers against themselves.
    #[arg(long, requires = "data")]
    pub oracle: bool,
    /// Score a saved prediction file instead of decoding.
    #[arg(long, conflicts_with = "oracle")]
    pub predictions_in: Option<PathBuf>,
    /// Also write every decoded turn as JSON lines.
    #[arg(long)]
    pub predictions_out: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args)]
pub struct AskArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub world: String,
    /// 1-based turn number.
    #[arg(long)]
    pub turn: usize,
    /// Which of the world's dialogs.
    #[arg(long, default_value_t = 0)]
    pub dialog: usize,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub world: String,
    #[arg(long, default_value_t = 0)]
    pub dialog: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

/// Prints `{"error": kind, "message": ...}` as one line on stderr.
fn report_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            report_error("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ask(a) => commands::ask(a),
        Command::Trace(a) => commands::trace(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<objdialog::Error>().map_or("error", |e| e.kind());
            report_error(kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
