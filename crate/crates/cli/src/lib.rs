//! The `goalnca` command line: train, eval, render, sweep, pca and serve.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod serve;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "goalnca", version, about = "Goal-guided neural cellular automata")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a preset or config file.
    Train(TrainArgs),
    /// Grow from the seed under one goal, writing frames and metrics.
    Eval(EvalArgs),
    /// Render a schedule of goals to PNG frames.
    Render(RenderArgs),
    /// Fire-rate robustness sweep for a locomotion model.
    Sweep(SweepArgs),
    /// Project the goal encodings onto two principal components.
    Pca(PcaArgs),
    /// Run the interactive steering service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// "morphing", "locomotion" or a path to a key = value config file.
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "GOALNCA_THREADS")]
    pub threads: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Override any config key, e.g. `--set grid_size=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Image directory used to rebuild targets for error metrics.
    #[arg(long, default_value = "assets/emoji")]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    /// Goal name or id.
    #[arg(long)]
    pub goal: String,
    #[arg(long, default_value_t = 96)]
    pub steps: usize,
    /// Grid side; defaults to the training grid.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub fire_rate: Option<f32>,
    /// Write a frame every this many steps.
    #[arg(long, default_value_t = 8)]
    pub frame_every: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    /// Comma-separated `goal:steps` phases, e.g. `stay:96,right:128`.
    #[arg(long)]
    pub schedule: String,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub fire_rate: Option<f32>,
    #[arg(long, default_value_t = 4)]
    pub frame_every: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CheckpointArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
    pub rates: Vec<f32>,
    #[arg(long, value_delimiter = ',', default_value = "right,up,left,down")]
    pub directions: Vec<String>,
    #[arg(long, default_value_t = 96)]
    pub grid: usize,
    #[arg(long, default_value_t = 96)]
    pub grow_steps: usize,
    #[arg(long, default_value_t = 128)]
    pub move_steps: usize,
    #[arg(long, default_value_t = 96)]
    pub settle_steps: usize,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long, default_value_t = 192)]
    pub grid: usize,
    #[arg(long, default_value_t = 60.0)]
    pub sim_rate: f64,
    #[arg(long, default_value_t = 15.0)]
    pub frame_rate: f64,
    /// Directory with built web-ui assets; a minimal page is served otherwise.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Render(a) => commands::render(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Pca(a) => commands::pca(a),
        Command::Serve(a) => serve::run(a),
    }
}

/// `--out`, or `./runs/<unix seconds>` when absent.
pub fn out_dir(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        PathBuf::from("runs").join(secs.to_string())
    })
}
