//! Command-line front end: corpus generation, training, conversion,
//! evaluation, gradient checks and attention plots.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use convs2s::model::Mode;

#[derive(Parser)]
#[command(name = "convs2s", version, about = "Convolutional sequence-to-sequence voice conversion on feature files")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Run configuration (TOML). Defaults are used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// pairwise, many2many, any2many or realtime.
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Seed for initialisation and batch sampling (corpus layout for gen-corpus).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Speakers {
    #[arg(long)]
    pub speaker_src: Option<String>,
    #[arg(long)]
    pub speaker_trg: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic parallel corpus with oracle warps.
    GenCorpus(commands::GenCorpus),
    /// Per-speaker feature statistics of the training split.
    Stats(commands::Stats),
    /// Train a model and write checkpoints.
    Train(commands::Train),
    /// Convert evaluation utterances or a single feature file.
    Convert(commands::Convert),
    /// Score converted utterances against their references.
    Evaluate(commands::Evaluate),
    /// Finite-difference check of the full training objective.
    Gradcheck(commands::Gradcheck),
    /// Render a raw attention matrix as a grayscale image.
    PlotAttention(commands::PlotAttention),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(c, a),
        Command::Stats(a) => commands::stats(c, a),
        Command::Train(a) => commands::train(c, a),
        Command::Convert(a) => commands::convert(c, a),
        Command::Evaluate(a) => commands::evaluate(c, a),
        Command::Gradcheck(a) => commands::gradcheck(c, a),
        Command::PlotAttention(a) => commands::plot_attention(c, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
