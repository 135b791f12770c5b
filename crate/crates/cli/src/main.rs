//! `femtoformer` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime or validation failure, 2 on bad
//! arguments.

mod infer;
mod manifest;
mod tokenize;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "femtoformer", version, about = "Desk-scale decoder-only transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a byte-level BPE vocabulary from one or more corpus files.
    TrainBpe(tokenize::TrainBpeArgs),
    /// Encode standard input to token ids, or decode ids back to text.
    Tokenize(tokenize::TokenizeArgs),
    /// Train a model with SGD and write a checkpoint.
    Train(train::TrainArgs),
    /// Continue a prompt from a checkpoint.
    Generate(infer::GenerateArgs),
    /// Show the most probable next tokens after a prompt.
    Probs(infer::ProbsArgs),
}

/// Seed used when neither a flag nor a config file provides one.
pub(crate) fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var("FEMTOFORMER_SEED") {
        Ok(s) => Ok(Some(
            s.trim()
                .parse()
                .map_err(|e| anyhow::anyhow!("FEMTOFORMER_SEED={s:?}: {e}"))?,
        )),
        Err(_) => Ok(None),
    }
}

pub(crate) fn read_prompt(prompt: &str) -> anyhow::Result<Vec<u8>> {
    use std::io::Read;
    if prompt == "-" {
        let mut buf = Vec::new();
        std::io::stdin().read_to_end(&mut buf)?;
        Ok(buf)
    } else {
        Ok(prompt.as_bytes().to_vec())
    }
}

pub(crate) fn read_file(path: &PathBuf) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::TrainBpe(args) => tokenize::train_bpe(args),
        Command::Tokenize(args) => tokenize::tokenize(args),
        Command::Train(args) => train::run(args),
        Command::Generate(args) => infer::generate(args),
        Command::Probs(args) => infer::probs(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
