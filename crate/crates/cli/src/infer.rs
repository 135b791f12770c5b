use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::Args;
use femtoformer::checkpoint::Checkpoint;
use femtoformer::{generate as run_generation, next_token_distribution, GenerationConfig, Sampler, StopMode, Vocabulary};

use crate::{env_seed, read_prompt};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerArg {
    Greedy,
    TopK(usize),
}

impl FromStr for SamplerArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(SamplerArg::Greedy),
            _ => s
                .strip_prefix("topk:")
                .and_then(|k| k.parse().ok())
                .map(SamplerArg::TopK)
                .ok_or_else(|| format!("expected `greedy` or `topk:K`, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopArg {
    Special,
    Entropy(f64),
    None,
}

impl FromStr for StopArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "special" => Ok(StopArg::Special),
            "none" | "max" => Ok(StopArg::None),
            _ => s
                .strip_prefix("entropy:")
                .and_then(|h| h.parse().ok())
                .map(StopArg::Entropy)
                .ok_or_else(|| format!("expected `special`, `entropy:H` or `none`, got {s:?}")),
        }
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Prompt text, or `-` to read it from standard input.
    #[arg(long)]
    prompt: String,
    #[arg(long)]
    max_new: usize,
    /// `greedy` or `topk:K`.
    #[arg(long, default_value = "greedy")]
    sampler: SamplerArg,
    #[arg(long)]
    seed: Option<u64>,
    /// `special` (end-of-text), `entropy:H` (nats), or `none`.
    #[arg(long, default_value = "special")]
    stop: StopArg,
}

#[derive(Args, Debug)]
pub struct ProbsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

fn load(ckpt: &Path, vocab: &Path) -> anyhow::Result<(Checkpoint, Vocabulary)> {
    let vocab = Vocabulary::load(vocab)?;
    let ckpt = Checkpoint::load(ckpt, &vocab).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((ckpt, vocab))
}

pub fn generate(args: GenerateArgs) -> anyhow::Result<()> {
    let (ckpt, vocab) = load(&args.ckpt, &args.vocab)?;
    let prompt = vocab.encode(&read_prompt(&args.prompt)?);
    let sampler = match args.sampler {
        SamplerArg::Greedy => Sampler::Greedy,
        SamplerArg::TopK(k) => Sampler::TopK {
            k,
            seed: match args.seed {
                Some(s) => s,
                None => env_seed()?.unwrap_or(0),
            },
        },
    };
    let stop = match args.stop {
        StopArg::Special => StopMode::SpecialToken(vocab.end_of_text()),
        StopArg::Entropy(h) => StopMode::EntropyBelow(h),
        StopArg::None => StopMode::MaxOnly,
    };
    let gen = GenerationConfig {
        max_new_tokens: args.max_new,
        stop,
        sampler,
    };
    let tokens = run_generation(&prompt, &ckpt.params, &ckpt.config, &gen)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&vocab.decode(&tokens)?)?;
    stdout.write_all(b"\n")?;
    Ok(())
}

pub fn probs(args: ProbsArgs) -> anyhow::Result<()> {
    let (ckpt, vocab) = load(&args.ckpt, &args.vocab)?;
    let prompt = vocab.encode(&read_prompt(&args.prompt)?);
    let table = next_token_distribution(&prompt, &ckpt.params, &ckpt.config, args.top)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "rank\tid\tsubword\tprobability")?;
    for (rank, (id, p)) in table.iter().enumerate() {
        let bytes = vocab.subword(*id).ok_or_else(|| anyhow!("id {id} missing from vocabulary"))?;
        let rendered = format!("{:?}", String::from_utf8_lossy(bytes));
        writeln!(stdout, "{}\t{}\t{}\t{:.6}", rank + 1, id, rendered, p)?;
    }
    Ok(())
}
