use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use femtoformer::checkpoint::{Checkpoint, Precision};
use femtoformer::training::train_steps;
use femtoformer::{ModelConfig, Parameters, TokenId, TrainConfig, TrainReport, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::manifest::{now_unix, RunManifest};
use crate::{env_seed, read_file};

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Corpus files; documents are separated by the end-of-text token.
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Model configuration JSON (`d`, `D`, `L`, `h`, `M`, `n_max`, ...).
    /// `M` defaults to the vocabulary size.
    #[arg(long)]
    config: PathBuf,
    /// Training configuration JSON (`learning_rate`, `batch_size`, `seq_len`, `steps`, `seed`, ...).
    #[arg(long)]
    train_config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint up to the configured step count.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// JSON-lines training log; standard output when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write the checkpoint every N steps (it is always written at the end).
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Store 32-bit payloads instead of 64-bit.
    #[arg(long)]
    f32: bool,
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let bytes = read_file(&path.to_path_buf())?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn model_config(path: &Path, vocab: &Vocabulary) -> anyhow::Result<ModelConfig> {
    let mut value = read_json(path)?;
    let obj = value
        .as_object_mut()
        .with_context(|| format!("{}: expected a JSON object", path.display()))?;
    obj.entry("M").or_insert_with(|| Value::from(vocab.len()));
    let config: ModelConfig = serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
    config.validate()?;
    if config.vocab_size != vocab.len() {
        bail!(
            "model config has M = {} but the vocabulary has {} entries",
            config.vocab_size,
            vocab.len()
        );
    }
    Ok(config)
}

fn train_config(path: &Path, args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut value = read_json(path)?;
    let obj = value
        .as_object_mut()
        .with_context(|| format!("{}: expected a JSON object", path.display()))?;
    let overrides = [
        ("steps", args.steps.map(Value::from)),
        ("learning_rate", args.learning_rate.map(Value::from)),
        ("batch_size", args.batch_size.map(Value::from)),
        ("seq_len", args.seq_len.map(Value::from)),
        ("seed", args.seed.map(Value::from)),
    ];
    for (key, v) in overrides {
        if let Some(v) = v {
            obj.insert(key.into(), v);
        }
    }
    if !obj.contains_key("seed") {
        obj.insert("seed".into(), Value::from(env_seed()?.unwrap_or(0)));
    }
    serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))
}

fn ingest(paths: &[PathBuf], vocab: &Vocabulary) -> anyhow::Result<Vec<TokenId>> {
    let mut tokens = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        if i > 0 {
            tokens.push(vocab.end_of_text());
        }
        tokens.extend(vocab.encode(&read_file(path)?));
    }
    Ok(tokens)
}

pub fn run(args: TrainArgs) -> anyhow::Result<()> {
    let started = now_unix();
    let vocab = Vocabulary::load(&args.vocab)?;
    let config = model_config(&args.config, &vocab)?;
    let tc = train_config(&args.train_config, &args)?;
    tc.validate(&config)?;
    let corpus = ingest(&args.corpus, &vocab)?;

    let (mut params, start) = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path, &vocab)?;
            if ckpt.config != config {
                bail!("{} was trained with a different model configuration", path.display());
            }
            (ckpt.params, ckpt.step)
        }
        None => (Parameters::init(&config, &mut ChaCha8Rng::seed_from_u64(tc.seed)), 0),
    };
    if start > tc.steps {
        bail!("checkpoint is already at step {start}, beyond the requested {} steps", tc.steps);
    }

    let mut log: Box<dyn Write> = match &args.log {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    let precision = if args.f32 { Precision::F32 } else { Precision::F64 };
    let save = |params: &Parameters, step: usize| -> anyhow::Result<()> {
        Checkpoint::new(config.clone(), &vocab, step, params.clone())
            .save(&args.out, precision)
            .map_err(Into::into)
    };

    let mut last: Option<TrainReport> = None;
    let mut io_error = None;
    let chunk = args.checkpoint_every.max(1);
    let mut step = start;
    let mut elapsed = 0.0;
    while step < tc.steps {
        let end = (step + chunk).min(tc.steps);
        train_steps(&corpus, &mut params, &config, &tc, step..end, &mut |r| {
            let r = &TrainReport { wall_time: elapsed + r.wall_time, ..*r };
            if io_error.is_none() {
                if let Err(e) = writeln!(log, "{}", serde_json::to_string(r).expect("report serializes")) {
                    io_error = Some(e);
                }
            }
            last = Some(*r);
        })?;
        if let Some(e) = io_error.take() {
            return Err(e).context("writing training log");
        }
        log.flush()?;
        elapsed = last.map_or(elapsed, |r| r.wall_time);
        save(&params, end)?;
        step = end;
    }
    if start == tc.steps {
        save(&params, start)?;
    }
    drop(log);

    if let Some(r) = last {
        eprintln!("step {} loss {:.6} ({} tokens, {:.1}s)", r.step, r.avg_loss, r.tokens_seen, r.wall_time);
    }
    RunManifest {
        command: std::env::args().collect(),
        seed: Some(tc.seed),
        config: serde_json::json!({ "model": config, "train": tc, "corpus": args.corpus }),
        vocab_hash: vocab.content_hash(),
        checkpoint: Some(args.out.clone()),
        started_unix: started,
        finished_unix: now_unix(),
    }
    .write_beside(&args.out)
}
