use std::io::{Read, Write};
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use femtoformer::checkpoint::write_atomic;
use femtoformer::tokenizer::{bpe_train, TokenId, Vocabulary};

use crate::manifest::{now_unix, RunManifest};
use crate::read_file;

#[derive(Args, Debug)]
pub struct TrainBpeArgs {
    /// Corpus files, concatenated in order.
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Target vocabulary size (256 bytes + end-of-text + merges).
    #[arg(long)]
    vocab_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Read whitespace-separated ids and print the decoded bytes.
    #[arg(long)]
    decode: bool,
}

pub fn train_bpe(args: TrainBpeArgs) -> anyhow::Result<()> {
    let started = now_unix();
    let mut corpus = Vec::new();
    for path in &args.corpus {
        corpus.extend(read_file(path)?);
    }
    let (vocab, stats) = bpe_train(&corpus, args.vocab_size)?;
    write_atomic(&args.out, vocab.to_json().as_bytes())?;

    println!(
        "vocabulary: {} entries ({} merges)",
        vocab.len(),
        vocab.merges().len()
    );
    println!("corpus bytes: {}", stats.tokens_before);
    println!("corpus tokens: {}", stats.tokens_after);
    println!("compression: {:.4} bytes/token", stats.bytes_per_token());

    RunManifest {
        command: std::env::args().collect(),
        seed: None,
        config: serde_json::json!({
            "vocab_size": args.vocab_size,
            "corpus": args.corpus,
        }),
        vocab_hash: vocab.content_hash(),
        checkpoint: None,
        started_unix: started,
        finished_unix: now_unix(),
    }
    .write_beside(&args.out)
}

pub fn tokenize(args: TokenizeArgs) -> anyhow::Result<()> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let mut input = Vec::new();
    std::io::stdin().read_to_end(&mut input)?;
    let mut stdout = std::io::stdout().lock();
    if args.decode {
        let text = String::from_utf8(input).context("token ids must be UTF-8 text")?;
        let ids = text
            .split_whitespace()
            .map(|s| s.parse::<TokenId>().with_context(|| format!("bad token id {s:?}")))
            .collect::<anyhow::Result<Vec<_>>>()?;
        stdout.write_all(&vocab.decode(&ids)?)?;
    } else {
        let ids = vocab.encode(&input);
        let line = ids.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(" ");
        writeln!(stdout, "{line}")?;
    }
    Ok(())
}
