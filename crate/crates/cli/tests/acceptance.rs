//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero if any criterion fails.

mod common;

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use femtoformer::checkpoint::{Checkpoint, Precision};
use femtoformer::generation::generate_with_observer;
use femtoformer::model::forward_logits;
use femtoformer::ops::{gelu, layer_norm, softmax};
use femtoformer::training::{gradient_check, GRAD_CHECK_TOLERANCE};
use femtoformer::{
    batch_loss, bpe_train, cross_entropy, forward_all_positions, generate, sample_greedy, train, GenerationConfig,
    ModelConfig, Parameters, PosMode, Sampler, StopMode, TokenId, TrainConfig, Vocabulary,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

type Outcome = Result<String, String>;
type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, m: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(0..m as TokenId)).collect()
}

fn greedy(max_new_tokens: usize) -> GenerationConfig {
    GenerationConfig {
        max_new_tokens,
        stop: StopMode::MaxOnly,
        sampler: Sampler::Greedy,
    }
}

fn tokenizer_round_trip() -> Outcome {
    let corpus = "Let p be a prime. Then p divides a^p - a for every integer a; \
                  the proof is by induction on a. Über größere Zahlen: ∀ε>0 ∃δ>0. "
        .repeat(20);
    let (trained, _) = bpe_train(corpus.as_bytes(), 420).map_err(|e| e.to_string())?;
    let vocabs = [Vocabulary::byte_level(), trained];
    let mut r = rng(1);
    let mut failures = 0;
    for _ in 0..10_000 {
        let len = r.random_range(0..96);
        let bytes: Vec<u8> = (0..len).map(|_| r.random()).collect();
        for v in &vocabs {
            failures += usize::from(v.decode(&v.encode(&bytes)).ok().as_deref() != Some(&bytes[..]));
        }
    }
    for _ in 0..1_000 {
        let len = r.random_range(0..48);
        let text: String = (0..len).map(|_| r.random::<char>()).collect();
        for v in &vocabs {
            failures += usize::from(v.decode(&v.encode(text.as_bytes())).ok().as_deref() != Some(text.as_bytes()));
        }
    }
    check(
        failures == 0,
        format!("{failures} failures over 11000 strings x 2 vocabularies ({} merges)", vocabs[1].merges().len()),
    )
}

/// Shared by the causality and simplex criteria.
struct CausalityRun {
    max_prefix_diff: f64,
    max_sum_err: f64,
    min_p: f64,
    outputs: usize,
}

fn causality_runs() -> Result<CausalityRun, String> {
    let mut run = CausalityRun {
        max_prefix_diff: 0.0,
        max_sum_err: 0.0,
        min_p: f64::INFINITY,
        outputs: 0,
    };
    let mut r = rng(2);
    for draw in 0..100 {
        let pos_mode = if draw % 2 == 0 { PosMode::Sinusoidal } else { PosMode::Learned };
        let config = ModelConfig::new(16, 64, 2, 2, 37, 12).with_pos_mode(pos_mode);
        let params = Parameters::random_dense(&config, 0.3, &mut r);
        let a = random_tokens(&mut r, 12, 37);
        let pa = forward_all_positions(&a, &params, &config).map_err(|e| e.to_string())?;
        let mut all = vec![pa.clone()];
        for i in 0..11 {
            let mut b = a.clone();
            for t in &mut b[i + 1..] {
                *t = (*t + r.random_range(1..37)) % 37;
            }
            let pb = forward_all_positions(&b, &params, &config).map_err(|e| e.to_string())?;
            for j in 0..=i {
                for (x, y) in pa[j].iter().zip(&pb[j]) {
                    run.max_prefix_diff = run.max_prefix_diff.max((x - y).abs());
                }
            }
            all.push(pb);
        }
        for p in all.iter().flatten() {
            run.max_sum_err = run.max_sum_err.max((p.iter().sum::<f64>() - 1.0).abs());
            run.min_p = p.iter().copied().fold(run.min_p, f64::min);
            run.outputs += 1;
        }
    }
    Ok(run)
}

fn causality(run: &CausalityRun) -> Outcome {
    check(
        run.max_prefix_diff <= 1e-6,
        format!("max prefix deviation {:.3e} over 100 draws x 11 suffix edits", run.max_prefix_diff),
    )
}

fn simplex(run: &CausalityRun) -> Outcome {
    check(
        run.max_sum_err <= 1e-6 && run.min_p >= 0.0,
        format!(
            "max |sum p - 1| {:.3e}, min p {:.3e} over {} distributions",
            run.max_sum_err, run.min_p, run.outputs
        ),
    )
}

fn gradient_agreement() -> Outcome {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (pos_mode, final_norm, seed) in [(PosMode::Learned, true, 3), (PosMode::Sinusoidal, false, 4)] {
        let mut config = ModelConfig::new(8, 16, 1, 2, 11, 8).with_pos_mode(pos_mode);
        config.final_norm = final_norm;
        let mut r = rng(seed);
        let params = Parameters::random_dense(&config, 0.3, &mut r);
        let batch: Vec<Vec<TokenId>> = (0..2).map(|_| random_tokens(&mut r, 6, 11)).collect();
        let report = gradient_check(&batch, &params, &config, 240, 1e-5, &mut r).map_err(|e| e.to_string())?;
        let tensors = Parameters::specs(&config).len();
        if report.tensors_covered().len() != tensors {
            return Err(format!("{} of {tensors} tensors probed", report.tensors_covered().len()));
        }
        worst = worst.max(report.max_rel_error());
        coords += report.probes.len();
    }
    check(
        worst < GRAD_CHECK_TOLERANCE,
        format!("max relative error {worst:.3e} over {coords} coordinates, every tensor probed"),
    )
}

fn kv_cache_equivalence() -> Outcome {
    let config = ModelConfig::new(16, 32, 2, 2, 37, 48).with_pos_mode(PosMode::Learned);
    let mut r = rng(5);
    let mut max_diff = 0.0f64;
    let mut mismatched = 0;
    for _ in 0..20 {
        let params = Parameters::random_dense(&config, 0.3, &mut r);
        let len = r.random_range(1..=16);
        let prompt = random_tokens(&mut r, len, 37);
        let mut cached_logits = Vec::new();
        let cached = generate_with_observer(&prompt, &params, &config, &greedy(32), &mut |l| {
            cached_logits.push(l.to_vec())
        })
        .map_err(|e| e.to_string())?;

        let mut full = prompt.clone();
        for step_logits in &cached_logits {
            let logits = forward_logits(&full, &params, &config).map_err(|e| e.to_string())?;
            let last = logits.row(logits.rows - 1);
            for (x, y) in last.iter().zip(step_logits) {
                max_diff = max_diff.max((x - y).abs());
            }
            full.push(sample_greedy(&softmax(last).map_err(|e| e.to_string())?));
        }
        mismatched += usize::from(full != cached || cached.len() != prompt.len() + 32);
    }
    check(
        mismatched == 0 && max_diff <= 1e-6,
        format!("{mismatched}/20 sequences differ, max logit deviation {max_diff:.3e}"),
    )
}

/// The library-level recipe at M = 64.
fn memorization_library() -> Result<String, String> {
    let config = ModelConfig::new(32, 64, 2, 2, 64, 64).with_pos_mode(PosMode::Learned);
    let mut r = rng(17);
    let sequence = random_tokens(&mut r, 32, 64);
    let corpus: Vec<TokenId> = sequence.iter().cycle().take(32 * 16).copied().collect();
    let tc = TrainConfig {
        learning_rate: 0.05,
        batch_size: 8,
        seq_len: 32,
        steps: 2000,
        seed: 1,
        grad_check_interval: None,
    };
    let init = Parameters::init(&config, &mut r);
    let mut last = f64::NAN;
    let params = train(&corpus, init, &config, &tc, &mut |rep| last = rep.avg_loss).map_err(|e| e.to_string())?;
    let replay = generate(&sequence[..4], &params, &config, &greedy(28)).map_err(|e| e.to_string())?;
    let detail = format!("library M=64: loss {last:.4}, replay {}", if replay == sequence { "exact" } else { "differs" });
    if last < 0.1 && replay == sequence {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// The same recipe driven through the command-line tool. A byte-level
/// vocabulary has at least 257 entries, so the 32-token sequence is drawn
/// from 64 byte values and the model has M = 257.
fn memorization_cli() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = |n: &str| dir.path().join(n);
    let mut r = rng(23);
    let sequence: Vec<u8> = (0..32).map(|_| b'0' + r.random_range(0..64u8)).collect();
    let prompt = &sequence[..4];
    let cyclic: Vec<u8> = sequence.iter().chain(&sequence[..3]).copied().collect();
    if cyclic.windows(4).filter(|w| *w == prompt).count() != 1 {
        return Err("prompt is ambiguous within the sequence".into());
    }
    std::fs::write(path("corpus.txt"), sequence.repeat(16)).map_err(|e| e.to_string())?;
    common::write_json(&path("model.json"), json!({"d": 32, "D": 64, "L": 2, "h": 2, "n_max": 64, "pos_mode": "learned"}));
    common::write_json(
        &path("train.json"),
        json!({"learning_rate": 0.05, "batch_size": 8, "seq_len": 32, "steps": 2000, "seed": 1}),
    );
    let p = |n: &str| common::s(&path(n)).to_owned();
    let run = |args: &[&str]| -> Result<String, String> {
        let out = common::run(args);
        if out.status.success() {
            Ok(String::from_utf8_lossy(&out.stdout).into_owned())
        } else {
            Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
        }
    };
    run(&["train-bpe", "--corpus", &p("corpus.txt"), "--vocab-size", "257", "--out", &p("vocab.json")])?;
    run(&[
        "train",
        "--vocab",
        &p("vocab.json"),
        "--corpus",
        &p("corpus.txt"),
        "--config",
        &p("model.json"),
        "--train-config",
        &p("train.json"),
        "--out",
        &p("model.bin"),
        "--log",
        &p("train.log"),
    ])?;
    let log = std::fs::read_to_string(path("train.log")).map_err(|e| e.to_string())?;
    let last: serde_json::Value =
        serde_json::from_str(log.lines().last().ok_or("empty training log")?).map_err(|e| e.to_string())?;
    let loss = last["loss"].as_f64().ok_or("log line without loss")?;
    let text = run(&[
        "generate",
        "--ckpt",
        &p("model.bin"),
        "--vocab",
        &p("vocab.json"),
        "--prompt",
        std::str::from_utf8(prompt).unwrap(),
        "--max-new",
        "28",
        "--stop",
        "none",
    ])?;
    let exact = text.trim_end_matches('\n').as_bytes() == &sequence[..];
    let detail = format!("cli M=257: loss {loss:.4}, replay {}", if exact { "exact" } else { "differs" });
    if loss < 0.1 && exact {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn memorization() -> Outcome {
    let lib = memorization_library();
    let cli = memorization_cli();
    let detail = |r: &Result<String, String>| r.clone().unwrap_or_else(|e| e);
    check(lib.is_ok() && cli.is_ok(), format!("{}; {}", detail(&lib), detail(&cli)))
}

fn loss_at_init() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for m in [64usize, 512] {
        let config = ModelConfig::new(32, 64, 2, 2, m, 32);
        let mut r = rng(m as u64);
        let params = Parameters::init(&config, &mut r);
        let batch: Vec<Vec<TokenId>> = (0..8).map(|_| random_tokens(&mut r, 32, m)).collect();
        let loss = batch_loss(&batch, &params, &config).map_err(|e| e.to_string())?;
        let gap = (loss - (m as f64).ln()).abs();
        ok &= gap <= 3.0;
        parts.push(format!("M={m}: loss {loss:.4} vs ln M {:.4}", (m as f64).ln()));
    }
    check(ok, parts.join(", "))
}

fn checkpoint_round_trip() -> Outcome {
    let vocab = Vocabulary::byte_level();
    let config = ModelConfig::new(16, 32, 2, 2, vocab.len(), 16).with_pos_mode(PosMode::Learned);
    let mut r = rng(8);
    let params = Parameters::random_dense(&config, 0.3, &mut r);
    let tokens = random_tokens(&mut r, 16, vocab.len());
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    let ckpt = Checkpoint::new(config.clone(), &vocab, 7, params.clone());
    ckpt.save(&a, Precision::F64).map_err(|e| e.to_string())?;
    ckpt.save(&b, Precision::F64).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&a, &vocab).map_err(|e| e.to_string())?;

    let bits = |p: &Parameters| -> Result<Vec<u64>, String> {
        let out = forward_all_positions(&tokens, p, &config).map_err(|e| e.to_string())?;
        Ok(out.iter().flatten().map(|x| x.to_bits()).collect())
    };
    let same_outputs = bits(&params)? == bits(&loaded.params)?;
    let same_files = std::fs::read(&a).map_err(|e| e.to_string())? == std::fs::read(&b).map_err(|e| e.to_string())?;
    check(
        same_outputs && same_files && loaded.step == 7,
        format!("outputs bitwise equal: {same_outputs}, two saves byte-identical: {same_files}"),
    )
}

/// x·Φ(x) with Φ from the Maclaurin series of erf.
fn gelu_oracle(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    let (mut term, mut sum) = (z, 0.0);
    for n in 0..60 {
        sum += term / (2 * n + 1) as f64;
        term *= -z * z / (n + 1) as f64;
    }
    let erf = 2.0 / std::f64::consts::PI.sqrt() * sum;
    x * 0.5 * (1.0 + erf)
}

fn analytic_spot_values() -> Outcome {
    let mut deviations: Vec<(&str, f64)> = Vec::new();
    let max_abs = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

    deviations.push(("layer_norm (0,2)", max_abs(&layer_norm(&[0.0, 2.0], &[3.0, 3.0], &[1.0, 1.0], 0.0), &[-2.0, 4.0])));
    deviations.push(("layer_norm (1,-1)", max_abs(&layer_norm(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0], 0.0), &[1.0, -1.0])));
    deviations.push(("gelu(1) oracle", (gelu(1.0) - gelu_oracle(1.0)).abs()));
    deviations.push(("gelu(1) literal", (gelu(1.0) - 0.841345).abs()));
    let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).map_err(|e| e.to_string())?;
    deviations.push(("softmax ln(1,2,3)", max_abs(&p, &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0])));
    for m in [64usize, 512] {
        let uniform = vec![1.0 / m as f64; m];
        let ce = cross_entropy(&uniform, 3).map_err(|e| e.to_string())?;
        deviations.push(("cross_entropy uniform", (ce - (m as f64).ln()).abs()));
    }
    let ce = cross_entropy(&[0.5, 0.25, 0.25], 1).map_err(|e| e.to_string())?;
    deviations.push(("cross_entropy ln 4", (ce - 4f64.ln()).abs()));

    let (name, worst) = deviations.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    check(
        worst <= 1e-6,
        format!("{} values, largest deviation {worst:.3e} ({name})", deviations.len()),
    )
}

fn main() {
    let causal = OnceCell::new();
    let from_causal = |f: fn(&CausalityRun) -> Outcome| -> Criterion<'_> {
        let causal = &causal;
        Box::new(move || causal.get_or_init(causality_runs).as_ref().map_err(Clone::clone).and_then(f))
    };
    let criteria: Vec<(&str, Criterion)> = vec![
        ("tokenizer round-trip", Box::new(tokenizer_round_trip)),
        ("causality", from_causal(causality)),
        ("simplex", from_causal(simplex)),
        ("gradient check", Box::new(gradient_agreement)),
        ("kv-cache equivalence", Box::new(kv_cache_equivalence)),
        ("memorization", Box::new(memorization)),
        ("loss at init", Box::new(loss_at_init)),
        ("checkpoint round-trip", Box::new(checkpoint_round_trip)),
        ("analytic spot values", Box::new(analytic_spot_values)),
    ];

    let mut failed = 0;
    for (i, (name, criterion)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(criterion))
            .unwrap_or_else(|e| Err(format!("panicked: {:?}", e.downcast_ref::<String>().map(String::as_str).or(e.downcast_ref::<&str>().copied()))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
