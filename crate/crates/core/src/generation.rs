//! Sampling and the cached autoregressive decoding loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{forward, forward_step};
use crate::ops::{entropy, softmax_nonempty};
use crate::params::Parameters;
use crate::tensor::Matrix;
use crate::tokenizer::{TokenId, TokenSequence, END_OF_TEXT};

/// Projected keys and values for one attention head, one row per position.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub keys: Matrix,
    pub values: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub heads: Vec<HeadCache>,
}

impl LayerCache {
    pub fn new(config: &ModelConfig) -> Self {
        let k = config.head_dim();
        Self {
            heads: (0..config.n_heads)
                .map(|_| HeadCache {
                    keys: Matrix::zeros(0, k),
                    values: Matrix::zeros(0, k),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.heads.first().map_or(0, |h| h.keys.rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Post-projection keys and values of every processed position, per block
/// and head. Owned by a single decoding session.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    // For zero-block models there is nowhere else to count positions.
    positions: usize,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            layers: (0..config.n_layers).map(|_| LayerCache::new(config)).collect(),
            positions: 0,
        }
    }

    /// Number of positions already processed.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(self.positions, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn advance(&mut self, n: usize) {
        self.positions += n;
        debug_assert!(self.layers.iter().all(|l| l.len() == self.positions));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopMode {
    /// Stop when the sampled token equals this id (not appended).
    SpecialToken(TokenId),
    /// Stop before sampling once the next-token entropy (nats) drops below the threshold.
    EntropyBelow(f64),
    MaxOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    Greedy,
    TopK { k: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
    pub stop: StopMode,
    pub sampler: Sampler,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            stop: StopMode::SpecialToken(END_OF_TEXT),
            sampler: Sampler::Greedy,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let StopMode::EntropyBelow(h) = self.stop {
            if h.is_nan() || h < 0.0 {
                return Err(Error::Config(format!("entropy threshold must be non-negative, got {h}")));
            }
        }
        if let Sampler::TopK { k, .. } = self.sampler {
            check_top_k(k, vocab_size)?;
        }
        Ok(())
    }
}

fn check_top_k(k: usize, vocab_size: usize) -> Result<()> {
    if k == 0 || k > vocab_size {
        return Err(Error::Config(format!("top-k needs 1 <= k <= {vocab_size}, got {k}")));
    }
    Ok(())
}

/// Index of the largest probability; the lowest index wins ties.
pub fn sample_greedy(p: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Indices sorted by descending probability, ties by ascending index.
fn ranked(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx
}

/// Draws from the `k` most probable entries of `p`, renormalized.
pub fn sample_top_k<R: Rng + ?Sized>(p: &[f64], k: usize, rng: &mut R) -> Result<TokenId> {
    check_top_k(k, p.len())?;
    if k == 1 {
        return Ok(sample_greedy(p));
    }
    let top = &ranked(p)[..k];
    let mass: f64 = top.iter().map(|&i| p[i]).sum();
    let mut u = rng.random::<f64>() * mass;
    for &i in top {
        u -= p[i];
        if u < 0.0 {
            return Ok(i as TokenId);
        }
    }
    // rounding left a sliver of mass; fall back to the last candidate with support
    Ok(top.iter().rev().copied().find(|&i| p[i] > 0.0).unwrap_or(top[0]) as TokenId)
}

/// Extends `prompt` token by token, reusing cached keys and values so each
/// step only projects the newest token.
pub fn generate(
    prompt: &[TokenId],
    params: &Parameters,
    config: &ModelConfig,
    gen: &GenerationConfig,
) -> Result<TokenSequence> {
    let mut log = |_: &[f64]| {};
    generate_with_observer(prompt, params, config, gen, &mut log)
}

/// Like [`generate`], but hands the logits used at every step to `observe`.
pub fn generate_with_observer(
    prompt: &[TokenId],
    params: &Parameters,
    config: &ModelConfig,
    gen: &GenerationConfig,
    observe: &mut dyn FnMut(&[f64]),
) -> Result<TokenSequence> {
    if prompt.is_empty() {
        return Err(Error::Input("generation needs a non-empty prompt".into()));
    }
    gen.validate(config.vocab_size)?;
    let needed = prompt.len() + gen.max_new_tokens;
    if needed > config.n_max {
        return Err(Error::ContextOverflow {
            needed,
            n_max: config.n_max,
        });
    }

    let mut out = prompt.to_vec();
    if gen.max_new_tokens == 0 {
        return Ok(out);
    }
    let mut rng = match gen.sampler {
        Sampler::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Sampler::Greedy => None,
    };
    let mut cache = KvCache::new(config);
    let mut logits = forward_step(prompt, params, config, &mut cache)?;

    for step in 0..gen.max_new_tokens {
        let last = logits.row(logits.rows - 1);
        observe(last);
        let p = softmax_nonempty(last);
        if let StopMode::EntropyBelow(h) = gen.stop {
            if entropy(&p) < h {
                break;
            }
        }
        let next = match (gen.sampler, rng.as_mut()) {
            (Sampler::TopK { k, .. }, Some(rng)) => sample_top_k(&p, k, rng)?,
            _ => sample_greedy(&p),
        };
        if gen.stop == StopMode::SpecialToken(next) {
            break;
        }
        out.push(next);
        if step + 1 < gen.max_new_tokens {
            logits = forward_step(&[next], params, config, &mut cache)?;
        }
    }
    Ok(out)
}

/// The `top` most probable next tokens, most probable first.
pub fn next_token_distribution(
    prompt: &[TokenId],
    params: &Parameters,
    config: &ModelConfig,
    top: usize,
) -> Result<Vec<(TokenId, f64)>> {
    let p = forward(prompt, params, config)?;
    Ok(ranked(&p)
        .into_iter()
        .take(top)
        .map(|i| (i as TokenId, p[i]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_logits;

    fn setup() -> (ModelConfig, Parameters) {
        let c = ModelConfig::new(16, 32, 2, 2, 23, 40);
        let p = Parameters::random_dense(&c, 0.3, &mut ChaCha8Rng::seed_from_u64(11));
        (c, p)
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(sample_greedy(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(sample_greedy(&[0.25; 4]), 0);
        let mut one_hot = vec![0.0; 9];
        one_hot[6] = 1.0;
        assert_eq!(sample_greedy(&one_hot), 6);
    }

    #[test]
    fn top_k_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = [0.2, 0.1, 0.4, 0.3];
        for _ in 0..50 {
            assert_eq!(sample_top_k(&p, 1, &mut rng).unwrap(), 2);
        }
        let hot = [0.0, 0.0, 1.0, 0.0];
        for _ in 0..200 {
            assert_eq!(sample_top_k(&hot, 4, &mut rng).unwrap(), 2);
        }
        assert!(matches!(sample_top_k(&p, 0, &mut rng), Err(Error::Config(_))));
        assert!(matches!(sample_top_k(&p, 5, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn top_k_frequencies_follow_renormalized_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let p = [0.5, 0.3, 0.2];
        let mut counts = [0usize; 3];
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_top_k(&p, 2, &mut rng).unwrap() as usize] += 1;
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
        assert!((freq[0] - 0.625).abs() < 0.01, "{freq:?}");
        assert!((freq[1] - 0.375).abs() < 0.01, "{freq:?}");
        assert_eq!(counts[2], 0);
    }

    #[test]
    fn zero_new_tokens_returns_prompt() {
        let (c, p) = setup();
        let gen = GenerationConfig {
            max_new_tokens: 0,
            ..Default::default()
        };
        assert_eq!(generate(&[1, 2, 3], &p, &c, &gen).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn overflow_is_an_error_not_a_truncation() {
        let (c, p) = setup();
        let gen = GenerationConfig {
            max_new_tokens: 38,
            stop: StopMode::MaxOnly,
            sampler: Sampler::Greedy,
        };
        assert!(matches!(generate(&[1, 2, 3], &p, &c, &gen), Err(Error::ContextOverflow { .. })));
        assert!(generate(&[], &p, &c, &gen).is_err());
    }

    #[test]
    fn cached_decoding_matches_full_recompute() {
        let (c, p) = setup();
        let prompt: Vec<TokenId> = (0..16).map(|i| (i * 7 % 23) as TokenId).collect();
        let gen = GenerationConfig {
            max_new_tokens: 20,
            stop: StopMode::MaxOnly,
            sampler: Sampler::Greedy,
        };
        let mut seen = Vec::new();
        let cached = generate_with_observer(&prompt, &p, &c, &gen, &mut |l| seen.push(l.to_vec())).unwrap();

        let mut seq = prompt.clone();
        for step_logits in &seen {
            let full = forward_logits(&seq, &p, &c).unwrap();
            let last = full.row(full.rows - 1);
            for (a, b) in last.iter().zip(step_logits) {
                assert!((a - b).abs() <= 1e-6);
            }
            seq.push(sample_greedy(&softmax_nonempty(last)));
        }
        assert_eq!(cached, seq);
    }

    #[test]
    fn entropy_stop_halts_immediately_above_uniform_entropy() {
        let (c, p) = setup();
        let threshold = (c.vocab_size as f64).ln() + 1e-9;
        let gen = GenerationConfig {
            max_new_tokens: 5,
            stop: StopMode::EntropyBelow(threshold),
            sampler: Sampler::Greedy,
        };
        assert_eq!(generate(&[1, 2], &p, &c, &gen).unwrap(), vec![1, 2]);
        let never = GenerationConfig {
            stop: StopMode::EntropyBelow(0.0),
            ..gen
        };
        assert_eq!(generate(&[1, 2], &p, &c, &never).unwrap().len(), 7);
    }

    #[test]
    fn special_token_stops_generation() {
        let (c, p) = setup();
        let probe = GenerationConfig {
            max_new_tokens: 1,
            stop: StopMode::MaxOnly,
            sampler: Sampler::Greedy,
        };
        let first = *generate(&[3, 4], &p, &c, &probe).unwrap().last().unwrap();
        let gen = GenerationConfig {
            max_new_tokens: 10,
            stop: StopMode::SpecialToken(first),
            sampler: Sampler::Greedy,
        };
        assert_eq!(generate(&[3, 4], &p, &c, &gen).unwrap(), vec![3, 4]);
    }

    #[test]
    fn top_k_generation_is_seeded() {
        let (c, p) = setup();
        let gen = GenerationConfig {
            max_new_tokens: 12,
            stop: StopMode::MaxOnly,
            sampler: Sampler::TopK { k: 5, seed: 99 },
        };
        let a = generate(&[1], &p, &c, &gen).unwrap();
        let b = generate(&[1], &p, &c, &gen).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 13);
    }

    #[test]
    fn distribution_is_sorted_and_complete() {
        let (c, p) = setup();
        let dist = next_token_distribution(&[5, 6, 7], &p, &c, c.vocab_size).unwrap();
        assert_eq!(dist.len(), c.vocab_size);
        assert!(dist.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!((dist.iter().map(|(_, q)| q).sum::<f64>() - 1.0).abs() < 1e-6);
        let probs = forward(&[5, 6, 7], &p, &c).unwrap();
        assert_eq!(dist[0].0, sample_greedy(&probs));
    }
}
