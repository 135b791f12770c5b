//! Forward pass: embedding, positional encoding, pre-norm residual blocks
//! with causal multi-head attention, and the prediction head.
//!
//! ```text
//! tokens ─► embed ─► + p(i) ─► [x + Attn(LN(x)); x + MLP(LN(x))] × L ─► LN ─► head ─► softmax
//! ```
//!
//! Every entry point can run against a [`KvCache`]; without one a fresh
//! cache is used, so full recomputation and incremental decoding share the
//! same arithmetic.

use crate::config::{ModelConfig, PosMode};
use crate::error::{Error, Result};
use crate::generation::{KvCache, LayerCache};
use crate::ops::{attention_scores, layer_norm_with, mlp, softmax_nonempty};
use crate::params::{BlockParams, Parameters};
use crate::tensor::{add_assign, axpy, Matrix};
use crate::tokenizer::TokenId;

fn check_context(needed: usize, config: &ModelConfig) -> Result<()> {
    if needed > config.n_max {
        return Err(Error::ContextOverflow {
            needed,
            n_max: config.n_max,
        });
    }
    Ok(())
}

/// Looks up the embedding row of every token.
pub fn embed(tokens: &[TokenId], params: &Parameters, config: &ModelConfig) -> Result<Matrix> {
    check_context(tokens.len(), config)?;
    let mut out = Matrix::zeros(0, config.d_model);
    for &t in tokens {
        if t as usize >= config.vocab_size {
            return Err(Error::Input(format!(
                "token id {t} out of range for vocabulary of size {}",
                config.vocab_size
            )));
        }
        out.push_row(params.embedding.row(t as usize));
    }
    Ok(out)
}

/// Sinusoidal encoding of position `pos` (0-based): even coordinates
/// `sin(pos / 10000^(2j/d))`, odd coordinates the matching cosine.
pub fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// The positional vector added at absolute position `pos`.
pub fn position_vector(pos: usize, params: &Parameters, config: &ModelConfig) -> Vec<f64> {
    match (config.pos_mode, &params.pos_table) {
        (PosMode::Learned, Some(table)) => table.row(pos).to_vec(),
        (PosMode::Learned, None) => panic!("learned positional mode without a pos_table"),
        (PosMode::Sinusoidal, _) => sinusoid(pos, config.d_model),
    }
}

/// Adds `p(start_pos + i)` to row `i`.
pub fn pos_encode(e: &Matrix, params: &Parameters, config: &ModelConfig, start_pos: usize) -> Result<Matrix> {
    check_context(start_pos + e.rows, config)?;
    let mut out = e.clone();
    for i in 0..e.rows {
        add_assign(out.row_mut(i), &position_vector(start_pos + i, params, config));
    }
    Ok(out)
}

/// Causal multi-head attention over `x`, summing the per-head outputs.
///
/// With a cache, `x` holds only the new positions: their keys and values
/// are appended and each new position attends to everything cached so far
/// plus itself. Without one, `x` is the whole sequence.
pub fn self_attention(
    x: &Matrix,
    block: &BlockParams,
    config: &ModelConfig,
    cache: Option<&mut LayerCache>,
) -> Result<Matrix> {
    let mut scratch;
    let cache = match cache {
        Some(c) => c,
        None => {
            scratch = LayerCache::new(config);
            &mut scratch
        }
    };
    let start = cache.len();
    check_context(start + x.rows, config)?;

    let mut out = Matrix::zeros(x.rows, config.d_model);
    for (head, hc) in block.heads.iter().zip(cache.heads.iter_mut()) {
        let queries: Vec<Vec<f64>> = x.rows_iter().map(|r| head.query.apply(r)).collect();
        for r in x.rows_iter() {
            hc.keys.push_row(&head.key.apply(r));
            hc.values.push_row(&head.value.apply(r));
        }
        for (i, q) in queries.iter().enumerate() {
            let visible = start + i + 1;
            let scores = attention_scores(q, hc.keys.rows_iter().take(visible));
            let weights = softmax_nonempty(&scores);
            let mut context = vec![0.0; hc.values.cols];
            for (w, v) in weights.iter().zip(hc.values.rows_iter()) {
                axpy(*w, v, &mut context);
            }
            add_assign(out.row_mut(i), &head.out.apply(&context));
        }
    }
    Ok(out)
}

/// `x ← x + Attn(LN_a(x))`, then `x ← x + MLP(LN_m(x))`.
pub fn block_forward(
    x: &Matrix,
    block: &BlockParams,
    config: &ModelConfig,
    cache: Option<&mut LayerCache>,
) -> Result<Matrix> {
    let mut normed = Matrix::zeros(0, config.d_model);
    for r in x.rows_iter() {
        normed.push_row(&layer_norm_with(r, &block.ln_attn, config.eps_ln));
    }
    let attn = self_attention(&normed, block, config, cache)?;
    let mut out = x.clone();
    add_assign(&mut out.data, &attn.data);
    for i in 0..out.rows {
        let m = mlp(&layer_norm_with(out.row(i), &block.ln_mlp, config.eps_ln), block);
        add_assign(out.row_mut(i), &m);
    }
    Ok(out)
}

/// Runs `tokens` as the next positions after whatever `cache` holds and
/// returns the head logits for each of them.
pub fn forward_step(
    tokens: &[TokenId],
    params: &Parameters,
    config: &ModelConfig,
    cache: &mut KvCache,
) -> Result<Matrix> {
    let start = cache.len();
    check_context(start + tokens.len(), config)?;
    let mut x = pos_encode(&embed(tokens, params, config)?, params, config, start)?;
    for (block, layer) in params.blocks.iter().zip(cache.layers.iter_mut()) {
        x = block_forward(&x, block, config, Some(layer))?;
    }
    cache.advance(tokens.len());
    let mut logits = Matrix::zeros(0, config.vocab_size);
    for r in x.rows_iter() {
        let h = match &params.ln_final {
            Some(ln) => params.head.apply(&layer_norm_with(r, ln, config.eps_ln)),
            None => params.head.apply(r),
        };
        logits.push_row(&h);
    }
    Ok(logits)
}

/// Head logits at every position of a fresh sequence.
pub fn forward_logits(tokens: &[TokenId], params: &Parameters, config: &ModelConfig) -> Result<Matrix> {
    forward_step(tokens, params, config, &mut KvCache::new(config))
}

/// Next-token distribution after the last token of `tokens`.
pub fn forward(tokens: &[TokenId], params: &Parameters, config: &ModelConfig) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Input("forward needs at least one token".into()));
    }
    let logits = forward_logits(tokens, params, config)?;
    Ok(softmax_nonempty(logits.row(logits.rows - 1)))
}

/// Next-token distribution at every position; entry `i` depends only on
/// `tokens[..=i]`.
pub fn forward_all_positions(tokens: &[TokenId], params: &Parameters, config: &ModelConfig) -> Result<Vec<Vec<f64>>> {
    if tokens.is_empty() {
        return Err(Error::Input("forward needs at least one token".into()));
    }
    let logits = forward_logits(tokens, params, config)?;
    Ok(logits.rows_iter().map(softmax_nonempty).collect())
}
