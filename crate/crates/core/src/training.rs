//! Next-token cross-entropy, exact gradients, and plain SGD.
//!
//! The backward pass is derived by hand, layer by layer, and replays its own
//! forward pass with activations recorded. [`gradient_check`] compares it
//! against central differences of [`batch_loss`], which goes through the
//! inference path in [`crate::model`] instead.

use std::ops::Range;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{forward_all_positions, position_vector};
use crate::ops::{gelu, gelu_grad, moments, softmax_nonempty};
use crate::params::{BlockParams, GradientSet, LayerNormParams, Parameters};
use crate::tensor::{add_assign, axpy, dot, Matrix};
use crate::tokenizer::{TokenId, TokenSequence};

/// Probabilities are clamped here before taking the log, capping a single
/// loss term at about 27.6 nats.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grad_check_interval: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        if self.seq_len > model.n_max {
            return Err(Error::Config(format!(
                "seq_len {} exceeds the context length {}",
                self.seq_len, model.n_max
            )));
        }
        if self.grad_check_interval == Some(0) {
            return Err(Error::Config("grad_check_interval must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub step: usize,
    #[serde(rename = "loss")]
    pub avg_loss: f64,
    #[serde(rename = "tokens")]
    pub tokens_seen: usize,
    #[serde(rename = "seconds")]
    pub wall_time: f64,
}

/// `−ln max(P_target, floor)`.
pub fn cross_entropy(p: &[f64], target: TokenId) -> Result<f64> {
    let pt = p
        .get(target as usize)
        .ok_or_else(|| Error::Input(format!("target {target} out of range for {} classes", p.len())))?;
    Ok(-pt.max(PROB_FLOOR).ln())
}

fn check_batch(batch: &[TokenSequence]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if let Some(short) = batch.iter().find(|s| s.len() < 2) {
        return Err(Error::Input(format!(
            "training sequences need at least 2 tokens, got {}",
            short.len()
        )));
    }
    Ok(batch.iter().map(|s| s.len() - 1).sum())
}

/// Mean next-token cross-entropy over every position of every sequence.
pub fn batch_loss(batch: &[TokenSequence], params: &Parameters, config: &ModelConfig) -> Result<f64> {
    let count = check_batch(batch)?;
    let mut total = 0.0;
    for seq in batch {
        let probs = forward_all_positions(&seq[..seq.len() - 1], params, config)?;
        for (p, &target) in probs.iter().zip(&seq[1..]) {
            total += cross_entropy(p, target)?;
        }
    }
    Ok(total / count as f64)
}

struct NormCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

fn norm_forward(x: &[f64], p: &LayerNormParams, eps: f64) -> (Vec<f64>, NormCache) {
    let (mean, var) = moments(x);
    let inv_std = 1.0 / (var + eps).sqrt();
    let y = x
        .iter()
        .zip(p.scale.iter().zip(&p.shift))
        .map(|(x, (s, m))| s * (x - mean) * inv_std + m)
        .collect();
    let xhat = x.iter().map(|x| (x - mean) * inv_std).collect();
    (y, NormCache { xhat, inv_std })
}

fn norm_backward(dy: &[f64], cache: &NormCache, p: &LayerNormParams, g: &mut LayerNormParams) -> Vec<f64> {
    let d = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(&p.scale).map(|(a, s)| a * s).collect();
    for ((gs, gm), (dyi, xh)) in g.scale.iter_mut().zip(g.shift.iter_mut()).zip(dy.iter().zip(&cache.xhat)) {
        *gs += dyi * xh;
        *gm += dyi;
    }
    let mean_dxhat = dxhat.iter().sum::<f64>() / d;
    let mean_dxhat_xhat = dot(&dxhat, &cache.xhat) / d;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(dh, xh)| cache.inv_std * (dh - mean_dxhat - xh * mean_dxhat_xhat))
        .collect()
}

struct HeadTrace {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Row `i` holds the attention weights over positions `0..=i`.
    weights: Vec<Vec<f64>>,
    context: Matrix,
}

struct BlockTrace {
    norm_attn: Vec<NormCache>,
    attn_in: Matrix,
    heads: Vec<HeadTrace>,
    norm_mlp: Vec<NormCache>,
    mlp_in: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

fn block_forward_traced(x: &Matrix, block: &BlockParams, config: &ModelConfig) -> (Matrix, BlockTrace) {
    let n = x.rows;
    let d = config.d_model;
    let k = config.head_dim();
    let scale = 1.0 / (k as f64).sqrt();

    let mut attn_in = Matrix::zeros(0, d);
    let mut norm_attn = Vec::with_capacity(n);
    for r in x.rows_iter() {
        let (y, c) = norm_forward(r, &block.ln_attn, config.eps_ln);
        attn_in.push_row(&y);
        norm_attn.push(c);
    }

    let mut mid = x.clone();
    let mut heads = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        let mut q = Matrix::zeros(0, k);
        let mut kk = Matrix::zeros(0, k);
        let mut v = Matrix::zeros(0, k);
        for r in attn_in.rows_iter() {
            q.push_row(&head.query.apply(r));
            kk.push_row(&head.key.apply(r));
            v.push_row(&head.value.apply(r));
        }
        let mut weights = Vec::with_capacity(n);
        let mut context = Matrix::zeros(n, k);
        for i in 0..n {
            let scores: Vec<f64> = (0..=i).map(|j| dot(q.row(i), kk.row(j)) * scale).collect();
            let w = softmax_nonempty(&scores);
            let ctx = context.row_mut(i);
            for (j, wj) in w.iter().enumerate() {
                axpy(*wj, v.row(j), ctx);
            }
            weights.push(w);
        }
        for i in 0..n {
            add_assign(mid.row_mut(i), &head.out.apply(context.row(i)));
        }
        heads.push(HeadTrace {
            q,
            k: kk,
            v,
            weights,
            context,
        });
    }

    let mut out = mid.clone();
    let mut mlp_in = Matrix::zeros(0, d);
    let mut norm_mlp = Vec::with_capacity(n);
    let mut pre_act = Matrix::zeros(0, config.d_hidden);
    let mut act = Matrix::zeros(0, config.d_hidden);
    for i in 0..n {
        let (y, c) = norm_forward(mid.row(i), &block.ln_mlp, config.eps_ln);
        let u = block.up.apply(&y);
        let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
        add_assign(out.row_mut(i), &block.down.apply(&g));
        mlp_in.push_row(&y);
        norm_mlp.push(c);
        pre_act.push_row(&u);
        act.push_row(&g);
    }

    let trace = BlockTrace {
        norm_attn,
        attn_in,
        heads,
        norm_mlp,
        mlp_in,
        pre_act,
        act,
    };
    (out, trace)
}

/// Takes the gradient w.r.t. the block output and returns the gradient
/// w.r.t. its input, accumulating parameter gradients into `g`.
fn block_backward(
    dout: Matrix,
    block: &BlockParams,
    trace: &BlockTrace,
    config: &ModelConfig,
    g: &mut BlockParams,
) -> Matrix {
    let n = dout.rows;
    let d = config.d_model;
    let k = config.head_dim();
    let scale = 1.0 / (k as f64).sqrt();

    // MLP branch: out = mid + down(gelu(up(LN(mid))))
    let mut dmid = dout.clone();
    for i in 0..n {
        let dz = dout.row(i);
        g.down.weight.add_outer(dz, trace.act.row(i));
        add_assign(&mut g.down.bias, dz);
        let dact = block.down.weight.matvec_t(dz);
        let du: Vec<f64> = dact
            .iter()
            .zip(trace.pre_act.row(i))
            .map(|(a, &u)| a * gelu_grad(u))
            .collect();
        g.up.weight.add_outer(&du, trace.mlp_in.row(i));
        add_assign(&mut g.up.bias, &du);
        let dnormed = block.up.weight.matvec_t(&du);
        let dx = norm_backward(&dnormed, &trace.norm_mlp[i], &block.ln_mlp, &mut g.ln_mlp);
        add_assign(dmid.row_mut(i), &dx);
    }

    // attention branch: mid = x + Σ_h out_h(context_h)
    let mut dattn_in = Matrix::zeros(n, d);
    for ((head, ht), gh) in block.heads.iter().zip(&trace.heads).zip(g.heads.iter_mut()) {
        let mut dq = Matrix::zeros(n, k);
        let mut dk = Matrix::zeros(n, k);
        let mut dv = Matrix::zeros(n, k);
        for i in 0..n {
            let dy = dmid.row(i);
            gh.out.weight.add_outer(dy, ht.context.row(i));
            add_assign(&mut gh.out.bias, dy);
            let dctx = head.out.weight.matvec_t(dy);
            let w = &ht.weights[i];
            let dw: Vec<f64> = (0..=i).map(|j| dot(&dctx, ht.v.row(j))).collect();
            for (j, wj) in w.iter().enumerate() {
                axpy(*wj, &dctx, dv.row_mut(j));
            }
            let inner = dot(w, &dw);
            for j in 0..=i {
                let dscore = w[j] * (dw[j] - inner) * scale;
                axpy(dscore, ht.k.row(j), dq.row_mut(i));
                axpy(dscore, ht.q.row(i), dk.row_mut(j));
            }
        }
        for i in 0..n {
            let a = trace.attn_in.row(i);
            for (lin, glin, grad) in [
                (&head.query, &mut gh.query, dq.row(i)),
                (&head.key, &mut gh.key, dk.row(i)),
                (&head.value, &mut gh.value, dv.row(i)),
            ] {
                glin.weight.add_outer(grad, a);
                add_assign(&mut glin.bias, grad);
                add_assign(dattn_in.row_mut(i), &lin.weight.matvec_t(grad));
            }
        }
    }

    let mut dx = dmid;
    for i in 0..n {
        let d_in = norm_backward(dattn_in.row(i), &trace.norm_attn[i], &block.ln_attn, &mut g.ln_attn);
        add_assign(dx.row_mut(i), &d_in);
    }
    dx
}

/// Forward and backward over one sequence. Gradients of the loss sum,
/// multiplied by `weight`, are accumulated into `grads`; the unweighted
/// loss sum is returned.
fn sequence_backward(
    seq: &[TokenId],
    params: &Parameters,
    config: &ModelConfig,
    weight: f64,
    grads: &mut GradientSet,
) -> Result<f64> {
    let inputs = &seq[..seq.len() - 1];
    let targets = &seq[1..];
    let n = inputs.len();
    if n > config.n_max {
        return Err(Error::ContextOverflow {
            needed: n,
            n_max: config.n_max,
        });
    }

    let mut x = Matrix::zeros(0, config.d_model);
    for (i, &t) in inputs.iter().enumerate() {
        if t as usize >= config.vocab_size {
            return Err(Error::Input(format!("token id {t} out of range")));
        }
        let mut row = params.embedding.row(t as usize).to_vec();
        add_assign(&mut row, &position_vector(i, params, config));
        x.push_row(&row);
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!("target id {bad} out of range")));
    }

    let mut traces = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (out, trace) = block_forward_traced(&x, block, config);
        traces.push(trace);
        x = out;
    }

    let mut loss = 0.0;
    let mut dx = Matrix::zeros(n, config.d_model);
    for i in 0..n {
        let (feat, norm_cache) = match &params.ln_final {
            Some(ln) => {
                let (y, c) = norm_forward(x.row(i), ln, config.eps_ln);
                (y, Some(c))
            }
            None => (x.row(i).to_vec(), None),
        };
        let p = softmax_nonempty(&params.head.apply(&feat));
        let target = targets[i] as usize;
        loss += -p[target].max(PROB_FLOOR).ln();
        if p[target] < PROB_FLOOR {
            // clamped: the loss term is locally constant
            continue;
        }
        let mut dlogits: Vec<f64> = p.iter().map(|pi| pi * weight).collect();
        dlogits[target] -= weight;
        grads.head.weight.add_outer(&dlogits, &feat);
        add_assign(&mut grads.head.bias, &dlogits);
        let dfeat = params.head.weight.matvec_t(&dlogits);
        let dxi = match (&params.ln_final, norm_cache, grads.ln_final.as_mut()) {
            (Some(ln), Some(c), Some(g)) => norm_backward(&dfeat, &c, ln, g),
            _ => dfeat,
        };
        dx.row_mut(i).copy_from_slice(&dxi);
    }

    for ((block, trace), g) in params.blocks.iter().zip(&traces).zip(grads.blocks.iter_mut()).rev() {
        dx = block_backward(dx, block, trace, config, g);
    }

    for (i, &t) in inputs.iter().enumerate() {
        add_assign(grads.embedding.row_mut(t as usize), dx.row(i));
        if let Some(table) = grads.pos_table.as_mut() {
            add_assign(table.row_mut(i), dx.row(i));
        }
    }
    Ok(loss)
}

fn add_grads(acc: &mut GradientSet, other: &GradientSet) {
    for ((_, a), (_, b)) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        add_assign(a, b);
    }
}

/// Loss and exact gradient of [`batch_loss`] with respect to every parameter.
///
/// Sequences are processed in parallel; per-sequence gradients are summed
/// in batch order so the result does not depend on thread scheduling.
pub fn backward(batch: &[TokenSequence], params: &Parameters, config: &ModelConfig) -> Result<(f64, GradientSet)> {
    let count = check_batch(batch)?;
    let weight = 1.0 / count as f64;
    let parts: Vec<(f64, GradientSet)> = batch
        .par_iter()
        .map(|seq| {
            let mut g = Parameters::zeros(config);
            let loss = sequence_backward(seq, params, config, weight, &mut g)?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;

    let mut parts = parts.into_iter();
    let (mut loss_sum, mut grads) = parts.next().expect("non-empty batch");
    for (l, g) in parts {
        loss_sum += l;
        add_grads(&mut grads, &g);
    }
    let loss = loss_sum / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { tensor: "loss".into() });
    }
    if let Some(tensor) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: format!("gradient of {tensor}"),
        });
    }
    Ok((loss, grads))
}

/// `θ ← θ − λ ∇θ`.
pub fn sgd_step(params: &mut Parameters, grads: &GradientSet, learning_rate: f64) -> Result<()> {
    if learning_rate.is_nan() || learning_rate <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
    }
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    if grad_tensors.len() != param_tensors.len() {
        return Err(Error::ShapeMismatch {
            name: "parameter set".into(),
            expected: vec![param_tensors.len()],
            found: vec![grad_tensors.len()],
        });
    }
    for ((name, p), (gname, g)) in param_tensors.iter_mut().zip(&grad_tensors) {
        if name != gname || p.len() != g.len() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: vec![p.len()],
                found: vec![g.len()],
            });
        }
        axpy(-learning_rate, g, p);
    }
    Ok(())
}

/// One coordinate of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradProbe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<GradProbe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradProbe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Distinct tensor names that were probed.
    pub fn tensors_covered(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.probes.iter().map(|p| p.tensor.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

/// Relative-error denominator floor: gradients smaller than this are
/// compared in absolute terms, since central differences of an O(1) loss
/// carry roughly 1e-11 of rounding noise.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares [`backward`] with central differences `(f(θ+ε) − f(θ−ε)) / 2ε`
/// of [`batch_loss`] at `n_coords` coordinates, visiting tensors round-robin
/// so every tensor is probed.
pub fn gradient_check<R: Rng + ?Sized>(
    batch: &[TokenSequence],
    params: &Parameters,
    config: &ModelConfig,
    n_coords: usize,
    eps: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let (_, grads) = backward(batch, params, config)?;
    let grad_tensors: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    let mut probe_params = params.clone();
    let mut probes = Vec::with_capacity(n_coords);
    for c in 0..n_coords {
        let t = c % grad_tensors.len();
        let (name, g) = &grad_tensors[t];
        let index = rng.random_range(0..g.len());
        let original = params.tensors()[t].1[index];
        let eval = |value: f64, p: &mut Parameters| -> Result<f64> {
            p.tensors_mut()[t].1[index] = value;
            batch_loss(batch, p, config)
        };
        let plus = eval(original + eps, &mut probe_params)?;
        let minus = eval(original - eps, &mut probe_params)?;
        eval(original, &mut probe_params)?;
        let numeric = (plus - minus) / (2.0 * eps);
        probes.push(GradProbe {
            tensor: name.clone(),
            index,
            analytic: g[index],
            numeric,
            rel_error: relative_error(g[index], numeric),
        });
    }
    Ok(GradCheckReport { probes })
}

/// Draws `batch_size` windows of `seq_len + 1` tokens uniformly (with
/// replacement). The random stream depends only on `(seed, step)`, so a
/// resumed run sees the same batches as an uninterrupted one.
pub fn sample_batch(corpus: &[TokenId], train: &TrainConfig, step: usize) -> Vec<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(step as u64);
    let window = train.seq_len + 1;
    let last_start = corpus.len() - window;
    (0..train.batch_size)
        .map(|_| {
            let s = rng.random_range(0..=last_start);
            corpus[s..s + window].to_vec()
        })
        .collect()
}

/// Runs SGD for the steps in `steps` (0-based), calling `sink` after each.
pub fn train_steps(
    corpus: &[TokenId],
    params: &mut Parameters,
    config: &ModelConfig,
    train: &TrainConfig,
    steps: Range<usize>,
    sink: &mut dyn FnMut(&TrainReport),
) -> Result<()> {
    config.validate()?;
    train.validate(config)?;
    params.check_shapes(config)?;
    if corpus.len() < train.seq_len + 1 {
        return Err(Error::Input(format!(
            "corpus has {} tokens, need at least seq_len + 1 = {}",
            corpus.len(),
            train.seq_len + 1
        )));
    }
    let started = Instant::now();
    for step in steps {
        let batch = sample_batch(corpus, train, step);
        let (loss, grads) = backward(&batch, params, config)?;
        if let Some(every) = train.grad_check_interval {
            if (step + 1) % every == 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x9e37_79b9_7f4a_7c15);
                rng.set_stream(step as u64);
                let report = gradient_check(&batch, params, config, 24, 1e-5, &mut rng)?;
                if report.max_rel_error() >= GRAD_CHECK_TOLERANCE {
                    let worst = report.worst().expect("probes");
                    return Err(Error::GradientCheck {
                        max_rel_error: worst.rel_error,
                        worst: format!("{}[{}]", worst.tensor, worst.index),
                    });
                }
            }
        }
        sgd_step(params, &grads, train.learning_rate)?;
        sink(&TrainReport {
            step: step + 1,
            avg_loss: loss,
            tokens_seen: (step + 1) * train.batch_size * train.seq_len,
            wall_time: started.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Trains from step 0 for `train.steps` updates.
pub fn train(
    corpus: &[TokenId],
    mut params: Parameters,
    config: &ModelConfig,
    train: &TrainConfig,
    sink: &mut dyn FnMut(&TrainReport),
) -> Result<Parameters> {
    train_steps(corpus, &mut params, config, train, 0..train.steps, sink)?;
    Ok(params)
}
