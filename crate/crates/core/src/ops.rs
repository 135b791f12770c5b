//! Position-wise building blocks: layer norm, GELU, softmax, the MLP and
//! scaled dot-product scores.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::params::{BlockParams, LayerNormParams};
use crate::tensor::dot;

/// Mean and population variance.
pub fn moments(e: &[f64]) -> (f64, f64) {
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let var = e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// `s_i (e_i − μ) / √(σ² + eps) + m_i`.
pub fn layer_norm(e: &[f64], scale: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    debug_assert!(!e.is_empty());
    let (mean, var) = moments(e);
    let inv_std = 1.0 / (var + eps).sqrt();
    e.iter()
        .zip(scale.iter().zip(shift))
        .map(|(x, (s, m))| s * (x - mean) * inv_std + m)
        .collect()
}

pub(crate) fn layer_norm_with(e: &[f64], p: &LayerNormParams, eps: f64) -> Vec<f64> {
    layer_norm(e, &p.scale, &p.shift, eps)
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

/// `d/dx [x Φ(x)] = Φ(x) + x φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

/// Max-shifted softmax.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Input("softmax of an empty vector".into()));
    }
    Ok(softmax_nonempty(scores))
}

pub(crate) fn softmax_nonempty(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// `⟨q, key_j⟩ / √k` for every supplied key; callers pass only keys at
/// positions up to and including the query's own.
pub fn attention_scores<'a, I>(query: &[f64], keys: I) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let scale = 1.0 / (query.len() as f64).sqrt();
    keys.into_iter().map(|k| dot(query, k) * scale).collect()
}

/// Up-project to D, GELU, down-project back to d.
pub fn mlp(e: &[f64], block: &BlockParams) -> Vec<f64> {
    let hidden: Vec<f64> = block.up.apply(e).into_iter().map(gelu).collect();
    block.down.apply(&hidden)
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}
