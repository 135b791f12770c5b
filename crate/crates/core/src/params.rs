//! The learnable parameter set and its flat, named-tensor view.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, PosMode};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Standard deviation of the initial weight distribution.
pub const INIT_STD: f64 = 0.02;

/// Affine map `x ↦ W x + b` with `W` stored as (out × in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::random_normal(output, input, INIT_STD, rng),
            bias: vec![0.0; output],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        crate::tensor::add_assign(&mut y, &self.bias);
        y
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            scale: vec![1.0; d],
            shift: vec![0.0; d],
        }
    }
}

/// One attention head: d→k query/key/value projections and its own k→d
/// output projection. Heads are combined by summing their outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln_attn: LayerNormParams,
    pub heads: Vec<HeadParams>,
    pub ln_mlp: LayerNormParams,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// M × d
    pub embedding: Matrix,
    /// n_max × d, only in learned positional mode.
    pub pos_table: Option<Matrix>,
    pub blocks: Vec<BlockParams>,
    pub ln_final: Option<LayerNormParams>,
    /// d → M
    pub head: Linear,
}

/// Gradients share the exact layout of the parameters they belong to.
pub type GradientSet = Parameters;

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

impl Parameters {
    /// Seeded initialization: weights ~ N(0, 0.02²), biases 0, norms identity.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let k = config.head_dim();
        Self {
            embedding: Matrix::random_normal(config.vocab_size, d, INIT_STD, rng),
            pos_table: (config.pos_mode == PosMode::Learned)
                .then(|| Matrix::random_normal(config.n_max, d, INIT_STD, rng)),
            blocks: (0..config.n_layers)
                .map(|_| BlockParams {
                    ln_attn: LayerNormParams::identity(d),
                    heads: (0..config.n_heads)
                        .map(|_| HeadParams {
                            query: Linear::init(d, k, rng),
                            key: Linear::init(d, k, rng),
                            value: Linear::init(d, k, rng),
                            out: Linear::init(k, d, rng),
                        })
                        .collect(),
                    ln_mlp: LayerNormParams::identity(d),
                    up: Linear::init(d, config.d_hidden, rng),
                    down: Linear::init(config.d_hidden, d, rng),
                })
                .collect(),
            ln_final: config.final_norm.then(|| LayerNormParams::identity(d)),
            head: Linear::init(d, config.vocab_size, rng),
        }
    }

    /// All-zero tensors of the right shapes (including norm scales).
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let k = config.head_dim();
        let zero_norm = || LayerNormParams {
            scale: vec![0.0; d],
            shift: vec![0.0; d],
        };
        Self {
            embedding: Matrix::zeros(config.vocab_size, d),
            pos_table: (config.pos_mode == PosMode::Learned).then(|| Matrix::zeros(config.n_max, d)),
            blocks: (0..config.n_layers)
                .map(|_| BlockParams {
                    ln_attn: zero_norm(),
                    heads: (0..config.n_heads)
                        .map(|_| HeadParams {
                            query: Linear::zeros(d, k),
                            key: Linear::zeros(d, k),
                            value: Linear::zeros(d, k),
                            out: Linear::zeros(k, d),
                        })
                        .collect(),
                    ln_mlp: zero_norm(),
                    up: Linear::zeros(d, config.d_hidden),
                    down: Linear::zeros(config.d_hidden, d),
                })
                .collect(),
            ln_final: config.final_norm.then(zero_norm),
            head: Linear::zeros(d, config.vocab_size),
        }
    }

    /// Every entry (biases and norm parameters included) drawn from
    /// N(0, std²); norm scales are centred on 1. Handy for probing the
    /// forward and backward passes away from the symmetric initial point.
    pub fn random_dense<R: Rng + ?Sized>(config: &ModelConfig, std: f64, rng: &mut R) -> Self {
        let mut params = Self::zeros(config);
        let normal = Normal::new(0.0, std).expect("finite std");
        for (name, data) in params.tensors_mut() {
            let offset = if name.ends_with(".scale") { 1.0 } else { 0.0 };
            for v in data.iter_mut() {
                *v = offset + normal.sample(rng);
            }
        }
        params
    }

    /// Names and shapes of every tensor, in the canonical order used by
    /// [`Parameters::tensors`] and the checkpoint format.
    pub fn specs(config: &ModelConfig) -> Vec<TensorSpec> {
        let (d, k, hidden, m) = (config.d_model, config.head_dim(), config.d_hidden, config.vocab_size);
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| specs.push(TensorSpec { name, shape });
        push("embedding".into(), vec![m, d]);
        if config.pos_mode == PosMode::Learned {
            push("pos_table".into(), vec![config.n_max, d]);
        }
        for l in 0..config.n_layers {
            push(format!("blocks.{l}.ln_attn.scale"), vec![d]);
            push(format!("blocks.{l}.ln_attn.shift"), vec![d]);
            for h in 0..config.n_heads {
                for proj in ["query", "key", "value"] {
                    push(format!("blocks.{l}.heads.{h}.{proj}.weight"), vec![k, d]);
                    push(format!("blocks.{l}.heads.{h}.{proj}.bias"), vec![k]);
                }
                push(format!("blocks.{l}.heads.{h}.out.weight"), vec![d, k]);
                push(format!("blocks.{l}.heads.{h}.out.bias"), vec![d]);
            }
            push(format!("blocks.{l}.ln_mlp.scale"), vec![d]);
            push(format!("blocks.{l}.ln_mlp.shift"), vec![d]);
            push(format!("blocks.{l}.up.weight"), vec![hidden, d]);
            push(format!("blocks.{l}.up.bias"), vec![hidden]);
            push(format!("blocks.{l}.down.weight"), vec![d, hidden]);
            push(format!("blocks.{l}.down.bias"), vec![d]);
        }
        if config.final_norm {
            push("ln_final.scale".into(), vec![d]);
            push("ln_final.shift".into(), vec![d]);
        }
        push("head.weight".into(), vec![m, d]);
        push("head.bias".into(), vec![m]);
        specs
    }

    /// Flat views of every tensor in canonical order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![("embedding".into(), &self.embedding.data)];
        if let Some(p) = &self.pos_table {
            out.push(("pos_table".into(), &p.data));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.ln_attn.scale"), &b.ln_attn.scale));
            out.push((format!("blocks.{l}.ln_attn.shift"), &b.ln_attn.shift));
            for (h, head) in b.heads.iter().enumerate() {
                for (proj, lin) in [("query", &head.query), ("key", &head.key), ("value", &head.value), ("out", &head.out)] {
                    out.push((format!("blocks.{l}.heads.{h}.{proj}.weight"), &lin.weight.data));
                    out.push((format!("blocks.{l}.heads.{h}.{proj}.bias"), &lin.bias));
                }
            }
            out.push((format!("blocks.{l}.ln_mlp.scale"), &b.ln_mlp.scale));
            out.push((format!("blocks.{l}.ln_mlp.shift"), &b.ln_mlp.shift));
            out.push((format!("blocks.{l}.up.weight"), &b.up.weight.data));
            out.push((format!("blocks.{l}.up.bias"), &b.up.bias));
            out.push((format!("blocks.{l}.down.weight"), &b.down.weight.data));
            out.push((format!("blocks.{l}.down.bias"), &b.down.bias));
        }
        if let Some(ln) = &self.ln_final {
            out.push(("ln_final.scale".into(), &ln.scale));
            out.push(("ln_final.shift".into(), &ln.shift));
        }
        out.push(("head.weight".into(), &self.head.weight.data));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![("embedding".into(), &mut self.embedding.data)];
        if let Some(p) = &mut self.pos_table {
            out.push(("pos_table".into(), &mut p.data));
        }
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{l}.ln_attn.scale"), &mut b.ln_attn.scale));
            out.push((format!("blocks.{l}.ln_attn.shift"), &mut b.ln_attn.shift));
            for (h, head) in b.heads.iter_mut().enumerate() {
                let HeadParams { query, key, value, out: out_proj } = head;
                for (proj, lin) in [("query", query), ("key", key), ("value", value), ("out", out_proj)] {
                    out.push((format!("blocks.{l}.heads.{h}.{proj}.weight"), &mut lin.weight.data));
                    out.push((format!("blocks.{l}.heads.{h}.{proj}.bias"), &mut lin.bias));
                }
            }
            out.push((format!("blocks.{l}.ln_mlp.scale"), &mut b.ln_mlp.scale));
            out.push((format!("blocks.{l}.ln_mlp.shift"), &mut b.ln_mlp.shift));
            out.push((format!("blocks.{l}.up.weight"), &mut b.up.weight.data));
            out.push((format!("blocks.{l}.up.bias"), &mut b.up.bias));
            out.push((format!("blocks.{l}.down.weight"), &mut b.down.weight.data));
            out.push((format!("blocks.{l}.down.bias"), &mut b.down.bias));
        }
        if let Some(ln) = &mut self.ln_final {
            out.push(("ln_final.scale".into(), &mut ln.scale));
            out.push(("ln_final.shift".into(), &mut ln.shift));
        }
        out.push(("head.weight".into(), &mut self.head.weight.data));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Confirms every tensor has the shape `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let specs = Self::specs(config);
        let tensors = self.tensors();
        if specs.len() != tensors.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, configuration implies {}",
                tensors.len(),
                specs.len()
            )));
        }
        for (spec, (name, data)) in specs.iter().zip(&tensors) {
            if spec.name != *name || spec.numel() != data.len() {
                return Err(Error::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: vec![data.len()],
                });
            }
        }
        Ok(())
    }

    /// Name of the first tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, data)| data.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| name)
    }

    /// Builds a parameter set from flat tensors in canonical order.
    pub fn from_flat(config: &ModelConfig, tensors: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut params = Self::zeros(config);
        let mut slots = params.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((slot_name, slot), (name, data)) in slots.iter_mut().zip(tensors) {
            if *slot_name != name || slot.len() != data.len() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: vec![slot.len()],
                    found: vec![data.len()],
                });
            }
            slot.copy_from_slice(&data);
        }
        drop(slots);
        Ok(params)
    }
}
