//! Tiny decoder-only transformer over a byte vocabulary.
//!
//! Pre-norm blocks with RMS normalization, multi-head causal attention,
//! a SiLU-gated MLP, learned positional embeddings and an untied output
//! head. No biases. Hidden state `x^(i)` is the input of block `i`;
//! `x^(n_layer)` is the input of the final norm.

mod forward;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Real, Tensor, TensorError};

pub use forward::{Bound, Forward, LayerTaps, LinearSite, TapSite, TokenBatch, WeightHook};
pub(crate) use forward::rank_log_probs;
pub(crate) use train::clip_grads;
pub use train::{sample_batch, train_baseline, AdamW, TrainSchedule};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("sequence length {len} is outside [{min}, {max}]")]
    SeqLen { len: usize, min: usize, max: usize },
    #[error("layer index {index} is outside 0..={n_layer}")]
    LayerIndex { index: usize, n_layer: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub d_hidden: usize,
    pub d_inter: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub use_rms_norm_before_linear: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layer: 4,
            n_head: 4,
            d_hidden: 128,
            d_inter: 256,
            vocab_size: 256,
            max_seq_len: 256,
            use_rms_norm_before_linear: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("n_layer", self.n_layer),
            ("n_head", self.n_head),
            ("d_hidden", self.d_hidden),
            ("d_inter", self.d_inter),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        let bad: Vec<String> = counts
            .iter()
            .filter(|(_, v)| *v < 1)
            .map(|(k, _)| format!("{k} >= 1"))
            .collect();
        if !bad.is_empty() {
            return Err(ModelError::Config(format!("violated: {}", bad.join(", "))));
        }
        if self.d_hidden % self.n_head != 0 {
            return Err(ModelError::Config(format!(
                "violated: d_hidden ({}) divisible by n_head ({})",
                self.d_hidden, self.n_head
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.n_head
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, s, l, f) = (
            self.vocab_size,
            self.d_hidden,
            self.max_seq_len,
            self.n_layer,
            self.d_inter,
        );
        2 * v * d + s * d + l * (2 * d + 4 * d * d + 3 * d * f) + d
    }

    /// Same config with normalization inserted before every projection.
    pub fn with_rms_norm_before_linear(mut self) -> Self {
        self.use_rms_norm_before_linear = true;
        self
    }
}

/// How projection weights are represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Fp,
    /// Projections hold dequantized `bits`-wide values.
    Quantized { bits: u8 },
    /// Projections are latent weights ternarized in the forward pass.
    Ternary,
}

pub const PROJECTIONS: [&str; 7] = [
    "attn.q_proj",
    "attn.k_proj",
    "attn.v_proj",
    "attn.o_proj",
    "mlp.gate_proj",
    "mlp.up_proj",
    "mlp.down_proj",
];

pub fn proj_name(layer: usize, proj: &str) -> String {
    format!("layers.{layer}.{proj}.weight")
}

/// Model configuration plus named parameters in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    precision: Precision,
}

impl<T: Real> Model<T> {
    /// Names and shapes of all parameters in canonical order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (config.vocab_size, config.d_hidden, config.d_inter);
        let mut out = vec![
            ("embed.weight".to_string(), vec![v, d]),
            ("pos_embed.weight".to_string(), vec![config.max_seq_len, d]),
        ];
        for i in 0..config.n_layer {
            out.push((format!("layers.{i}.input_layernorm.weight"), vec![d]));
            for p in &PROJECTIONS[..4] {
                out.push((proj_name(i, p), vec![d, d]));
            }
            out.push((format!("layers.{i}.post_attention_layernorm.weight"), vec![d]));
            out.push((proj_name(i, "mlp.gate_proj"), vec![f, d]));
            out.push((proj_name(i, "mlp.up_proj"), vec![f, d]));
            out.push((proj_name(i, "mlp.down_proj"), vec![d, f]));
        }
        out.push(("final_norm.weight".to_string(), vec![d]));
        out.push(("lm_head.weight".to_string(), vec![v, d]));
        out
    }

    /// Deterministic initialization: N(0, 0.02) for matrices, ones for norm gains.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in Self::layout(&config) {
            let t = if shape.len() == 1 {
                Tensor::ones(&shape)
            } else {
                Tensor::from_fn(&shape, |_| T::of(normal.sample(&mut rng)))
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
            precision: Precision::Fp,
        })
    }

    /// Assembles a model from named tensors, which must match the layout exactly.
    pub fn from_params(
        config: ModelConfig,
        named: Vec<(String, Tensor<T>)>,
        precision: Precision,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Self::layout(&config);
        if named.len() != layout.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameters, found {}",
                layout.len(),
                named.len()
            )));
        }
        for ((n, t), (ln, ls)) in named.iter().zip(&layout) {
            if n != ln || t.shape() != ls.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter `{n}` {:?} does not match `{ln}` {ls:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            params,
            precision,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, p: Precision) {
        self.precision = p;
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.index_of(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<(), ModelError> {
        let i = self
            .index_of(name)
            .ok_or_else(|| ModelError::UnknownParam(name.to_string()))?;
        if value.shape() != self.params[i].shape() {
            return Err(ModelError::Config(format!(
                "shape {:?} for `{name}`, expected {:?}",
                value.shape(),
                self.params[i].shape()
            )));
        }
        self.params[i] = value;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// True for attention and MLP projection matrices.
    pub fn is_projection(name: &str) -> bool {
        name.starts_with("layers.") && (name.contains(".attn.") || name.contains(".mlp."))
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            precision: self.precision,
        }
    }

    /// Bitwise equality of configuration and every parameter.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.precision == other.precision
            && self.names == other.names
            && self.params.iter().zip(&other.params).all(|(a, b)| a.bit_eq(b))
    }
}
