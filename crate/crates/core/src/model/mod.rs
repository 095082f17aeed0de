//! Minimal pre-norm decoder-only transformer.
//!
//! Each block is `x + attn(ln1(x))` followed by `h + mlp(ln2(h))` with a GELU
//! MLP and causal multi-head attention. Token and learned position
//! embeddings are summed at the input; a final layer norm and an unembedding
//! matrix produce logits. Weight matrices are stored input-major
//! (`[d_in, d_out]`), so a layer computes `x · W + b`.
//!
//! The hidden state captured for layer `l` is the residual stream after the
//! second residual add of block `l`, i.e. exactly what block `l + 1` reads.

mod config;
mod forward;

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::matrix::Matrix;
use crate::tensor::{Shape, Tensor};

pub use config::{
    block_tensor_name, ModelConfig, BLOCK_TENSORS, FINAL_NORM_BIAS, FINAL_NORM_WEIGHT, POS_EMBED,
    TOK_EMBED, UNEMBED,
};
pub use forward::{apply_head, block_forward, embed_tokens, gelu, layer_norm, LN_EPS};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found}, expected {expected}")]
    TensorShape {
        name: String,
        expected: Shape,
        found: Shape,
    },
    #[error("checkpoint has unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("sequence length {len} outside 1..={max}")]
    SequenceLength { len: usize, max: usize },
    #[error("layer index {layer} out of range for {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },
}

/// Token and position embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedWeights {
    pub tok: Vec<f64>,
    pub pos: Vec<f64>,
}

/// One block's sixteen parameter arrays, ordered as [`BLOCK_TENSORS`].
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub params: [Vec<f64>; 16],
}

impl BlockWeights {
    pub const LN1_W: usize = 0;
    pub const LN1_B: usize = 1;
    pub const Q_W: usize = 2;
    pub const Q_B: usize = 3;
    pub const K_W: usize = 4;
    pub const K_B: usize = 5;
    pub const V_W: usize = 6;
    pub const V_B: usize = 7;
    pub const O_W: usize = 8;
    pub const O_B: usize = 9;
    pub const LN2_W: usize = 10;
    pub const LN2_B: usize = 11;
    pub const FC1_W: usize = 12;
    pub const FC1_B: usize = 13;
    pub const FC2_W: usize = 14;
    pub const FC2_B: usize = 15;

    pub fn lerp(a: &Self, b: &Self, la: f64, lb: f64) -> Self {
        Self {
            params: core::array::from_fn(|i| lerp_vec(&a.params[i], &b.params[i], la, lb)),
        }
    }
}

impl EmbedWeights {
    pub fn lerp(a: &Self, b: &Self, la: f64, lb: f64) -> Self {
        Self {
            tok: lerp_vec(&a.tok, &b.tok, la, lb),
            pos: lerp_vec(&a.pos, &b.pos, la, lb),
        }
    }
}

/// Final layer norm and unembedding.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub norm_w: Vec<f64>,
    pub norm_b: Vec<f64>,
    pub unembed: Vec<f64>,
}

impl HeadWeights {
    pub fn lerp(a: &Self, b: &Self, la: f64, lb: f64) -> Self {
        Self {
            norm_w: lerp_vec(&a.norm_w, &b.norm_w, la, lb),
            norm_b: lerp_vec(&a.norm_b, &b.norm_b, la, lb),
            unembed: lerp_vec(&a.unembed, &b.unembed, la, lb),
        }
    }
}

pub(crate) fn lerp_vec(a: &[f64], b: &[f64], la: f64, lb: f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| la * x + lb * y).collect()
}

/// Hidden states `z^(l)`, one `(seq_len × d_model)` tensor per block.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub per_layer: Vec<Tensor>,
}

/// A checkpoint unpacked into `f64` arrays and validated against its config.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ModelConfig,
    pub embed: EmbedWeights,
    pub blocks: Vec<BlockWeights>,
    pub head: HeadWeights,
}

fn fetch(ckpt: &Checkpoint, name: &str, expected: &Shape) -> Result<Vec<f64>, ModelError> {
    let t = ckpt
        .get(name)
        .ok_or_else(|| ModelError::MissingTensor(name.into()))?;
    if t.shape() != expected {
        return Err(ModelError::TensorShape {
            name: name.into(),
            expected: expected.clone(),
            found: t.shape().clone(),
        });
    }
    Ok(t.data().iter().map(|&v| f64::from(v)).collect())
}

impl ToyModel {
    pub fn from_checkpoint(ckpt: &Checkpoint, config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let canonical = config.canonical_tensors();
        for name in ckpt.names() {
            if !canonical.iter().any(|(n, _)| n == name) {
                return Err(ModelError::UnexpectedTensor(name.into()));
            }
        }
        let shape_of = |name: &str| -> &Shape {
            &canonical.iter().find(|(n, _)| n == name).expect("canonical").1
        };
        let embed = EmbedWeights {
            tok: fetch(ckpt, TOK_EMBED, shape_of(TOK_EMBED))?,
            pos: fetch(ckpt, POS_EMBED, shape_of(POS_EMBED))?,
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut params: [Vec<f64>; 16] = Default::default();
            for (slot, suffix) in params.iter_mut().zip(BLOCK_TENSORS) {
                let name = block_tensor_name(l, suffix);
                *slot = fetch(ckpt, &name, shape_of(&name))?;
            }
            blocks.push(BlockWeights { params });
        }
        let head = HeadWeights {
            norm_w: fetch(ckpt, FINAL_NORM_WEIGHT, shape_of(FINAL_NORM_WEIGHT))?,
            norm_b: fetch(ckpt, FINAL_NORM_BIAS, shape_of(FINAL_NORM_BIAS))?,
            unembed: fetch(ckpt, UNEMBED, shape_of(UNEMBED))?,
        };
        Ok(Self {
            config,
            embed,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Round every parameter back to `f32`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = &self.config;
        let shapes = cfg.canonical_tensors();
        let mut out = Checkpoint::new();
        let mut put = |name: String, data: &[f64]| {
            let shape = shapes.iter().find(|(n, _)| *n == name).expect("canonical").1.clone();
            let t = Tensor::new(shape, data.iter().map(|&v| v as f32).collect())
                .expect("weights match config");
            out.insert(name, t);
        };
        put(TOK_EMBED.into(), &self.embed.tok);
        put(POS_EMBED.into(), &self.embed.pos);
        for (l, b) in self.blocks.iter().enumerate() {
            for (suffix, p) in BLOCK_TENSORS.iter().zip(&b.params) {
                put(block_tensor_name(l, suffix), p);
            }
        }
        put(FINAL_NORM_WEIGHT.into(), &self.head.norm_w);
        put(FINAL_NORM_BIAS.into(), &self.head.norm_b);
        put(UNEMBED.into(), &self.head.unembed);
        out
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq {
            return Err(ModelError::SequenceLength {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&id) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Hidden states in `f64`, one matrix per block.
    pub fn hidden_matrices(&self, tokens: &[TokenId]) -> Result<Vec<Matrix>, ModelError> {
        self.check_tokens(tokens)?;
        let mut x = embed_tokens(&self.config, &self.embed, tokens);
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = block_forward(&self.config, b, &x);
            out.push(x.clone());
        }
        Ok(out)
    }

    pub fn hidden_states(&self, tokens: &[TokenId]) -> Result<HiddenStates, ModelError> {
        let per_layer = self
            .hidden_matrices(tokens)?
            .iter()
            .map(Matrix::to_tensor)
            .collect();
        Ok(HiddenStates { per_layer })
    }

    pub fn logit_matrix(&self, tokens: &[TokenId]) -> Result<Matrix, ModelError> {
        let hidden = self.hidden_matrices(tokens)?;
        let last = hidden.last().expect("n_layers >= 1");
        Ok(apply_head(&self.config, &self.head, last))
    }

    pub fn logits(&self, tokens: &[TokenId]) -> Result<Tensor, ModelError> {
        Ok(self.logit_matrix(tokens)?.to_tensor())
    }

    /// Append argmax tokens until `stop_id` is emitted or `max_new` tokens
    /// have been produced. Ties go to the lowest token id. The stop token,
    /// when produced, is included in the output.
    pub fn greedy_decode(
        &self,
        prompt: &[TokenId],
        max_new: usize,
        stop_id: TokenId,
    ) -> Result<Vec<TokenId>, ModelError> {
        self.check_tokens(prompt)?;
        if prompt.len() + max_new > self.config.max_seq {
            return Err(ModelError::SequenceLength {
                len: prompt.len() + max_new,
                max: self.config.max_seq,
            });
        }
        let mut seq = prompt.to_vec();
        for _ in 0..max_new {
            let logits = self.logit_matrix(&seq)?;
            let next = argmax(logits.row(logits.rows() - 1));
            seq.push(next);
            if next == stop_id {
                break;
            }
        }
        Ok(seq)
    }
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

pub fn forward_hidden(
    weights: &Checkpoint,
    config: &ModelConfig,
    tokens: &[TokenId],
) -> Result<HiddenStates, ModelError> {
    ToyModel::from_checkpoint(weights, *config)?.hidden_states(tokens)
}

/// Unnormalized next-token scores, one row per position.
pub fn logits(
    weights: &Checkpoint,
    config: &ModelConfig,
    tokens: &[TokenId],
) -> Result<Tensor, ModelError> {
    ToyModel::from_checkpoint(weights, *config)?.logits(tokens)
}

pub fn greedy_decode(
    weights: &Checkpoint,
    config: &ModelConfig,
    prompt: &[TokenId],
    max_new: usize,
    stop_id: TokenId,
) -> Result<Vec<TokenId>, ModelError> {
    ToyModel::from_checkpoint(weights, *config)?.greedy_decode(prompt, max_new, stop_id)
}

/// A conforming checkpoint with every entry uniform in `[-scale, scale)`,
/// except layer-norm gains, which are `1 ±` that.
pub fn random_checkpoint(config: &ModelConfig, seed: u64, scale: f32) -> Checkpoint {
    let mut out = Checkpoint::new();
    for (name, shape) in config.canonical_tensors() {
        let stream = crate::rng::fnv1a(name.as_bytes());
        let gain = if name.ends_with("norm.weight")
            || name.ends_with("ln1.weight")
            || name.ends_with("ln2.weight")
        {
            1.0
        } else {
            0.0
        };
        let t = Tensor::from_fn(shape, |i| {
            let u = crate::rng::counter_unit(seed, stream, i as u64) as f32;
            gain + scale * (2.0 * u - 1.0)
        });
        out.insert(name, t);
    }
    out
}
