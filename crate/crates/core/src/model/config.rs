use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Shape;

use super::ModelError;

/// Hyper-parameters of the decoder-only toy transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

/// Per-block tensor suffixes, in the order [`super::BlockWeights`] stores them.
pub const BLOCK_TENSORS: [&str; 16] = [
    "ln1.weight",
    "ln1.bias",
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.o.weight",
    "attn.o.bias",
    "ln2.weight",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

pub const TOK_EMBED: &str = "tok_embed.weight";
pub const POS_EMBED: &str = "pos_embed.weight";
pub const FINAL_NORM_WEIGHT: &str = "final_norm.weight";
pub const FINAL_NORM_BIAS: &str = "final_norm.bias";
pub const UNEMBED: &str = "unembed.weight";

/// Name of a block tensor: `blocks.{layer}.{suffix}` (layer is 0-based).
pub fn block_tensor_name(layer: usize, suffix: &str) -> String {
    format!("blocks.{layer}.{suffix}")
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn block_shape(&self, suffix: &str) -> Shape {
        let d = self.d_model;
        let f = self.d_ff;
        match suffix {
            "attn.q.weight" | "attn.k.weight" | "attn.v.weight" | "attn.o.weight" => {
                Shape(vec![d, d])
            }
            "mlp.fc1.weight" => Shape(vec![d, f]),
            "mlp.fc1.bias" => Shape(vec![f]),
            "mlp.fc2.weight" => Shape(vec![f, d]),
            _ => Shape(vec![d]),
        }
    }

    /// Every tensor a conforming checkpoint must contain, in layer order.
    pub fn canonical_tensors(&self) -> Vec<(String, Shape)> {
        let d = self.d_model;
        let mut out = vec![
            (String::from(TOK_EMBED), Shape(vec![self.vocab_size, d])),
            (String::from(POS_EMBED), Shape(vec![self.max_seq, d])),
        ];
        for l in 0..self.n_layers {
            for suffix in BLOCK_TENSORS {
                out.push((block_tensor_name(l, suffix), self.block_shape(suffix)));
            }
        }
        out.push((String::from(FINAL_NORM_WEIGHT), Shape(vec![d])));
        out.push((String::from(FINAL_NORM_BIAS), Shape(vec![d])));
        out.push((String::from(UNEMBED), Shape(vec![d, self.vocab_size])));
        out
    }

    /// Which layer's merging coefficients govern a tensor.
    ///
    /// Embeddings belong to the first layer, the final norm and unembedding
    /// to the last one.
    pub fn layer_group(&self, name: &str) -> Option<usize> {
        match name {
            TOK_EMBED | POS_EMBED => Some(0),
            FINAL_NORM_WEIGHT | FINAL_NORM_BIAS | UNEMBED => Some(self.n_layers - 1),
            _ => {
                let rest = name.strip_prefix("blocks.")?;
                let (idx, suffix) = rest.split_once('.')?;
                let l: usize = idx.parse().ok()?;
                (l < self.n_layers && BLOCK_TENSORS.contains(&suffix)).then_some(l)
            }
        }
    }
}
