use alloc::vec;

use crate::matrix::Matrix;

use super::{BlockWeights, EmbedWeights, HeadWeights, ModelConfig, TokenId};

pub const LN_EPS: f64 = 1e-5;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

/// Row-wise layer norm with biased variance.
pub fn layer_norm(x: &Matrix, weight: &[f64], bias: &[f64]) -> Matrix {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / libm::sqrt(var + LN_EPS);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (row[j] - mean) * inv * weight[j] + bias[j];
        }
    }
    out
}

pub fn embed_tokens(cfg: &ModelConfig, e: &EmbedWeights, tokens: &[TokenId]) -> Matrix {
    let d = cfg.d_model;
    Matrix::from_fn(tokens.len(), d, |p, j| {
        let t = tokens[p] as usize;
        e.tok[t * d + j] + e.pos[p * d + j]
    })
}

fn causal_attention(cfg: &ModelConfig, b: &BlockWeights, x: &Matrix) -> Matrix {
    let p = &b.params;
    let q = x.affine(&p[BlockWeights::Q_W], &p[BlockWeights::Q_B]);
    let k = x.affine(&p[BlockWeights::K_W], &p[BlockWeights::K_B]);
    let v = x.affine(&p[BlockWeights::V_W], &p[BlockWeights::V_B]);
    let seq = x.rows();
    let dh = cfg.d_head();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut ctx = Matrix::zeros(seq, cfg.d_model);
    let mut scores = vec![0.0; seq];
    for h in 0..cfg.n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..seq {
            let qi = &q.row(i)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                let kj = &k.row(j)[cols.clone()];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                *s = dot * scale;
                if *s > max {
                    max = *s;
                }
            }
            let mut denom = 0.0;
            for s in scores.iter_mut().take(i + 1) {
                *s = libm::exp(*s - max);
                denom += *s;
            }
            let out = &mut ctx.row_mut(i)[cols.clone()];
            for (j, &w) in scores.iter().enumerate().take(i + 1) {
                let vj = &v.row(j)[cols.clone()];
                for (o, &vv) in out.iter_mut().zip(vj) {
                    *o += w / denom * vv;
                }
            }
        }
    }
    ctx.affine(&p[BlockWeights::O_W], &p[BlockWeights::O_B])
}

fn mlp(b: &BlockWeights, x: &Matrix) -> Matrix {
    let p = &b.params;
    let mut h = x.affine(&p[BlockWeights::FC1_W], &p[BlockWeights::FC1_B]);
    for v in h.data_mut() {
        *v = gelu(*v);
    }
    h.affine(&p[BlockWeights::FC2_W], &p[BlockWeights::FC2_B])
}

/// One pre-norm block applied to the residual stream `x`.
pub fn block_forward(cfg: &ModelConfig, b: &BlockWeights, x: &Matrix) -> Matrix {
    let p = &b.params;
    let normed = layer_norm(x, &p[BlockWeights::LN1_W], &p[BlockWeights::LN1_B]);
    let mut h = causal_attention(cfg, b, &normed);
    h.add_assign(x);
    let normed = layer_norm(&h, &p[BlockWeights::LN2_W], &p[BlockWeights::LN2_B]);
    let mut z = mlp(b, &normed);
    z.add_assign(&h);
    z
}

/// Final norm and unembedding.
pub fn apply_head(cfg: &ModelConfig, head: &HeadWeights, x: &Matrix) -> Matrix {
    let normed = layer_norm(x, &head.norm_w, &head.norm_b);
    let zero_bias = vec![0.0; cfg.vocab_size];
    normed.affine(&head.unembed, &zero_bias)
}
