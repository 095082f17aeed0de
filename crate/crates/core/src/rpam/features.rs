//! Per-layer feature losses: squared-distance alignment to the positive
//! model and a two-way contrastive term against the negative model.

use alloc::vec::Vec;

use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("feature shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("cannot pool an empty sequence")]
    EmptySequence,
    #[error("pooled {0} feature has zero norm")]
    ZeroNorm(&'static str),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
}

/// Merged, positive-model and negative-model features of one layer for one
/// input, each `seq_len × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFeatureTriple {
    pub merged: Matrix,
    pub positive: Matrix,
    pub negative: Matrix,
}

impl LayerFeatureTriple {
    pub fn new(merged: Matrix, positive: Matrix, negative: Matrix) -> Result<Self, FeatureError> {
        same_shape(&merged, &positive)?;
        same_shape(&merged, &negative)?;
        Ok(Self {
            merged,
            positive,
            negative,
        })
    }
}

fn same_shape(a: &Matrix, b: &Matrix) -> Result<(), FeatureError> {
    if a.shape() != b.shape() {
        return Err(FeatureError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean over sequence positions.
pub fn pooled(z: &Matrix) -> Result<Vec<f64>, FeatureError> {
    if z.rows() == 0 {
        return Err(FeatureError::EmptySequence);
    }
    let mut acc = alloc::vec![0.0; z.cols()];
    for i in 0..z.rows() {
        for (a, v) in acc.iter_mut().zip(z.row(i)) {
            *a += v;
        }
    }
    let n = z.rows() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}

/// Mean over positions of the per-position squared Euclidean distance.
pub fn alignment_loss(merged: &Matrix, positive: &Matrix) -> Result<f64, FeatureError> {
    same_shape(merged, positive)?;
    if merged.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = merged
        .data()
        .iter()
        .zip(positive.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / merged.rows() as f64)
}

fn unit(v: Vec<f64>, which: &'static str) -> Result<Vec<f64>, FeatureError> {
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm.is_nan() || norm <= 0.0 {
        return Err(FeatureError::ZeroNorm(which));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

/// Binary contrastive loss on mean-pooled, L2-normalized features:
/// `-log(e^{m·p/τ} / (e^{m·p/τ} + e^{m·n/τ}))`. Non-finite features give NaN.
pub fn contrastive_loss(
    merged: &Matrix,
    positive: &Matrix,
    negative: &Matrix,
    tau: f64,
) -> Result<f64, FeatureError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(FeatureError::InvalidTemperature(tau));
    }
    same_shape(merged, positive)?;
    same_shape(merged, negative)?;
    let (m, p, n) = (pooled(merged)?, pooled(positive)?, pooled(negative)?);
    // Overflowed features are a divergence, not a degenerate input.
    if [&m, &p, &n].iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Ok(f64::NAN);
    }
    let m = unit(m, "merged")?;
    let p = unit(p, "positive")?;
    let n = unit(n, "negative")?;
    let pos_logit = dot(&m, &p) / tau;
    let neg_logit = dot(&m, &n) / tau;
    Ok(softplus(neg_logit - pos_logit))
}

/// Alignment plus `omega` times the contrastive term. With `omega == 0` the
/// contrastive term is not evaluated and the result is the alignment loss.
pub fn layer_loss(triple: &LayerFeatureTriple, tau: f64, omega: f64) -> Result<f64, FeatureError> {
    let align = alignment_loss(&triple.merged, &triple.positive)?;
    if omega == 0.0 {
        return Ok(align);
    }
    let cl = contrastive_loss(&triple.merged, &triple.positive, &triple.negative, tau)?;
    Ok(align + omega * cl)
}
