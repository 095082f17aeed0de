//! Data-free merging baselines: averaging, task arithmetic, TIES and DARE.
//!
//! All methods work tensor by tensor in `f64` and round once to `f32`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_TIES_DENSITY: f64 = 0.2;
pub const DEFAULT_DROP_RATE: f64 = 0.5;
pub const DEFAULT_SCALE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MergeError {
    #[error(transparent)]
    Incompatible(#[from] CheckpointError),
    #[error("density {0} outside (0, 1]")]
    InvalidDensity(f64),
    #[error("drop rate {0} outside [0, 1)")]
    InvalidDropRate(f64),
    #[error("{what} needs at least {needed} input checkpoints, got {got}")]
    TooFewInputs {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("{scales} scales given for {models} tuned models")]
    ScaleCount { scales: usize, models: usize },
    #[error("non-finite parameter {0}")]
    NonFinite(f64),
}

/// Per-tensor difference `tuned - base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub deltas: BTreeMap<String, Tensor>,
}

impl TaskVector {
    pub fn between(base: &Checkpoint, tuned: &Checkpoint) -> Result<Self, MergeError> {
        let diff = base.zip_map(tuned, |_, b, t| Ok(t.zip_with(b, |x, y| x - y)?))?;
        Ok(Self {
            deltas: diff.tensors,
        })
    }

    /// `base + scale * self`.
    pub fn apply_to(&self, base: &Checkpoint, scale: f64) -> Result<Checkpoint, MergeError> {
        let as_ckpt: Checkpoint = self.deltas.clone().into_iter().collect();
        Ok(base.zip_map(&as_ckpt, |_, b, d| {
            Ok(b.zip_with(d, |x, y| (f64::from(x) + scale * f64::from(y)) as f32)?)
        })?)
    }
}

fn check_all_compatible(base: &Checkpoint, others: &[&Checkpoint]) -> Result<(), MergeError> {
    for o in others {
        base.check_compatible(o)?;
    }
    Ok(())
}

fn check_scale(s: f64) -> Result<(), MergeError> {
    if s.is_finite() {
        Ok(())
    } else {
        Err(MergeError::NonFinite(s))
    }
}

/// Build a checkpoint shaped like `base` whose entry `i` of tensor `name`
/// is `f(name, i, base value, tuned values)`.
fn per_entry(
    base: &Checkpoint,
    tuned: &[&Checkpoint],
    mut f: impl FnMut(&str, usize, f64, &[f64]) -> f64,
) -> Checkpoint {
    let mut out = Checkpoint::new();
    let mut vals = vec![0.0; tuned.len()];
    for (name, b) in base.iter() {
        let ts: Vec<&Tensor> = tuned.iter().map(|c| &c.tensors[name]).collect();
        let t = Tensor::from_fn(b.shape().clone(), |i| {
            for (v, t) in vals.iter_mut().zip(&ts) {
                *v = f64::from(t.data()[i]);
            }
            f(name, i, f64::from(b.data()[i]), &vals) as f32
        });
        out.insert(name.clone(), t);
    }
    out
}

/// Per-tensor arithmetic mean of two or more checkpoints.
///
/// Values are summed in sorted order so the result does not depend on the
/// order of the inputs.
pub fn average_merge(checkpoints: &[&Checkpoint]) -> Result<Checkpoint, MergeError> {
    if checkpoints.len() < 2 {
        return Err(MergeError::TooFewInputs {
            what: "average merge",
            needed: 2,
            got: checkpoints.len(),
        });
    }
    let (first, rest) = checkpoints.split_first().expect("len >= 2");
    check_all_compatible(first, rest)?;
    let n = checkpoints.len() as f64;
    let mut sorted = vec![0.0; checkpoints.len()];
    Ok(per_entry(first, checkpoints, |_, _, _, vals| {
        sorted.copy_from_slice(vals);
        sorted.sort_by(f64::total_cmp);
        sorted.iter().sum::<f64>() / n
    }))
}

/// `base + Σ_i scales[i] * (tuned[i] - base)`.
pub fn task_arithmetic_merge_weighted(
    base: &Checkpoint,
    tuned: &[&Checkpoint],
    scales: &[f64],
) -> Result<Checkpoint, MergeError> {
    dare_linear_merge(base, tuned, 0.0, scales, 0)
}

/// `base + scale * Σ_i (tuned[i] - base)`, accumulated as
/// `base + Σ_i scale * (tuned[i] - base)`.
pub fn task_arithmetic_merge(
    base: &Checkpoint,
    tuned: &[&Checkpoint],
    scale: f64,
) -> Result<Checkpoint, MergeError> {
    let scales = vec![scale; tuned.len()];
    task_arithmetic_merge_weighted(base, tuned, &scales)
}

/// Number of entries kept when trimming `n` entries to `density`:
/// `ceil(density * n)`, with products within 1e-9 of an integer treated as
/// that integer.
pub fn trim_count(density: f64, n: usize) -> usize {
    let x = density * n as f64;
    let r = libm::round(x);
    let k = if libm::fabs(x - r) < 1e-9 { r } else { libm::ceil(x) };
    (k as usize).min(n)
}

/// Zero all but the `k` largest-magnitude entries (ties keep the lower
/// index).
fn trim_top_k(values: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        libm::fabs(values[b])
            .total_cmp(&libm::fabs(values[a]))
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; values.len()];
    for &i in order.iter().take(k) {
        out[i] = values[i];
    }
    out
}

/// TIES merging: trim each task vector to its top `density` fraction per
/// tensor, elect a per-entry sign from the summed trimmed deltas, and add
/// `scale` times the mean of the surviving sign-agreeing deltas to `base`.
/// Entries with no survivor (or an elected sum of exactly zero) keep the
/// base value.
pub fn ties_merge(
    base: &Checkpoint,
    tuned: &[&Checkpoint],
    density: f64,
    scale: f64,
) -> Result<Checkpoint, MergeError> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(MergeError::InvalidDensity(density));
    }
    check_scale(scale)?;
    if tuned.is_empty() {
        return Err(MergeError::TooFewInputs {
            what: "TIES merge",
            needed: 1,
            got: 0,
        });
    }
    check_all_compatible(base, tuned)?;

    let mut out = Checkpoint::new();
    for (name, b) in base.iter() {
        let n = b.numel();
        let k = trim_count(density, n);
        let trimmed: Vec<Vec<f64>> = tuned
            .iter()
            .map(|c| {
                let t = &c.tensors[name];
                let delta: Vec<f64> = t
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f64::from(x) - f64::from(y))
                    .collect();
                trim_top_k(&delta, k)
            })
            .collect();
        let merged = Tensor::from_fn(b.shape().clone(), |i| {
            let base_v = f64::from(b.data()[i]);
            let elected: f64 = trimmed.iter().map(|d| d[i]).sum();
            if elected == 0.0 {
                return base_v as f32;
            }
            let (mut sum, mut count) = (0.0, 0u32);
            for d in &trimmed {
                let v = d[i];
                if v != 0.0 && (v > 0.0) == (elected > 0.0) {
                    sum += v;
                    count += 1;
                }
            }
            if count == 0 {
                base_v as f32
            } else {
                (base_v + scale * (sum / f64::from(count))) as f32
            }
        });
        out.insert(name.clone(), merged);
    }
    Ok(out)
}

fn check_drop_rate(p: f64) -> Result<(), MergeError> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(MergeError::InvalidDropRate(p))
    }
}

/// Whether entry `index` of tensor `name` survives a DARE drop at `drop_rate`.
pub fn dare_keep(seed: u64, name: &str, index: usize, drop_rate: f64) -> bool {
    rng::counter_unit(seed, rng::fnv1a(name.as_bytes()), index as u64) >= drop_rate
}

/// Drop each delta entry with probability `drop_rate` and rescale survivors
/// by `1 / (1 - drop_rate)`.
pub fn dare_transform(
    delta: &TaskVector,
    drop_rate: f64,
    seed: u64,
) -> Result<TaskVector, MergeError> {
    check_drop_rate(drop_rate)?;
    let rescale = 1.0 / (1.0 - drop_rate);
    let deltas = delta
        .deltas
        .iter()
        .map(|(name, t)| {
            let data = t.data();
            let out = Tensor::from_fn(t.shape().clone(), |i| {
                if dare_keep(seed, name, i, drop_rate) {
                    (f64::from(data[i]) * rescale) as f32
                } else {
                    0.0
                }
            });
            (name.clone(), out)
        })
        .collect();
    Ok(TaskVector { deltas })
}

/// `base + Σ_i scales[i] * dare(tuned[i] - base)`.
///
/// Model `i` draws its mask from `derive_seed(seed, i)`. With `drop_rate = 0`
/// this is exactly [`task_arithmetic_merge_weighted`].
pub fn dare_linear_merge(
    base: &Checkpoint,
    tuned: &[&Checkpoint],
    drop_rate: f64,
    scales: &[f64],
    seed: u64,
) -> Result<Checkpoint, MergeError> {
    check_drop_rate(drop_rate)?;
    if scales.len() != tuned.len() {
        return Err(MergeError::ScaleCount {
            scales: scales.len(),
            models: tuned.len(),
        });
    }
    for &s in scales {
        check_scale(s)?;
    }
    check_all_compatible(base, tuned)?;
    let seeds: Vec<u64> = (0..tuned.len())
        .map(|i| rng::derive_seed(seed, i as u64))
        .collect();
    let rescale = 1.0 / (1.0 - drop_rate);
    Ok(per_entry(base, tuned, |name, i, b, vals| {
        let mut acc = b;
        for (m, &t) in vals.iter().enumerate() {
            let delta = t - b;
            if drop_rate == 0.0 {
                acc += scales[m] * delta;
            } else if dare_keep(seeds[m], name, i, drop_rate) {
                acc += scales[m] * (delta * rescale);
            }
        }
        acc
    }))
}
