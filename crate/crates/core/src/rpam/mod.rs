//! Progressive layer-wise calibration of merging coefficients.
//!
//! Layer `l` of the merged model uses parameters
//! `λ_long · θ_long^(l) + λ_short · θ_short^(l)`. Layers are calibrated one
//! at a time from the input side: the merged stream's input to layer `l` is
//! produced by the already-frozen layers `0..l`, while the long and short
//! streams carry each base model's own hidden states. For each calibration
//! example the pattern label decides which stream is positive. The pair for
//! layer `l` is found by gradient descent on the batch-mean of
//! [`layer_loss`], with gradients from central finite differences.

mod features;
pub mod linear;
mod transformer;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::labeling::ModelTag;
use crate::matrix::Matrix;
use crate::model::ModelError;

pub use features::{
    alignment_loss, contrastive_loss, layer_loss, pooled, FeatureError, LayerFeatureTriple,
};
pub use transformer::{
    assemble_merged, calibration_examples, merged_layer_params, rpam_merge, RpamOutput,
    TransformerPair,
};

/// Coefficients `(λ_long, λ_short)` for one layer. Unconstrained reals.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CoefPair {
    pub lambda_long: f64,
    pub lambda_short: f64,
}

impl CoefPair {
    pub const LONG: CoefPair = CoefPair::new(1.0, 0.0);
    pub const SHORT: CoefPair = CoefPair::new(0.0, 1.0);
    pub const HALF: CoefPair = CoefPair::new(0.5, 0.5);

    pub const fn new(lambda_long: f64, lambda_short: f64) -> Self {
        Self {
            lambda_long,
            lambda_short,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.lambda_long.is_finite() && self.lambda_short.is_finite()
    }

    pub fn distance(&self, other: &CoefPair) -> f64 {
        let a = self.lambda_long - other.lambda_long;
        let b = self.lambda_short - other.lambda_short;
        libm::sqrt(a * a + b * b)
    }

    /// Largest per-coordinate difference.
    pub fn max_abs_diff(&self, other: &CoefPair) -> f64 {
        libm::fabs(self.lambda_long - other.lambda_long)
            .max(libm::fabs(self.lambda_short - other.lambda_short))
    }
}

/// One pair per layer. The embeddings share the first layer's pair and the
/// final norm and unembedding share the last layer's.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MergeCoefficients {
    pub per_layer: Vec<CoefPair>,
}

impl MergeCoefficients {
    pub fn uniform(n_layers: usize, pair: CoefPair) -> Self {
        Self {
            per_layer: vec![pair; n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn embedding_pair(&self) -> CoefPair {
        self.per_layer[0]
    }

    pub fn head_pair(&self) -> CoefPair {
        self.per_layer[self.per_layer.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Pooling {
    #[default]
    Mean,
}

/// Learning rates × epoch counts swept per layer; the setting with the
/// lowest final loss wins, earlier entries winning ties.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub epochs: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            learning_rates: vec![0.1, 0.01, 0.001],
            epochs: vec![50, 100],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CalibrationConfig {
    pub tau: f64,
    pub omega: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub init_lambda: CoefPair,
    pub pooling: Pooling,
    pub fd_step: f64,
    pub seed: u64,
    /// When set, overrides `learning_rate` / `epochs` with a per-layer sweep.
    pub grid: Option<GridSpec>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            omega: 1000.0,
            learning_rate: 0.01,
            epochs: 50,
            init_lambda: CoefPair::HALF,
            pooling: Pooling::Mean,
            fd_step: 1e-3,
            seed: 0,
            grid: None,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), RpamError> {
        let bad = |msg: String| Err(RpamError::InvalidConfig(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return bad(format!("omega must be non-negative, got {}", self.omega));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.fd_step > 0.0 && self.fd_step.is_finite()) {
            return bad(format!("fd_step must be positive, got {}", self.fd_step));
        }
        if !self.init_lambda.is_finite() {
            return bad("init_lambda must be finite".into());
        }
        if let Some(g) = &self.grid {
            if g.learning_rates.is_empty() || g.epochs.is_empty() {
                return bad("grid needs at least one learning rate and epoch count".into());
            }
            if g.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
                return bad("grid learning rates must be positive".into());
            }
            if g.epochs.contains(&0) {
                return bad("grid epoch counts must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RpamError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
    #[error("no prompt for calibration query `{0}`")]
    MissingPrompt(String),
    #[error("calibration batch is empty")]
    EmptyBatch,
    #[error("example `{0}` has identical positive and negative models")]
    SameModels(String),
    #[error("layer {layer} out of range for {n_layers} layers")]
    InvalidLayer { layer: usize, n_layers: usize },
    #[error("carried inputs missing for layer {0}")]
    MissingCarried(usize),
    #[error("layer {layer}: non-finite loss at {pair:?} in epoch {epoch}")]
    Diverged {
        layer: usize,
        epoch: usize,
        pair: CoefPair,
        last_finite: CoefPair,
        trace: Vec<f64>,
    },
}

/// A two-model network whose layers can be evaluated one at a time under
/// endpoint or interpolated parameters.
pub trait LayerwisePair {
    /// Raw model input (e.g. a token sequence).
    type Input;
    /// Parameters of one layer.
    type Params;

    fn n_layers(&self) -> usize;

    fn endpoint_params(&self, model: ModelTag, layer: usize) -> &Self::Params;

    fn merged_params(&self, layer: usize, pair: CoefPair) -> Result<Self::Params, RpamError>;

    /// The layer map `φ^(l)`. Layer 0 reads the raw input and gets
    /// `carried = None`; later layers get the previous layer's output.
    fn apply(
        &self,
        layer: usize,
        params: &Self::Params,
        input: &Self::Input,
        carried: Option<&Matrix>,
    ) -> Result<Matrix, RpamError>;
}

/// One element of the pattern-labeled calibration set.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationExample<I> {
    pub query_id: String,
    pub input: I,
    pub positive: ModelTag,
    pub negative: ModelTag,
}

impl<I> CalibrationExample<I> {
    pub fn new(query_id: impl Into<String>, input: I, positive: ModelTag) -> Self {
        Self {
            query_id: query_id.into(),
            input,
            positive,
            negative: positive.other(),
        }
    }
}

/// Layer inputs `z^(l-1)` of the three streams for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Carried {
    pub merged: Matrix,
    pub long: Matrix,
    pub short: Matrix,
}

impl Carried {
    pub fn stream(&self, tag: ModelTag) -> &Matrix {
        match tag {
            ModelTag::Long => &self.long,
            ModelTag::Short => &self.short,
        }
    }
}

fn check_layer<P: LayerwisePair>(model: &P, layer: usize) -> Result<(), RpamError> {
    if layer >= model.n_layers() {
        return Err(RpamError::InvalidLayer {
            layer,
            n_layers: model.n_layers(),
        });
    }
    Ok(())
}

fn check_examples<I>(examples: &[CalibrationExample<I>]) -> Result<(), RpamError> {
    if examples.is_empty() {
        return Err(RpamError::EmptyBatch);
    }
    if let Some(e) = examples.iter().find(|e| e.positive == e.negative) {
        return Err(RpamError::SameModels(e.query_id.clone()));
    }
    Ok(())
}

/// Features of layer `layer` for the merged stream (under `pair`) and the
/// example's positive and negative streams.
pub fn layer_feature_triple<P: LayerwisePair>(
    model: &P,
    example: &CalibrationExample<P::Input>,
    layer: usize,
    carried: Option<&Carried>,
    pair: CoefPair,
) -> Result<LayerFeatureTriple, RpamError> {
    check_layer(model, layer)?;
    if layer > 0 && carried.is_none() {
        return Err(RpamError::MissingCarried(layer));
    }
    let merged_params = model.merged_params(layer, pair)?;
    let run = |params: &P::Params, c: Option<&Matrix>| model.apply(layer, params, &example.input, c);
    let merged = run(&merged_params, carried.map(|c| &c.merged))?;
    let positive = run(
        model.endpoint_params(example.positive, layer),
        carried.map(|c| c.stream(example.positive)),
    )?;
    let negative = run(
        model.endpoint_params(example.negative, layer),
        carried.map(|c| c.stream(example.negative)),
    )?;
    Ok(LayerFeatureTriple::new(merged, positive, negative)?)
}

/// Everything about one layer's objective that does not depend on the pair
/// being optimized: carried merged inputs and both endpoint features.
pub struct LayerObjective<'a, P: LayerwisePair> {
    model: &'a P,
    examples: &'a [CalibrationExample<P::Input>],
    layer: usize,
    merged_inputs: Option<Vec<Matrix>>,
    long: Vec<Matrix>,
    short: Vec<Matrix>,
    tau: f64,
    omega: f64,
}

impl<'a, P: LayerwisePair> LayerObjective<'a, P> {
    /// `carried` holds one entry per example and must be present for every
    /// layer after the first.
    pub fn new(
        model: &'a P,
        examples: &'a [CalibrationExample<P::Input>],
        layer: usize,
        carried: Option<&[Carried]>,
        tau: f64,
        omega: f64,
    ) -> Result<Self, RpamError> {
        check_layer(model, layer)?;
        check_examples(examples)?;
        if layer > 0 && carried.is_none() {
            return Err(RpamError::MissingCarried(layer));
        }
        if let Some(c) = carried {
            if c.len() != examples.len() {
                return Err(RpamError::MissingCarried(layer));
            }
        }
        let mut long = Vec::with_capacity(examples.len());
        let mut short = Vec::with_capacity(examples.len());
        for (i, e) in examples.iter().enumerate() {
            let c = carried.map(|c| &c[i]);
            long.push(model.apply(
                layer,
                model.endpoint_params(ModelTag::Long, layer),
                &e.input,
                c.map(|c| &c.long),
            )?);
            short.push(model.apply(
                layer,
                model.endpoint_params(ModelTag::Short, layer),
                &e.input,
                c.map(|c| &c.short),
            )?);
        }
        let merged_inputs = carried.map(|c| c.iter().map(|c| c.merged.clone()).collect());
        Ok(Self {
            model,
            examples,
            layer,
            merged_inputs,
            long,
            short,
            tau,
            omega,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    fn endpoint(&self, tag: ModelTag, i: usize) -> &Matrix {
        match tag {
            ModelTag::Long => &self.long[i],
            ModelTag::Short => &self.short[i],
        }
    }

    /// Merged-stream outputs of this layer under `pair`, one per example.
    pub fn merged_outputs(&self, pair: CoefPair) -> Result<Vec<Matrix>, RpamError> {
        let params = self.model.merged_params(self.layer, pair)?;
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let c = self.merged_inputs.as_ref().map(|m| &m[i]);
                self.model.apply(self.layer, &params, &e.input, c)
            })
            .collect()
    }

    /// Batch-mean layer loss, accumulated in example order.
    pub fn loss(&self, pair: CoefPair) -> Result<f64, RpamError> {
        let outputs = self.merged_outputs(pair)?;
        let mut total = 0.0;
        for (i, (e, z)) in self.examples.iter().zip(&outputs).enumerate() {
            let pos = self.endpoint(e.positive, i);
            total += if self.omega == 0.0 {
                alignment_loss(z, pos)?
            } else {
                let neg = self.endpoint(e.negative, i);
                alignment_loss(z, pos)? + self.omega * contrastive_loss(z, pos, neg, self.tau)?
            };
        }
        Ok(total / self.examples.len() as f64)
    }

    /// Central finite-difference gradient `(∂/∂λ_long, ∂/∂λ_short)`.
    pub fn gradient(&self, pair: CoefPair, h: f64) -> Result<(f64, f64), RpamError> {
        let probe = |dl: f64, ds: f64| -> Result<f64, RpamError> {
            let p = CoefPair::new(pair.lambda_long + dl, pair.lambda_short + ds);
            let v = self.loss(p)?;
            if !v.is_finite() {
                return Err(RpamError::Diverged {
                    layer: self.layer,
                    epoch: 0,
                    pair: p,
                    last_finite: pair,
                    trace: Vec::new(),
                });
            }
            Ok(v)
        };
        let gl = (probe(h, 0.0)? - probe(-h, 0.0)?) / (2.0 * h);
        let gs = (probe(0.0, h)? - probe(0.0, -h)?) / (2.0 * h);
        Ok((gl, gs))
    }
}

/// Finite-difference gradient of the batch-mean layer loss at `pair`,
/// holding the carried inputs fixed.
pub fn layer_gradient<P: LayerwisePair>(
    model: &P,
    examples: &[CalibrationExample<P::Input>],
    layer: usize,
    carried: Option<&[Carried]>,
    pair: CoefPair,
    config: &CalibrationConfig,
) -> Result<(f64, f64), RpamError> {
    config.validate()?;
    LayerObjective::new(model, examples, layer, carried, config.tau, config.omega)?
        .gradient(pair, config.fd_step)
}

/// Result of one gradient-descent run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DescentRun {
    pub learning_rate: f64,
    pub epochs: usize,
    pub final_pair: CoefPair,
    /// Loss before the first step and after every step (`epochs + 1` values).
    pub loss_trace: Vec<f64>,
}

impl DescentRun {
    pub fn initial_loss(&self) -> f64 {
        self.loss_trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace has the initial loss")
    }
}

/// Plain gradient descent from `init`, returning snapshots after each
/// epoch count in `checkpoints` (ascending).
fn descend<P: LayerwisePair>(
    objective: &LayerObjective<'_, P>,
    init: CoefPair,
    learning_rate: f64,
    checkpoints: &[usize],
    fd_step: f64,
) -> Result<Vec<DescentRun>, RpamError> {
    let max_epochs = checkpoints.iter().copied().max().unwrap_or(0);
    let mut pair = init;
    let mut trace = Vec::with_capacity(max_epochs + 1);
    let diverged = |epoch: usize, at: CoefPair, last: CoefPair, trace: &[f64]| RpamError::Diverged {
        layer: objective.layer(),
        epoch,
        pair: at,
        last_finite: last,
        trace: trace.to_vec(),
    };
    let first = objective.loss(pair)?;
    if !first.is_finite() {
        return Err(diverged(0, pair, pair, &trace));
    }
    trace.push(first);
    let mut runs = Vec::new();
    for epoch in 1..=max_epochs {
        let (gl, gs) = match objective.gradient(pair, fd_step) {
            Ok(g) => g,
            Err(RpamError::Diverged { pair: at, .. }) => {
                return Err(diverged(epoch, at, pair, &trace))
            }
            Err(e) => return Err(e),
        };
        let next = CoefPair::new(
            pair.lambda_long - learning_rate * gl,
            pair.lambda_short - learning_rate * gs,
        );
        let loss = if next.is_finite() {
            objective.loss(next)?
        } else {
            f64::NAN
        };
        if !loss.is_finite() {
            return Err(diverged(epoch, next, pair, &trace));
        }
        pair = next;
        trace.push(loss);
        if checkpoints.contains(&epoch) {
            runs.push(DescentRun {
                learning_rate,
                epochs: epoch,
                final_pair: pair,
                loss_trace: trace.clone(),
            });
        }
    }
    Ok(runs)
}

/// Outcome of calibrating one layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerCalibration {
    pub layer: usize,
    pub initial_pair: CoefPair,
    pub chosen: DescentRun,
    /// Final loss of every grid setting, `None` where descent diverged.
    pub grid: Vec<GridOutcome>,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridOutcome {
    pub learning_rate: f64,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

impl LayerCalibration {
    pub fn final_pair(&self) -> CoefPair {
        self.chosen.final_pair
    }
}

/// Minimize one layer's objective from `init`.
///
/// Without a grid this is a single descent run; a non-finite loss aborts
/// with [`RpamError::Diverged`] carrying the last finite pair. With a grid,
/// diverging settings are skipped and the run with the lowest final loss is
/// kept; the error is returned only if every setting diverges.
pub fn optimize_layer<P: LayerwisePair>(
    objective: &LayerObjective<'_, P>,
    init: CoefPair,
    config: &CalibrationConfig,
) -> Result<LayerCalibration, RpamError> {
    config.validate()?;
    let (chosen, grid) = match &config.grid {
        None => {
            let run = descend(objective, init, config.learning_rate, &[config.epochs], config.fd_step)?
                .pop()
                .expect("one snapshot");
            (run, Vec::new())
        }
        Some(spec) => {
            let mut epochs = spec.epochs.clone();
            epochs.sort_unstable();
            epochs.dedup();
            let mut outcomes = Vec::new();
            let mut best: Option<DescentRun> = None;
            let mut last_err = None;
            for &lr in &spec.learning_rates {
                match descend(objective, init, lr, &epochs, config.fd_step) {
                    Ok(runs) => {
                        for &ep in &spec.epochs {
                            let run = runs.iter().find(|r| r.epochs == ep).expect("snapshot");
                            outcomes.push(GridOutcome {
                                learning_rate: lr,
                                epochs: ep,
                                final_loss: Some(run.final_loss()),
                            });
                            if best.as_ref().is_none_or(|b| run.final_loss() < b.final_loss()) {
                                best = Some(run.clone());
                            }
                        }
                    }
                    Err(e @ RpamError::Diverged { .. }) => {
                        for &ep in &spec.epochs {
                            outcomes.push(GridOutcome {
                                learning_rate: lr,
                                epochs: ep,
                                final_loss: None,
                            });
                        }
                        last_err = Some(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            match best {
                Some(b) => (b, outcomes),
                None => return Err(last_err.expect("grid is non-empty")),
            }
        }
    };
    let warning = (chosen.final_loss() > chosen.initial_loss()).then(|| {
        format!(
            "layer {}: loss increased from {} to {}",
            objective.layer(),
            chosen.initial_loss(),
            chosen.final_loss()
        )
    });
    Ok(LayerCalibration {
        layer: objective.layer(),
        initial_pair: init,
        chosen,
        grid,
        warning,
    })
}

/// Calibrate every layer in order, freezing each before moving on.
pub fn calibrate<P: LayerwisePair>(
    model: &P,
    examples: &[CalibrationExample<P::Input>],
    config: &CalibrationConfig,
) -> Result<(MergeCoefficients, Vec<LayerCalibration>), RpamError> {
    config.validate()?;
    check_examples(examples)?;
    let mut carried: Option<Vec<Carried>> = None;
    let mut pairs = Vec::with_capacity(model.n_layers());
    let mut reports = Vec::with_capacity(model.n_layers());
    for layer in 0..model.n_layers() {
        let objective = LayerObjective::new(
            model,
            examples,
            layer,
            carried.as_deref(),
            config.tau,
            config.omega,
        )?;
        let report = optimize_layer(&objective, config.init_lambda, config)?;
        let pair = report.final_pair();
        let merged = objective.merged_outputs(pair)?;
        let LayerObjective { long, short, .. } = objective;
        carried = Some(
            merged
                .into_iter()
                .zip(long)
                .zip(short)
                .map(|((merged, long), short)| Carried {
                    merged,
                    long,
                    short,
                })
                .collect(),
        );
        pairs.push(pair);
        reports.push(report);
    }
    Ok((MergeCoefficients { per_layer: pairs }, reports))
}

/// Exhaustive search over a square grid of pairs; returns the first pair
/// attaining the minimum loss.
pub fn grid_search<P: LayerwisePair>(
    objective: &LayerObjective<'_, P>,
    lo: f64,
    hi: f64,
    step: f64,
) -> Result<(CoefPair, f64), RpamError> {
    let n = libm::round((hi - lo) / step) as usize;
    let mut best = (CoefPair::new(lo, lo), f64::INFINITY);
    for i in 0..=n {
        for j in 0..=n {
            let pair = CoefPair::new(lo + i as f64 * step, lo + j as f64 * step);
            let loss = objective.loss(pair)?;
            if loss < best.1 {
                best = (pair, loss);
            }
        }
    }
    Ok(best)
}
