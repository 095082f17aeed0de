//! RPAM for pairs of toy transformers.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::checkpoint::Checkpoint;
use crate::labeling::{ModelTag, PLDataset};
use crate::matrix::Matrix;
use crate::model::{
    block_forward, embed_tokens, BlockWeights, EmbedWeights, ModelConfig, ModelError, TokenId,
    ToyModel,
};
use crate::tensor::lerp_tensor;

use super::{
    calibrate, CalibrationConfig, CalibrationExample, CoefPair, LayerCalibration, LayerwisePair,
    MergeCoefficients, RpamError,
};

/// Parameters that shape `z^(l)`: block `l`, plus the embeddings for the
/// first block. The head only affects logits and is never calibrated on
/// directly; it follows the last block's pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub embed: Option<EmbedWeights>,
    pub block: BlockWeights,
}

pub struct TransformerPair {
    config: ModelConfig,
    long: Vec<TransformerLayer>,
    short: Vec<TransformerLayer>,
}

fn split_layers(m: ToyModel) -> Vec<TransformerLayer> {
    let mut embed = Some(m.embed);
    m.blocks
        .into_iter()
        .map(|block| TransformerLayer {
            embed: embed.take(),
            block,
        })
        .collect()
}

impl TransformerPair {
    pub fn new(long: ToyModel, short: ToyModel) -> Result<Self, RpamError> {
        if long.config() != short.config() {
            return Err(RpamError::InvalidConfig(
                "long and short models have different configs".into(),
            ));
        }
        let config = *long.config();
        Ok(Self {
            config,
            long: split_layers(long),
            short: split_layers(short),
        })
    }

    pub fn from_checkpoints(
        long: &Checkpoint,
        short: &Checkpoint,
        config: ModelConfig,
    ) -> Result<Self, RpamError> {
        long.check_compatible(short)?;
        Self::new(
            ToyModel::from_checkpoint(long, config)?,
            ToyModel::from_checkpoint(short, config)?,
        )
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

impl LayerwisePair for TransformerPair {
    type Input = Vec<TokenId>;
    type Params = TransformerLayer;

    fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn endpoint_params(&self, model: ModelTag, layer: usize) -> &TransformerLayer {
        match model {
            ModelTag::Long => &self.long[layer],
            ModelTag::Short => &self.short[layer],
        }
    }

    fn merged_params(&self, layer: usize, pair: CoefPair) -> Result<TransformerLayer, RpamError> {
        Ok(merged_layer_params(
            &self.long[layer],
            &self.short[layer],
            pair,
        ))
    }

    fn apply(
        &self,
        layer: usize,
        params: &TransformerLayer,
        input: &Vec<TokenId>,
        carried: Option<&Matrix>,
    ) -> Result<Matrix, RpamError> {
        let x = match (&params.embed, carried) {
            (Some(e), None) => {
                check_input(&self.config, input)?;
                embed_tokens(&self.config, e, input)
            }
            (None, Some(c)) => c.clone(),
            _ => return Err(RpamError::MissingCarried(layer)),
        };
        Ok(block_forward(&self.config, &params.block, &x))
    }
}

fn check_input(cfg: &ModelConfig, tokens: &[TokenId]) -> Result<(), RpamError> {
    if tokens.is_empty() || tokens.len() > cfg.max_seq {
        return Err(ModelError::SequenceLength {
            len: tokens.len(),
            max: cfg.max_seq,
        }
        .into());
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        }
        .into());
    }
    Ok(())
}

pub fn merged_layer_params(
    long: &TransformerLayer,
    short: &TransformerLayer,
    pair: CoefPair,
) -> TransformerLayer {
    let (a, b) = (pair.lambda_long, pair.lambda_short);
    TransformerLayer {
        embed: match (&long.embed, &short.embed) {
            (Some(x), Some(y)) => Some(EmbedWeights::lerp(x, y, a, b)),
            _ => None,
        },
        block: BlockWeights::lerp(&long.block, &short.block, a, b),
    }
}

/// Pair every labeled query with its prompt. Labels are visited in query-id
/// order, which fixes the batch order.
pub fn calibration_examples(
    pl: &PLDataset,
    prompts: &BTreeMap<String, Vec<TokenId>>,
) -> Result<Vec<CalibrationExample<Vec<TokenId>>>, RpamError> {
    let mut labels: Vec<_> = pl.labels.iter().collect();
    labels.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    labels
        .into_iter()
        .map(|l| {
            let input = prompts
                .get(&l.query_id)
                .ok_or_else(|| RpamError::MissingPrompt(l.query_id.clone()))?;
            Ok(CalibrationExample {
                query_id: l.query_id.clone(),
                input: input.clone(),
                positive: l.positive,
                negative: l.negative,
            })
        })
        .collect()
}

/// Build the merged checkpoint: every tensor is interpolated with the pair
/// of the layer that owns it.
pub fn assemble_merged(
    long: &Checkpoint,
    short: &Checkpoint,
    config: &ModelConfig,
    coefficients: &MergeCoefficients,
) -> Result<Checkpoint, RpamError> {
    config.validate()?;
    if coefficients.n_layers() != config.n_layers {
        return Err(RpamError::InvalidConfig(alloc::format!(
            "{} coefficient pairs for {} layers",
            coefficients.n_layers(),
            config.n_layers
        )));
    }
    long.check_compatible(short)?;
    if let Some(name) = long.names().find(|n| config.layer_group(n).is_none()) {
        return Err(ModelError::UnexpectedTensor(name.into()).into());
    }
    let mut out = long.zip_map(short, |name, a, b| {
        let p = coefficients.per_layer[config.layer_group(name).expect("checked above")];
        Ok(lerp_tensor(a, b, p.lambda_long, p.lambda_short)?)
    })?;
    out.metadata.clear();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RpamOutput {
    pub checkpoint: Checkpoint,
    pub coefficients: MergeCoefficients,
    pub layers: Vec<LayerCalibration>,
}

/// Calibrate per-layer coefficients on the pattern-labeled prompts and
/// return the merged checkpoint.
pub fn rpam_merge(
    long: &Checkpoint,
    short: &Checkpoint,
    pl: &PLDataset,
    prompts: &BTreeMap<String, Vec<TokenId>>,
    model_config: &ModelConfig,
    config: &CalibrationConfig,
) -> Result<RpamOutput, RpamError> {
    config.validate()?;
    let pair = TransformerPair::from_checkpoints(long, short, *model_config)?;
    let examples = calibration_examples(pl, prompts)?;
    let (coefficients, layers) = calibrate(&pair, &examples, config)?;
    let checkpoint = assemble_merged(long, short, model_config, &coefficients)?;
    Ok(RpamOutput {
        checkpoint,
        coefficients,
        layers,
    })
}
