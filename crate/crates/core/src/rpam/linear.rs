//! Stacks of linear maps `z ↦ z · W_l`, used to exercise the calibration
//! loop on losses with closed-form structure.

use alloc::vec::Vec;

use crate::labeling::ModelTag;
use crate::matrix::Matrix;

use super::{CoefPair, LayerwisePair, RpamError};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearStack {
    pub dim: usize,
    /// One `dim × dim` row-major matrix per layer.
    pub long: Vec<Vec<f64>>,
    pub short: Vec<Vec<f64>>,
}

impl LinearStack {
    pub fn new(dim: usize, long: Vec<Vec<f64>>, short: Vec<Vec<f64>>) -> Self {
        assert_eq!(long.len(), short.len(), "layer counts differ");
        assert!(
            long.iter().chain(&short).all(|w| w.len() == dim * dim),
            "weights must be dim × dim"
        );
        Self { dim, long, short }
    }
}

impl LayerwisePair for LinearStack {
    type Input = Matrix;
    type Params = Vec<f64>;

    fn n_layers(&self) -> usize {
        self.long.len()
    }

    fn endpoint_params(&self, model: ModelTag, layer: usize) -> &Vec<f64> {
        match model {
            ModelTag::Long => &self.long[layer],
            ModelTag::Short => &self.short[layer],
        }
    }

    fn merged_params(&self, layer: usize, pair: CoefPair) -> Result<Vec<f64>, RpamError> {
        Ok(crate::model::lerp_vec(
            &self.long[layer],
            &self.short[layer],
            pair.lambda_long,
            pair.lambda_short,
        ))
    }

    fn apply(
        &self,
        _layer: usize,
        params: &Vec<f64>,
        input: &Matrix,
        carried: Option<&Matrix>,
    ) -> Result<Matrix, RpamError> {
        let x = carried.unwrap_or(input);
        Ok(x.affine(params, &alloc::vec![0.0; self.dim]))
    }
}
