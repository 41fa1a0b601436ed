//! Accuracy and compression ratios.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::loss::argmax_rows;

/// Evaluation batch size; results do not depend on it.
pub const EVAL_BATCH: usize = 100;

/// Top-1 accuracy in [0, 1], BatchNorm in inference mode.
pub fn accuracy(model: &ModelGraph, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("empty evaluation split".into()));
    }
    if data.classes != model.class_count {
        return Err(Error::Input(format!(
            "dataset has {} classes, model predicts {}",
            data.classes, model.class_count
        )));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let logits = model.predict(&x)?;
        correct += argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// `1 − compressed/base`.
pub fn compression_ratio(compressed: u64, base: u64) -> f64 {
    if base == 0 {
        return 0.0;
    }
    1.0 - compressed as f64 / base as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Costs {
    pub flops: u64,
    pub params: u64,
}

impl Costs {
    pub fn of(model: &ModelGraph) -> Result<Self> {
        Ok(Self {
            flops: model.count_flops()?.total,
            params: model.count_params()?.total,
        })
    }

    /// `(C_F, C_P)` against `base`.
    pub fn ratios(&self, base: &Costs) -> (f64, f64) {
        (
            compression_ratio(self.flops, base.flops),
            compression_ratio(self.params, base.params),
        )
    }
}
