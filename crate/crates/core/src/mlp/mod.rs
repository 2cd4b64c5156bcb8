//! Invariant message-passing potential, its trainer and checkpoints.

mod checkpoint;
mod model;
pub mod tape;
mod train;

use std::sync::Arc;

use crate::calc::{Calculator, CalculatorSpec};
use crate::error::{Error, Result};

pub use checkpoint::{
    checkpoint_json, load_checkpoint, parse_checkpoint, predict_batch, save_checkpoint, Checkpoint, ModelCalculator,
    MAGIC,
};
pub use model::{
    cosine_envelope, fit_species_scaler, rbf_expand, GraphBatch, Model, ModelConfig, Param, SpeciesScaler,
};
pub use train::{batch_gradient, evaluate_loss, train, EpochRecord, LossParts, Sample, TrainConfig, TrainOutcome};

/// Registry factory for `kind = "model"`: loads `checkpoint`.
pub fn build_model_calculator(spec: &CalculatorSpec) -> Result<Arc<dyn Calculator>> {
    let path = spec
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("model calculator needs `checkpoint`".into()))?;
    Ok(Arc::new(ModelCalculator::new(load_checkpoint(path)?.model)))
}
