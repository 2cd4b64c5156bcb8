//! Self-describing JSON checkpoints and the `model` calculator.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig, Param, SpeciesScaler};
use crate::calc::{CalcResult, Calculator};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::structure::Structure;

pub const MAGIC: &str = "HATMLP1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    magic: String,
    config: ModelConfig,
    scaler: SpeciesScaler,
    params: Vec<Tensor>,
    train_config_hash: String,
    param_hash: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config_hash: String,
    pub param_hash: String,
}

pub fn checkpoint_json(model: &Model, train_config_hash: &str) -> Result<String> {
    let file = CheckpointFile {
        magic: MAGIC.into(),
        config: model.config.clone(),
        scaler: model.scaler.clone(),
        params: model
            .params
            .iter()
            .map(|p| Tensor {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
                data: p.value.iter().copied().collect(),
            })
            .collect(),
        train_config_hash: train_config_hash.into(),
        param_hash: model.param_hash(),
    };
    Ok(serde_json::to_string(&file)?)
}

/// Write a checkpoint; returns the parameter hash.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, train_config_hash: &str) -> Result<String> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, checkpoint_json(model, train_config_hash)?).map_err(|e| Error::io(path, e))?;
    Ok(model.param_hash())
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
    match value.get("magic").and_then(|m| m.as_str()) {
        Some(MAGIC) => {}
        other => return Err(Error::Checkpoint(format!("bad magic {other:?}, expected {MAGIC}"))),
    }
    let file: CheckpointFile = serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = Model::new(file.config, file.scaler)?;
    if model.params.len() != file.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors for an architecture with {}",
            file.params.len(),
            model.params.len()
        )));
    }
    for (slot, t) in model.params.iter_mut().zip(file.params) {
        let expected = [slot.value.nrows(), slot.value.ncols()];
        if slot.name != t.name || expected != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match {} {:?}",
                t.name, t.shape, slot.name, expected
            )));
        }
        *slot = Param {
            name: t.name,
            value: Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        };
    }
    let hash = model.param_hash();
    if hash != file.param_hash {
        return Err(Error::Checkpoint("parameter hash mismatch".into()));
    }
    Ok(Checkpoint {
        model,
        train_config_hash: file.train_config_hash,
        param_hash: hash,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text)
}

/// Energies and forces for many structures, in input order, evaluated in
/// chunks of `batch_size`.
pub fn predict_batch(model: &Model, structures: &[Structure], batch_size: usize) -> Result<Vec<(f64, Vec<Vec3>)>> {
    let mut out = Vec::with_capacity(structures.len());
    for chunk in structures.chunks(batch_size.max(1)) {
        let refs: Vec<&Structure> = chunk.iter().collect();
        out.extend(model.evaluate_batch(&refs)?);
    }
    Ok(out)
}

/// A trained model behind the calculator interface.
pub struct ModelCalculator {
    model: Model,
    provenance: String,
}

impl ModelCalculator {
    pub fn new(model: Model) -> Self {
        let provenance = format!("model:{}", &model.param_hash()[..16]);
        ModelCalculator { model, provenance }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl Calculator for ModelCalculator {
    fn name(&self) -> &str {
        "model"
    }

    fn provenance(&self) -> String {
        self.provenance.clone()
    }

    fn evaluate(&self, s: &Structure) -> Result<CalcResult> {
        let (energy, forces) = self.model.energy_and_forces(s)?;
        Ok(CalcResult::ok(energy, forces, self.provenance.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let scaler = SpeciesScaler {
            means: [(1u8, -0.4), (6, -1.5)].into_iter().collect(),
            scale: 0.3,
        };
        Model::new(ModelConfig { seed: 11, ..ModelConfig::default() }, scaler).unwrap()
    }

    fn methyl() -> Structure {
        Structure::new(
            vec![6, 1, 1, 1],
            vec![[0.0; 3], [1.08, 0.0, 0.0], [-0.54, 0.94, 0.0], [-0.54, -0.94, 0.1]],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let text = checkpoint_json(&m, "abc").unwrap();
        let back = parse_checkpoint(&text).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.train_config_hash, "abc");
        assert_eq!(back.param_hash, m.param_hash());
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let m = model();
        let text = checkpoint_json(&m, "abc").unwrap();
        assert!(parse_checkpoint(&text.replace(MAGIC, "HATMLP0")).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["params"][0]["data"][0] = serde_json::json!(123.0);
        assert!(parse_checkpoint(&v.to_string()).unwrap_err().to_string().contains("hash"));
    }

    #[test]
    fn batch_prediction_matches_single() {
        let m = model();
        let s = methyl();
        let many: Vec<Structure> = (0..32)
            .map(|k| s.clone().with_position(1, [1.08 + 0.01 * k as f64, 0.0, 0.0]).unwrap())
            .collect();
        let all = predict_batch(&m, &many, 32).unwrap();
        for (k, st) in many.iter().enumerate().step_by(7) {
            let one = predict_batch(&m, std::slice::from_ref(st), 1).unwrap();
            assert!((one[0].0 - all[k].0).abs() < 1e-10);
        }
        assert!(predict_batch(&m, &[], 4).unwrap().is_empty());
        let calc = ModelCalculator::new(m);
        assert!(calc.evaluate(&s).unwrap().converged);
        assert!(calc.provenance().starts_with("model:"));
    }
}
