//! Adam training on energies and forces.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::Model;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::rng::RngStream;
use crate::structure::Structure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-epoch learning-rate factor after warmup.
    pub lr_decay: f64,
    pub warmup_epochs: usize,
    pub w_energy: f64,
    pub w_forces: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 0.995,
            warmup_epochs: 1,
            w_energy: 1.0,
            w_forces: 49.0,
            batch_size: 32,
            max_epochs: 200,
            patience: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return Err(Error::Config("lr_init must be positive".into()));
        }
        if self.w_energy < 0.0 || self.w_forces < 0.0 || self.w_energy + self.w_forces == 0.0 {
            return Err(Error::Config("loss weights must be non-negative and not both zero".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("invalid optimizer constants".into()));
        }
        Ok(())
    }

    /// Learning rate for `step` of `steps` in `epoch` (0-based). Warmup
    /// ramps linearly; afterwards `lr_init · decay^(epoch − warmup)`.
    pub fn learning_rate(&self, epoch: usize, step: usize, steps: usize) -> f64 {
        if epoch < self.warmup_epochs {
            let total = (self.warmup_epochs * steps.max(1)) as f64;
            let done = (epoch * steps.max(1) + step + 1) as f64;
            self.lr_init * done / total
        } else {
            self.lr_init * self.lr_decay.powi((epoch - self.warmup_epochs) as i32)
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A labeled structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub structure: Structure,
    pub energy: f64,
    pub forces: Vec<Vec3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub energy_sq: f64,
    pub force_sq: f64,
    pub n_configs: usize,
    pub n_force_components: usize,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.energy_sq += o.energy_sq;
        self.force_sq += o.force_sq;
        self.n_configs += o.n_configs;
        self.n_force_components += o.n_force_components;
    }

    /// `w_E · MSE(E) + w_F · MSE(F)`.
    pub fn loss(&self, cfg: &TrainConfig) -> f64 {
        let mut l = 0.0;
        if self.n_configs > 0 {
            l += cfg.w_energy * self.energy_sq / self.n_configs as f64;
        }
        if self.n_force_components > 0 {
            l += cfg.w_forces * self.force_sq / self.n_force_components as f64;
        }
        l
    }
}

/// Loss and parameter gradients for one batch. The force term's gradient
/// comes from differentiating the recorded dE/dr against fixed weights.
pub fn batch_gradient(model: &Model, batch: &[&Sample], cfg: &TrainConfig) -> Result<(LossParts, Vec<Array2<f64>>)> {
    let structures: Vec<&Structure> = batch.iter().map(|s| &s.structure).collect();
    let graph = model.batch(&structures)?;
    let b = batch.len();
    let n_comp = 3 * graph.n_atoms;
    let coef_e = cfg.w_energy / b as f64;
    let coef_f = cfg.w_forces / n_comp as f64;

    let mut target = Array2::zeros((b, 1));
    for (c, s) in batch.iter().enumerate() {
        target[[c, 0]] = model.scaler.remove(&s.structure, s.energy)?;
    }

    let tape = Tape::new();
    let params: Vec<Var> = model.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let r = tape.leaf(graph.dist.clone());
    let e = model.forward(&params, &graph, &r);
    let resid = e.add_const(&(-&target));
    let energy_sq = resid.value().iter().map(|x| x * x).sum::<f64>();
    let mut objective = resid.square().sum().scale(coef_e);

    let mut force_sq = 0.0;
    if cfg.w_forces > 0.0 && graph.dist.nrows() > 0 {
        let de_dr = tape.grad(&e.sum(), &[&r], true).pop().flatten().expect("energy depends on distances");
        let pred = graph.forces_from_pair_gradient(de_dr.value());
        let mut res = vec![[0.0; 3]; graph.n_atoms];
        for (c, s) in batch.iter().enumerate() {
            for (a, atom) in graph.config_atoms(c).enumerate() {
                for k in 0..3 {
                    let d = pred[atom][k] - s.forces[a][k];
                    res[atom][k] = d;
                    force_sq += d * d;
                }
            }
        }
        // ∂/∂(dE/dr_p) of coef_f Σ |F − F_ref|²
        let mut w = Array2::zeros((graph.dist.nrows(), 1));
        for (p, (&i, &j)) in graph.pair_i.iter().zip(graph.pair_j.iter()).enumerate() {
            let u = graph.unit[p];
            let mut acc = 0.0;
            for k in 0..3 {
                acc += (res[i][k] - res[j][k]) * u[k];
            }
            w[[p, 0]] = 2.0 * coef_f * acc;
        }
        objective = objective.add(&de_dr.mul_const(Rc::new(w)).sum());
    } else {
        for (c, s) in batch.iter().enumerate() {
            let _ = c;
            force_sq += s.forces.iter().flatten().map(|x| x * x).sum::<f64>();
        }
    }

    let refs: Vec<&Var> = params.iter().collect();
    let grads = tape
        .grad(&objective, &refs, false)
        .into_iter()
        .zip(&model.params)
        .map(|(g, p)| g.map_or_else(|| Array2::zeros(p.value.raw_dim()), |g| g.value().clone()))
        .collect();
    Ok((
        LossParts {
            energy_sq,
            force_sq,
            n_configs: b,
            n_force_components: n_comp,
        },
        grads,
    ))
}

/// Loss terms without gradients.
pub fn evaluate_loss(model: &Model, samples: &[Sample], batch_size: usize) -> Result<LossParts> {
    let mut parts = LossParts::default();
    for chunk in samples.chunks(batch_size.max(1)) {
        let structures: Vec<&Structure> = chunk.iter().map(|s| &s.structure).collect();
        let pred = model.evaluate_batch(&structures)?;
        for (s, (e, f)) in chunk.iter().zip(pred) {
            parts.energy_sq += (e - s.energy).powi(2);
            parts.force_sq += f
                .iter()
                .zip(&s.forces)
                .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
                .sum::<f64>();
            parts.n_configs += 1;
            parts.n_force_components += 3 * s.structure.len();
        }
    }
    Ok(parts)
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros = || model.params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
        Adam { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, model: &mut Model, grads: &[Array2<f64>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (k, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            ndarray::Zip::from(&mut model.params[k].value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
                });
        }
    }
}

/// Train `model` in place of a copy; returns the best-validation parameters.
/// Fully deterministic for a given seed: batches are drawn from a seeded
/// stream and all reductions run in a fixed order on one thread.
pub fn train(model: &Model, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut adam = Adam::new(model);
    let stream = RngStream::new(cfg.seed, "train");
    let steps = train_set.len().div_ceil(cfg.batch_size);
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        let mut rng = stream.child(format!("epoch-{epoch}")).rng();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut parts = LossParts::default();
        let mut lr = cfg.learning_rate(epoch, 0, steps);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (p, grads) = batch_gradient(&current, &batch, cfg)?;
            let finite = p.energy_sq.is_finite() && p.force_sq.is_finite() && grads.iter().all(|g| g.iter().all(|x| x.is_finite()));
            if !finite {
                let msg = format!("non-finite loss at epoch {epoch}, step {step}; keeping epoch {best_epoch}");
                log::error!("{msg}");
                if best_loss.is_infinite() {
                    best = current.clone();
                }
                return Ok(TrainOutcome {
                    model: best,
                    history,
                    best_epoch,
                    aborted: Some(msg),
                });
            }
            parts.add(&p);
            lr = cfg.learning_rate(epoch, step, steps);
            adam.step(&mut current, &grads, lr, cfg);
        }
        let train_loss = parts.loss(cfg);
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            evaluate_loss(&current, val_set, cfg.batch_size)?.loss(cfg)
        };
        log::debug!("epoch {epoch} lr {lr:.3e} train {train_loss:.5} val {val_loss:.5}");
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        if !val_loss.is_finite() {
            let msg = format!("non-finite validation loss at epoch {epoch}; keeping epoch {best_epoch}");
            log::error!("{msg}");
            return Ok(TrainOutcome {
                model: best,
                history,
                best_epoch,
                aborted: Some(msg),
            });
        }
        if val_loss < best_loss {
            best_loss = val_loss;
            best = current.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        aborted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{ModelConfig, SpeciesScaler};

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert!((cfg.learning_rate(0, 9, 10) - 1e-3).abs() < 1e-18);
        assert!((cfg.learning_rate(0, 0, 10) - 1e-4).abs() < 1e-18);
        for k in 1..50 {
            let expected = 1e-3 * 0.995f64.powi(k as i32 - 1);
            assert_eq!(cfg.learning_rate(k, 3, 10), expected);
        }
    }

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            feature_dim: 8,
            n_interaction_blocks: 1,
            readout_hidden: vec![4],
            seed: 3,
            ..ModelConfig::default()
        };
        let scaler = SpeciesScaler {
            means: [(1u8, 0.0), (8, 0.0)].into_iter().collect(),
            scale: 1.0,
        };
        Model::new(cfg, scaler).unwrap()
    }

    fn water(theta: f64) -> Sample {
        let s = Structure::new(
            vec![8, 1, 1],
            vec![[0.0; 3], [0.97, 0.0, 0.0], [0.97 * theta.cos(), 0.97 * theta.sin(), 0.1]],
        )
        .unwrap();
        Sample {
            structure: s,
            energy: theta.sin(),
            forces: vec![[0.1, -0.2, 0.0], [0.0, 0.1, 0.3], [-0.1, 0.1, -0.3]],
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = tiny_model();
        let samples = [water(1.7), water(1.9)];
        let batch: Vec<&Sample> = samples.iter().collect();
        let cfg = TrainConfig::default();
        let (_, grads) = batch_gradient(&model, &batch, &cfg).unwrap();
        let loss = |m: &Model| {
            let p = evaluate_loss(m, &samples, 32).unwrap();
            // batch loss uses one batch: coefficients match loss()
            p.loss(&cfg)
        };
        let h = 1e-6;
        for (k, p) in model.params.iter().enumerate() {
            for idx in [0, p.value.len() / 2, p.value.len() - 1] {
                let (r, c) = (idx / p.value.ncols(), idx % p.value.ncols());
                let mut mp = model.clone();
                mp.params[k].value[[r, c]] += h;
                let mut mm = model.clone();
                mm.params[k].value[[r, c]] -= h;
                let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
                let an = grads[k][[r, c]];
                assert!((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), "{} {idx}: fd {fd} vs {an}", p.name);
            }
        }
    }

    #[test]
    fn zero_force_weight_ignores_forces() {
        let model = tiny_model();
        let a = water(1.8);
        let mut b = a.clone();
        b.forces = vec![[5.0, 5.0, 5.0]; 3];
        let cfg = TrainConfig {
            w_forces: 0.0,
            ..TrainConfig::default()
        };
        let (_, ga) = batch_gradient(&model, &[&a], &cfg).unwrap();
        let (_, gb) = batch_gradient(&model, &[&b], &cfg).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let model = tiny_model();
        let data: Vec<Sample> = (0..12).map(|k| water(1.6 + 0.05 * k as f64)).collect();
        let cfg = TrainConfig {
            max_epochs: 30,
            batch_size: 4,
            lr_init: 1e-2,
            ..TrainConfig::default()
        };
        let a = train(&model, &data, &data[..4], &cfg).unwrap();
        let b = train(&model, &data, &data[..4], &cfg).unwrap();
        assert_eq!(a.model.param_hash(), b.model.param_hash());
        let first = a.history[0].train_loss;
        let last = a.history.last().unwrap().train_loss;
        assert!(last < first, "{first} -> {last}");
        let best = a.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(a.history[a.best_epoch].val_loss, best);
    }
}
