//! label, split, train, eval, curve, transfer and barriers.

use std::collections::BTreeMap;
use std::path::Path;

use super::PipelineConfig;
use crate::calc::{batch_evaluate, CalculatorRegistry};
use crate::error::{Error, Result};
use crate::eval::{
    self, compute_metrics, evaluate_barriers, learning_curve, stratified_split, timed, transferability, BarrierReport,
    BarrierRow, CurvePoint, Labeled, MetricsReport, TransferReport,
};
use crate::hatbuild::barriers;
use crate::manifest::{Dataset, LabelInfo, Split, SystemKind};
use crate::mlp::{
    fit_species_scaler, load_checkpoint, predict_batch, save_checkpoint, train, Model, Sample, TrainOutcome,
};
use crate::structure::Structure;

pub const CHECKPOINT_FILE: &str = "model.json";

fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let dir = cfg.dataset_dir();
    if !dir.join(crate::manifest::MANIFEST_FILE).exists() {
        return Err(Error::Pipeline(format!(
            "no dataset at {}; run `generate` first",
            dir.display()
        )));
    }
    Dataset::load(dir)
}

fn require_splits(ds: &Dataset) -> Result<()> {
    if ds.records.iter().any(|r| r.split.is_none()) {
        return Err(Error::Pipeline("manifest has systems without a split; run `split` first".into()));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LabelSummary {
    pub calculator: String,
    pub n_frames: usize,
    pub n_failed: usize,
}

impl LabelSummary {
    pub fn failure_rate(&self) -> f64 {
        self.n_failed as f64 / self.n_frames.max(1) as f64
    }

    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("calculator={}", self.calculator),
            format!("frames={}", self.n_frames),
            format!("failed={}", self.n_failed),
            format!("failure_rate={:.4}", self.failure_rate()),
        ]
    }

    pub fn check(&self, max_failure_rate: f64) -> Result<()> {
        if self.failure_rate() > max_failure_rate {
            return Err(Error::Pipeline(format!(
                "{} of {} frames failed to label ({:.1}% > {:.1}%)",
                self.n_failed,
                self.n_frames,
                100.0 * self.failure_rate(),
                100.0 * max_failure_rate
            )));
        }
        Ok(())
    }
}

/// Label (or relabel) every frame. Indices and splits are untouched;
/// failed frames are stored without labels.
pub fn cmd_label(cfg: &PipelineConfig, registry: &CalculatorRegistry) -> Result<LabelSummary> {
    let mut ds = load_dataset(cfg)?;
    let spec = cfg.label.calculator.as_ref().unwrap_or(&cfg.calculator);
    let calc = registry.build(spec)?;
    let provenance = calc.provenance();
    let label_frames = |frames: &mut Vec<crate::xyz::Frame>| -> usize {
        let structures: Vec<Structure> = frames.iter().map(|f| f.structure.clone()).collect();
        let results = batch_evaluate(&structures, calc.as_ref(), cfg.workers);
        let mut failed = 0;
        for (f, r) in frames.iter_mut().zip(results) {
            if r.converged {
                f.energy = Some(r.energy);
                f.forces = Some(r.forces);
            } else {
                log::warn!(
                    "label failed for {}: {}",
                    f.structure.tag(super::generate::TAG_SYSTEM_ID).unwrap_or("?"),
                    r.message.unwrap_or_default()
                );
                f.energy = None;
                f.forces = None;
                failed += 1;
            }
        }
        failed
    };
    let mut n_failed = label_frames(&mut ds.configs);
    n_failed += label_frames(&mut ds.interp);
    let n_frames = ds.configs.len() + ds.interp.len();
    let Dataset {
        records, configs, interp, ..
    } = &mut ds;
    for r in records.iter_mut() {
        let frames = if r.kind == SystemKind::Interp { &interp[r.frame_range()] } else { &configs[r.frame_range()] };
        let missing = frames.iter().filter(|f| !f.is_labeled()).count();
        r.label = Some(LabelInfo {
            calculator: provenance.clone(),
            n_failed: missing,
        });
        (r.barrier_left_ev, r.barrier_right_ev) = if r.kind == SystemKind::Interp && missing == 0 {
            let e: Vec<f64> = frames.iter().map(|f| f.energy.expect("labeled")).collect();
            let (l, rr) = barriers(&e);
            (Some(l), Some(rr))
        } else {
            (None, None)
        };
    }
    ds.save()?;
    Ok(LabelSummary {
        calculator: provenance,
        n_frames,
        n_failed,
    })
}

/// Assign stratified splits; returns (stratum, split) counts.
pub fn cmd_split(cfg: &PipelineConfig) -> Result<BTreeMap<String, [usize; 3]>> {
    let mut ds = load_dataset(cfg)?;
    stratified_split(&mut ds.records, &cfg.split)?;
    crate::manifest::write_manifest(ds.dir.join(crate::manifest::MANIFEST_FILE), &ds.records)?;
    let mut out: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for r in &ds.records {
        let k = match r.split.expect("assigned") {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        out.entry(r.stratum()).or_default()[k] += 1;
    }
    Ok(out)
}

pub fn labels_of(samples: &[Sample]) -> Vec<Labeled> {
    samples.iter().map(|s| Labeled::new(s.energy, s.forces.clone())).collect()
}

fn split_samples(ds: &Dataset, split: Split) -> (Vec<Sample>, Vec<String>) {
    ds.samples(Some(split))
        .into_iter()
        .map(|(r, s)| (s, r.stratum()))
        .unzip()
}

/// Fit the species scaler on `train_set`, initialise a model and train it.
/// Returns the outcome and the wall-clock training seconds.
pub fn train_model(cfg: &PipelineConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<(TrainOutcome, f64)> {
    let (outcome, seconds) = timed(|| {
        let structures: Vec<&Structure> = train_set.iter().map(|s| &s.structure).collect();
        let energies: Vec<f64> = train_set.iter().map(|s| s.energy).collect();
        let scaler = fit_species_scaler(&structures, &energies)?;
        let model = Model::new(cfg.model.clone(), scaler)?;
        train(&model, train_set, val_set, &cfg.train)
    });
    Ok((outcome?, seconds))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub param_hash: String,
    pub n_train: usize,
    pub n_val: usize,
    pub best_epoch: usize,
    pub epochs: usize,
    pub train_seconds: f64,
    pub aborted: Option<String>,
}

impl TrainSummary {
    pub fn lines(&self) -> Vec<String> {
        let mut v = vec![
            format!("param_hash={}", self.param_hash),
            format!("train_samples={}", self.n_train),
            format!("val_samples={}", self.n_val),
            format!("epochs={}", self.epochs),
            format!("best_epoch={}", self.best_epoch),
            format!("train_seconds={:.2}", self.train_seconds),
        ];
        if let Some(a) = &self.aborted {
            v.push(format!("aborted=\"{a}\""));
        }
        v
    }
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<TrainSummary> {
    let ds = load_dataset(cfg)?;
    require_splits(&ds)?;
    let (train_set, _) = split_samples(&ds, Split::Train);
    let (val_set, _) = split_samples(&ds, Split::Val);
    if train_set.is_empty() {
        return Err(Error::Pipeline("no labeled training samples; run `label` and `split` first".into()));
    }
    let (outcome, seconds) = train_model(cfg, &train_set, &val_set)?;
    let param_hash = save_checkpoint(cfg.checkpoint_path(), &outcome.model, &cfg.train.hash())?;
    let reports = cfg.reports_dir();
    std::fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    let mut text = cfg.report_header();
    text.push_str("epoch,lr,train_loss,val_loss\n");
    for h in &outcome.history {
        text.push_str(&format!("{},{},{},{}\n", h.epoch, h.lr, h.train_loss, h.val_loss));
    }
    let path = reports.join("train_history.csv");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(TrainSummary {
        param_hash,
        n_train: train_set.len(),
        n_val: val_set.len(),
        best_epoch: outcome.best_epoch,
        epochs: outcome.history.len(),
        train_seconds: seconds,
        aborted: outcome.aborted,
    })
}

/// Predicted vs reference barriers of the interpolation systems in `split`
/// (all of them for `None`).
pub fn held_out_barriers(model: &Model, ds: &Dataset, split: Option<Split>, batch_size: usize) -> Result<BarrierReport> {
    let records: Vec<_> = ds.records_where(SystemKind::Interp, split).collect();
    let mut structures = Vec::new();
    for r in &records {
        structures.extend(ds.frames(r).iter().map(|f| f.structure.clone()));
    }
    let predicted: Vec<f64> = predict_batch(model, &structures, batch_size)?.into_iter().map(|p| p.0).collect();
    let mut refs = Vec::with_capacity(records.len());
    let mut preds = Vec::with_capacity(records.len());
    let mut offset = 0;
    for r in &records {
        refs.push(ds.frames(r).iter().map(|f| f.energy).collect::<Vec<_>>());
        preds.push(predicted[offset..offset + r.n_frames()].to_vec());
        offset += r.n_frames();
    }
    Ok(evaluate_barriers(
        records
            .iter()
            .zip(refs.iter().zip(&preds))
            .map(|(r, (a, b))| (r.system_id.as_str(), a.as_slice(), b.as_slice())),
    ))
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    /// Test-split metrics; the barrier MAE covers test-split paths.
    pub metrics: MetricsReport,
    pub barriers_test: BarrierReport,
    /// Every interpolation system (none is used for training).
    pub barriers_all: BarrierReport,
}

impl EvalSummary {
    pub fn lines(&self) -> Vec<String> {
        let m = &self.metrics;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "nan".into());
        vec![
            format!("test_structures={}", m.n_structures),
            format!("energy_mae_mev={:.4}", m.energy_mae_mev),
            format!("energy_per_atom_mae_mev={:.4}", m.energy_per_atom_mae_mev),
            format!("force_mae_mev_ang={:.4}", m.force_mae_mev_ang),
            format!("force_rms_mev_ang={:.4}", m.force_rms_mev_ang),
            format!("barrier_mae_mev={}", opt(m.barrier_mae_mev)),
            format!("barrier_systems={}", m.n_barrier_systems),
            format!("barrier_mae_all_mev={}", opt(self.barriers_all.mae_mev)),
            format!("barrier_systems_all={}", self.barriers_all.rows.len()),
            format!("barrier_invalid={}", self.barriers_all.n_invalid),
        ]
    }
}

/// Test-split metrics of `model`, plus barriers.
pub fn evaluate_model(model: &Model, ds: &Dataset, batch_size: usize) -> Result<EvalSummary> {
    let (test, strata) = split_samples(ds, Split::Test);
    let structures: Vec<Structure> = test.iter().map(|s| s.structure.clone()).collect();
    let preds: Vec<Labeled> = predict_batch(model, &structures, batch_size)?.into_iter().map(Labeled::from).collect();
    let mut metrics = compute_metrics(&preds, &labels_of(&test), &strata)?;
    let barriers_test = held_out_barriers(model, ds, Some(Split::Test), batch_size)?;
    let barriers_all = held_out_barriers(model, ds, None, batch_size)?;
    metrics.barrier_mae_mev = barriers_test.mae_mev;
    metrics.n_barrier_systems = barriers_test.rows.len();
    Ok(EvalSummary {
        metrics,
        barriers_test,
        barriers_all,
    })
}

fn model_for_eval(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_path());
    if !path.exists() {
        return Err(Error::Pipeline(format!("no checkpoint at {}; run `train` first", path.display())));
    }
    Ok(load_checkpoint(path)?.model)
}

fn reports_dir(cfg: &PipelineConfig) -> Result<std::path::PathBuf> {
    let dir = cfg.reports_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

pub fn cmd_eval(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    let ds = load_dataset(cfg)?;
    require_splits(&ds)?;
    let model = model_for_eval(cfg, checkpoint)?;
    let summary = evaluate_model(&model, &ds, cfg.eval.batch_size)?;
    let dir = reports_dir(cfg)?;
    let json = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "param_hash": model.param_hash(),
        "test": summary.metrics,
        "barrier_mae_all_mev": summary.barriers_all.mae_mev,
        "barrier_systems_all": summary.barriers_all.rows.len(),
        "barrier_invalid": summary.barriers_all.n_invalid,
    });
    let path = dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_string_pretty(&json)? + "\n").map_err(|e| Error::io(&path, e))?;
    eval::write_barriers_csv(dir.join("barriers.csv"), &cfg.report_header(), &summary.barriers_all.rows)?;
    Ok(summary)
}

/// Predicted barriers for every interpolation system, written to
/// `barriers.csv`.
pub fn cmd_barriers(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> Result<BarrierReport> {
    let ds = load_dataset(cfg)?;
    let model = model_for_eval(cfg, checkpoint)?;
    let report = held_out_barriers(&model, &ds, None, cfg.eval.batch_size)?;
    eval::write_barriers_csv(reports_dir(cfg)?.join("barriers.csv"), &cfg.report_header(), &report.rows)?;
    Ok(report)
}

/// Learning curve over `sizes`; also returns the trained models.
pub fn curve_points(cfg: &PipelineConfig, ds: &Dataset, sizes: &[usize]) -> Result<Vec<(CurvePoint, Model)>> {
    require_splits(ds)?;
    let (train_set, _) = split_samples(ds, Split::Train);
    let (val_set, _) = split_samples(ds, Split::Val);
    let mut models = Vec::new();
    let points = learning_curve(train_set.len(), sizes, cfg.seed, |size, subset| {
        let subset: Vec<Sample> = subset.iter().map(|&i| train_set[i].clone()).collect();
        let (outcome, seconds) = train_model(cfg, &subset, &val_set)?;
        log::info!("curve size {size}: {seconds:.1} s, best epoch {}", outcome.best_epoch);
        let summary = evaluate_model(&outcome.model, ds, cfg.eval.batch_size)?;
        models.push(outcome.model);
        Ok((summary.metrics, seconds))
    })?;
    Ok(points.into_iter().zip(models).collect())
}

pub fn cmd_curve(cfg: &PipelineConfig) -> Result<Vec<CurvePoint>> {
    let ds = load_dataset(cfg)?;
    let points: Vec<CurvePoint> = curve_points(cfg, &ds, &cfg.eval.curve_sizes)?.into_iter().map(|(p, _)| p).collect();
    eval::write_learning_curve_csv(reports_dir(cfg)?.join("learning_curve.csv"), &cfg.report_header(), &points)?;
    Ok(points)
}

/// Train on training systems with at most `threshold` atoms and report
/// size-bucketed test metrics.
pub fn cmd_transfer(cfg: &PipelineConfig) -> Result<TransferReport> {
    let ds = load_dataset(cfg)?;
    require_splits(&ds)?;
    let threshold = cfg.eval.transfer_threshold;
    let small = |split| -> Vec<Sample> {
        ds.samples(Some(split))
            .into_iter()
            .filter(|(r, _)| r.n_atoms <= threshold)
            .map(|(_, s)| s)
            .collect()
    };
    let (train_set, val_set) = (small(Split::Train), small(Split::Val));
    if train_set.is_empty() {
        return Err(Error::Pipeline(format!("no training systems with ≤ {threshold} atoms")));
    }
    let (outcome, _) = train_model(cfg, &train_set, &val_set)?;
    let report = transfer_report(&outcome.model, &ds, threshold, cfg.eval.batch_size)?;
    for n in &report.notes {
        log::warn!("{n}");
    }
    eval::write_transferability_csv(reports_dir(cfg)?.join("transferability.csv"), &cfg.report_header(), &report)?;
    Ok(report)
}

/// Size-bucketed test metrics of `model`.
pub fn transfer_report(model: &Model, ds: &Dataset, threshold: usize, batch_size: usize) -> Result<TransferReport> {
    let (test, strata) = split_samples(ds, Split::Test);
    let structures: Vec<Structure> = test.iter().map(|s| s.structure.clone()).collect();
    let preds: Vec<Labeled> = predict_batch(model, &structures, batch_size)?.into_iter().map(Labeled::from).collect();
    let barrier = held_out_barriers(model, ds, None, batch_size)?;
    let sizes: BTreeMap<&str, usize> = ds.records.iter().map(|r| (r.system_id.as_str(), r.n_atoms)).collect();
    let rows: Vec<(usize, BarrierRow)> = barrier
        .rows
        .into_iter()
        .map(|r| (sizes[r.system_id.as_str()], r))
        .collect();
    transferability(&preds, &labels_of(&test), &strata, &rows, threshold)
}
