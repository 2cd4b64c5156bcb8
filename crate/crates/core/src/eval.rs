//! Metrics, stratified splits, learning curves, size transferability and
//! barrier evaluation.
//!
//! Everything here works on materialised predictions; model evaluation is
//! done by the caller (see [`crate::mlp::predict_batch`]).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::hatbuild::barriers;
use crate::manifest::{ManifestRecord, Split, SystemKind};
use crate::rng::RngStream;

const EV_TO_MEV: f64 = 1000.0;

/// Energy and forces of one structure, either reference or predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub energy: f64,
    pub forces: Vec<Vec3>,
}

impl Labeled {
    pub fn new(energy: f64, forces: Vec<Vec3>) -> Self {
        Labeled { energy, forces }
    }
}

impl From<(f64, Vec<Vec3>)> for Labeled {
    fn from((energy, forces): (f64, Vec<Vec3>)) -> Self {
        Labeled { energy, forces }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|x| !x.is_finite() || *x < 0.0) || ((f[0] + f[1] + f[2]) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {}/{}/{} must be non-negative and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Split `n` items by `fractions` with largest-remainder rounding. When
/// `n` is at least the number of non-zero fractions, each of them gets one
/// item or more.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for k in 0..3 {
        counts[k] = exact[k].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>().min(n);
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[k] > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    let active: Vec<usize> = (0..3).filter(|&k| fractions[k] > 0.0).collect();
    if n >= active.len() {
        for &k in &active {
            if counts[k] == 0 {
                let donor = *active.iter().max_by_key(|&&j| (counts[j], std::cmp::Reverse(j))).unwrap();
                counts[donor] -= 1;
                counts[k] += 1;
            }
        }
    }
    counts
}

/// Assign splits per stratum and write them into the records.
///
/// Strata are keyed by system kind and system class (HAT type plus molecule
/// classes). Interpolation systems are never used for training; they are
/// divided between validation and test in the ratio of those fractions.
/// Returns the strata sizes.
pub fn stratified_split(records: &mut [ManifestRecord], spec: &SplitSpec) -> Result<BTreeMap<String, usize>> {
    spec.validate()?;
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry(r.stratum()).or_default().push(i);
    }
    let root = RngStream::new(spec.seed, "split");
    for (key, members) in &mut strata {
        members.sort_by(|&a, &b| records[a].system_id.cmp(&records[b].system_id));
        members.shuffle(&mut root.child(key).rng());
        let fractions = if key.starts_with(SystemKind::Interp.as_str()) {
            let held = spec.val + spec.test;
            if held <= 0.0 {
                return Err(Error::Config(
                    "interpolation systems need a non-zero val or test fraction".into(),
                ));
            }
            [0.0, spec.val / held, spec.test / held]
        } else {
            [spec.train, spec.val, spec.test]
        };
        let [n_train, n_val, _] = split_counts(members.len(), fractions);
        for (pos, &i) in members.iter().enumerate() {
            records[i].split = Some(if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    Ok(strata.into_iter().map(|(k, v)| (k, v.len())).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n_structures: usize,
    pub energy_mae_mev: f64,
    pub energy_per_atom_mae_mev: f64,
    pub force_mae_mev_ang: f64,
    /// Root mean square of reference force components.
    pub force_rms_mev_ang: f64,
    pub barrier_mae_mev: Option<f64>,
    pub n_barrier_systems: usize,
    pub counts: BTreeMap<String, usize>,
}

/// MAEs of `predictions` against `labels`. `strata` (one key per structure,
/// or empty) fills the per-stratum counts.
pub fn compute_metrics(predictions: &[Labeled], labels: &[Labeled], strata: &[String]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() || (!strata.is_empty() && strata.len() != labels.len()) {
        return Err(Error::LengthMismatch(format!(
            "{} predictions, {} labels, {} strata",
            predictions.len(),
            labels.len(),
            strata.len()
        )));
    }
    let (mut e, mut epa, mut f, mut f2, mut nf) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (k, (p, l)) in predictions.iter().zip(labels).enumerate() {
        if p.forces.len() != l.forces.len() || l.forces.is_empty() {
            return Err(Error::LengthMismatch(format!(
                "structure {k}: {} predicted vs {} reference forces",
                p.forces.len(),
                l.forces.len()
            )));
        }
        let de = (p.energy - l.energy).abs();
        e += de;
        epa += de / l.forces.len() as f64;
        for (pf, lf) in p.forces.iter().zip(&l.forces) {
            for c in 0..3 {
                f += (pf[c] - lf[c]).abs();
                f2 += lf[c] * lf[c];
            }
        }
        nf += 3 * l.forces.len();
    }
    let n = labels.len().max(1) as f64;
    let mut counts = BTreeMap::new();
    for s in strata {
        *counts.entry(s.clone()).or_insert(0) += 1;
    }
    Ok(MetricsReport {
        n_structures: labels.len(),
        energy_mae_mev: EV_TO_MEV * e / n,
        energy_per_atom_mae_mev: EV_TO_MEV * epa / n,
        force_mae_mev_ang: EV_TO_MEV * f / nf.max(1) as f64,
        force_rms_mev_ang: EV_TO_MEV * (f2 / nf.max(1) as f64).sqrt(),
        barrier_mae_mev: None,
        n_barrier_systems: 0,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierRow {
    pub system_id: String,
    pub ref_left_ev: f64,
    pub ref_right_ev: f64,
    pub pred_left_ev: f64,
    pub pred_right_ev: f64,
    /// Mean |ΔE| over the path frames.
    pub energy_mae_mev: f64,
}

impl BarrierRow {
    pub fn abs_errors(&self) -> [f64; 2] {
        [
            (self.pred_left_ev - self.ref_left_ev).abs(),
            (self.pred_right_ev - self.ref_right_ev).abs(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierReport {
    pub rows: Vec<BarrierRow>,
    /// Systems skipped for missing or non-finite energies.
    pub n_invalid: usize,
    pub mae_mev: Option<f64>,
}

/// Mean over both barriers of every row, in meV.
pub fn barrier_mae_mev(rows: &[BarrierRow]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let total: f64 = rows.iter().flat_map(|r| r.abs_errors()).sum();
    Some(EV_TO_MEV * total / (2 * rows.len()) as f64)
}

/// Compare predicted and reference path energies system by system.
///
/// `systems` yields `(system_id, reference energies, predicted energies)`;
/// a path with any missing or non-finite energy is skipped and counted.
pub fn evaluate_barriers<'a>(
    systems: impl IntoIterator<Item = (&'a str, &'a [Option<f64>], &'a [f64])>,
) -> BarrierReport {
    let mut rows = Vec::new();
    let mut n_invalid = 0;
    for (id, reference, predicted) in systems {
        let reference: Option<Vec<f64>> = reference.iter().map(|e| e.filter(|x| x.is_finite())).collect();
        let reference = match reference {
            Some(r) if r.len() == predicted.len() && r.len() >= 2 && predicted.iter().all(|x| x.is_finite()) => r,
            _ => {
                n_invalid += 1;
                continue;
            }
        };
        let (rl, rr) = barriers(&reference);
        let (pl, pr) = barriers(predicted);
        let mae = reference.iter().zip(predicted).map(|(a, b)| (a - b).abs()).sum::<f64>() / reference.len() as f64;
        rows.push(BarrierRow {
            system_id: id.to_owned(),
            ref_left_ev: rl,
            ref_right_ev: rr,
            pred_left_ev: pl,
            pred_right_ev: pr,
            energy_mae_mev: EV_TO_MEV * mae,
        });
    }
    let mae_mev = barrier_mae_mev(&rows);
    BarrierReport { rows, n_invalid, mae_mev }
}

/// Nested training subsets: one permutation of `0..n_train` per seed, cut at
/// each size. Sizes must not exceed `n_train`.
pub fn nested_subsets(n_train: usize, sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    if let Some(&s) = sizes.iter().find(|&&s| s > n_train || s == 0) {
        return Err(Error::Precondition(format!(
            "curve size {s} outside 1..={n_train} (train split size)"
        )));
    }
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut RngStream::new(seed, "curve-subsets").rng());
    Ok(sizes.iter().map(|&s| order[..s].to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub size: usize,
    pub metrics: MetricsReport,
    pub train_seconds: f64,
}

/// Train once per size on nested subsets and evaluate each model.
///
/// `train_and_eval` receives the subset indices and returns the metrics of
/// the trained model on the fixed test split. Only the call is timed.
pub fn learning_curve<F>(n_train: usize, sizes: &[usize], seed: u64, mut train_and_eval: F) -> Result<Vec<CurvePoint>>
where
    F: FnMut(usize, &[usize]) -> Result<(MetricsReport, f64)>,
{
    let subsets = nested_subsets(n_train, sizes, seed)?;
    let mut out = Vec::with_capacity(sizes.len());
    for (&size, subset) in sizes.iter().zip(&subsets) {
        let (metrics, train_seconds) = train_and_eval(size, subset)?;
        out.push(CurvePoint {
            size,
            metrics,
            train_seconds,
        });
    }
    Ok(out)
}

/// Run `f` and return its result with the elapsed wall-clock seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

/// Atom-count bucket `(lo, hi]` with inclusive upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Bucket {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl Bucket {
    pub fn contains(&self, n: usize) -> bool {
        n > self.lo && self.hi.is_none_or(|h| n <= h)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(h) => format!("{}-{}", self.lo + 1, h),
            None => format!(">{}", self.lo),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketReport {
    pub bucket: Bucket,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub threshold: usize,
    pub small: Option<MetricsReport>,
    pub large: Option<MetricsReport>,
    /// 10-atom-wide sub-buckets, non-empty only.
    pub buckets: Vec<BucketReport>,
    pub notes: Vec<String>,
}

fn subset_metrics(
    idx: &[usize],
    predictions: &[Labeled],
    labels: &[Labeled],
    strata: &[String],
    barrier_rows: &[(usize, BarrierRow)],
    bucket: Bucket,
) -> Result<MetricsReport> {
    let p: Vec<Labeled> = idx.iter().map(|&i| predictions[i].clone()).collect();
    let l: Vec<Labeled> = idx.iter().map(|&i| labels[i].clone()).collect();
    let s: Vec<String> = if strata.is_empty() {
        Vec::new()
    } else {
        idx.iter().map(|&i| strata[i].clone()).collect()
    };
    let mut m = compute_metrics(&p, &l, &s)?;
    let rows: Vec<BarrierRow> = barrier_rows
        .iter()
        .filter(|(n, _)| bucket.contains(*n))
        .map(|(_, r)| r.clone())
        .collect();
    m.barrier_mae_mev = barrier_mae_mev(&rows);
    m.n_barrier_systems = rows.len();
    Ok(m)
}

/// Size-bucketed metrics: `≤ threshold` and `> threshold` atoms plus 10-atom
/// sub-buckets. `barrier_rows` carries the atom count of each path.
pub fn transferability(
    predictions: &[Labeled],
    labels: &[Labeled],
    strata: &[String],
    barrier_rows: &[(usize, BarrierRow)],
    threshold: usize,
) -> Result<TransferReport> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions, {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let sizes: Vec<usize> = labels.iter().map(|l| l.forces.len()).collect();
    let pick = |b: Bucket| -> Vec<usize> { (0..sizes.len()).filter(|&i| b.contains(sizes[i])).collect() };
    let mut notes = Vec::new();
    let mut half = |b: Bucket, name: &str| -> Result<Option<MetricsReport>> {
        let idx = pick(b);
        if idx.is_empty() {
            notes.push(format!("{name} bucket ({}) is empty", b.label()));
            return Ok(None);
        }
        subset_metrics(&idx, predictions, labels, strata, barrier_rows, b).map(Some)
    };
    let small = half(Bucket { lo: 0, hi: Some(threshold) }, "small")?;
    let large = half(Bucket { lo: threshold, hi: None }, "large")?;
    let max = sizes.iter().copied().max().unwrap_or(0);
    let mut buckets = Vec::new();
    let mut lo = 0;
    while lo < max {
        let b = Bucket { lo, hi: Some(lo + 10) };
        let idx = pick(b);
        if !idx.is_empty() {
            buckets.push(BucketReport {
                bucket: b,
                metrics: subset_metrics(&idx, predictions, labels, strata, barrier_rows, b)?,
            });
        }
        lo += 10;
    }
    Ok(TransferReport {
        threshold,
        small,
        large,
        buckets,
        notes,
    })
}

/// First line of every CSV report.
pub fn report_header(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash} seed={seed}\n")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &str, columns: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut buf = header.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(columns)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_learning_curve_csv(path: impl AsRef<Path>, header: &str, points: &[CurvePoint]) -> Result<()> {
    write_csv(
        path.as_ref(),
        header,
        &["size", "energy_mae_mev", "force_mae_mev_ang", "barrier_mae_mev", "train_seconds"],
        points
            .iter()
            .map(|p| {
                vec![
                    p.size.to_string(),
                    p.metrics.energy_mae_mev.to_string(),
                    p.metrics.force_mae_mev_ang.to_string(),
                    fmt_opt(p.metrics.barrier_mae_mev),
                    p.train_seconds.to_string(),
                ]
            })
            .collect(),
    )
}

pub fn write_transferability_csv(path: impl AsRef<Path>, header: &str, report: &TransferReport) -> Result<()> {
    let row = |name: &str, b: Bucket, m: &MetricsReport| {
        vec![
            name.to_owned(),
            (b.lo + 1).to_string(),
            b.hi.map(|h| h.to_string()).unwrap_or_default(),
            m.n_structures.to_string(),
            m.energy_mae_mev.to_string(),
            m.energy_per_atom_mae_mev.to_string(),
            m.force_mae_mev_ang.to_string(),
            fmt_opt(m.barrier_mae_mev),
            m.n_barrier_systems.to_string(),
        ]
    };
    let mut rows = Vec::new();
    if let Some(m) = &report.small {
        rows.push(row("small", Bucket { lo: 0, hi: Some(report.threshold) }, m));
    }
    if let Some(m) = &report.large {
        rows.push(row("large", Bucket { lo: report.threshold, hi: None }, m));
    }
    for b in &report.buckets {
        rows.push(row("sub", b.bucket, &b.metrics));
    }
    write_csv(
        path.as_ref(),
        header,
        &[
            "bucket",
            "bucket_lo",
            "bucket_hi",
            "n_structures",
            "energy_mae_mev",
            "energy_per_atom_mae_mev",
            "force_mae_mev_ang",
            "barrier_mae_mev",
            "n_barrier_systems",
        ],
        rows,
    )
}

pub fn write_barriers_csv(path: impl AsRef<Path>, header: &str, rows: &[BarrierRow]) -> Result<()> {
    write_csv(
        path.as_ref(),
        header,
        &["system_id", "ref_left_ev", "ref_right_ev", "pred_left_ev", "pred_right_ev", "energy_mae_mev"],
        rows.iter()
            .map(|r| {
                vec![
                    r.system_id.clone(),
                    r.ref_left_ev.to_string(),
                    r.ref_right_ev.to_string(),
                    r.pred_left_ev.to_string(),
                    r.pred_right_ev.to_string(),
                    r.energy_mae_mev.to_string(),
                ]
            })
            .collect(),
    )
}
