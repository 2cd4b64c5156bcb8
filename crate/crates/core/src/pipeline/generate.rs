//! templates → relax → NMS → radical systems → reaction configurations.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use super::PipelineConfig;
use crate::calc::{Calculator, CalculatorRegistry};
use crate::error::{Error, Result};
use crate::hatbuild::{
    self, assemble_inter_system_at, build_intra_system, check_clashes, interpolation_frames, radicalize,
    sample_reaction_configuration, sample_transfer_distance, ConfigOptions, ConfigRejection, FrameRole, HatType,
    InterOptions, Molecule, RadicalSystem, TransferPolicy,
};
use crate::manifest::{Dataset, ManifestRecord, SystemKind, CONFIGS_FILE, INTERP_FILE};
use crate::nms::{self, NmsConfig, NmsOutcome, NmsRejection, NormalModes};
use crate::rng::RngStream;
use crate::templates::{self, PairSampler, SystemDraw, Template};
use crate::xyz::Frame;

pub const TAG_SYSTEM_ID: &str = hatbuild::TAG_SYSTEM_ID;

/// Per-filter rejection counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RejectionStats {
    pub counts: BTreeMap<&'static str, u64>,
}

impl RejectionStats {
    pub fn bump(&mut self, key: &'static str) {
        *self.counts.entry(key).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: &RejectionStats) {
        for (k, v) in &other.counts {
            *self.counts.entry(k).or_insert(0) += v;
        }
    }

    pub fn get(&self, key: &str) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    /// `key=value` lines.
    pub fn lines(&self) -> Vec<String> {
        self.counts.iter().map(|(k, v)| format!("{k}={v}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedFrame {
    pub structure: crate::structure::Structure,
    pub role: FrameRole,
}

/// An accepted system with its (unlabeled, tagged) frames.
#[derive(Debug, Clone)]
pub struct BuiltSystem {
    pub system: RadicalSystem,
    pub frames: Vec<GeneratedFrame>,
}

/// Normal modes of every template, computed once.
pub struct Generator {
    sampler: PairSampler,
    molecules: Vec<Molecule>,
    modes: Vec<NormalModes>,
    calc: Arc<dyn Calculator>,
    nms: NmsConfig,
    policy: TransferPolicy,
    inter: InterOptions,
    config_opts: ConfigOptions,
    max_attempts: usize,
    attempts_per_draw: usize,
    stream: RngStream,
}

const NMS_TRIES: usize = 20;

impl Generator {
    pub fn new(cfg: &PipelineConfig, calc: Arc<dyn Calculator>) -> Result<Self> {
        let filter: Vec<&str> = cfg.templates.filter.iter().map(String::as_str).collect();
        let mut selected: Vec<Template> = if cfg.templates.packaged {
            templates::list_templates(&filter)?
        } else {
            Vec::new()
        };
        for f in &cfg.templates.files {
            selected.extend(
                templates::load_template_file(f)?
                    .into_iter()
                    .filter(|t| filter.iter().all(|tag| t.has_tag(tag))),
            );
        }
        selected.sort_by(|a, b| a.name.cmp(&b.name));
        let sampler = PairSampler::new(selected, &cfg.mixing_policy(), cfg.templates.max_atoms)?;
        let tol = cfg.nms.relax_tol;
        let modes: Vec<NormalModes> = pool(cfg.workers)?.install(|| {
            sampler
                .templates()
                .par_iter()
                .map(|t| {
                    nms::modes_for(&t.structure, calc.as_ref(), tol)
                        .map_err(|e| Error::Pipeline(format!("template {}: {e}", t.name)))
                })
                .collect::<Result<_>>()
        })?;
        let molecules = sampler.templates().iter().map(Molecule::from_template).collect();
        Ok(Generator {
            sampler,
            molecules,
            modes,
            calc,
            nms: cfg.nms.nms_config(),
            policy: cfg.hat.policy(),
            inter: cfg.hat.inter_options(),
            config_opts: cfg.hat.config_options(),
            max_attempts: cfg.hat.max_attempts,
            attempts_per_draw: cfg.hat.attempts_per_draw,
            stream: RngStream::new(cfg.seed, "generate"),
        })
    }

    pub fn sampler(&self) -> &PairSampler {
        &self.sampler
    }

    pub fn modes(&self) -> &[NormalModes] {
        &self.modes
    }

    pub fn calculator(&self) -> &dyn Calculator {
        self.calc.as_ref()
    }

    /// One NMS-displaced copy of template `t`, or `None` after repeated
    /// rejections.
    fn sample_molecule(&self, t: usize, rng: &mut ChaCha20Rng, stats: &mut RejectionStats) -> Result<Option<Molecule>> {
        for _ in 0..NMS_TRIES {
            match nms::nms_sample(&self.modes[t], rng, self.calc.as_ref(), &self.nms)? {
                NmsOutcome::Accepted(s) => {
                    stats.bump("nms_accepted");
                    return Ok(Some(self.molecules[t].with_geometry(s.structure)?));
                }
                NmsOutcome::Rejected(r) => stats.bump(match r {
                    NmsRejection::BondStrain { .. } => "nms_bond_strain",
                    NmsRejection::Energy { .. } => "nms_energy",
                    NmsRejection::CalculatorFailed(_) => "nms_calc_failed",
                }),
            }
        }
        Ok(None)
    }

    fn remove_random_h(m: &Molecule, rng: &mut ChaCha20Rng) -> Result<Option<Molecule>> {
        if m.eligible_h.is_empty() {
            return Ok(None);
        }
        let h = m.eligible_h[rng.random_range(0..m.eligible_h.len())];
        radicalize(m, h).map(Some)
    }

    fn assemble(&self, draw: &SystemDraw, d: f64, rng: &mut ChaCha20Rng, stats: &mut RejectionStats) -> Result<Option<RadicalSystem>> {
        let Some(donor) = self.sample_molecule(draw.donor, rng, stats)? else {
            return Ok(None);
        };
        if draw.hat_type == "intra" {
            let Some(radical) = Self::remove_random_h(&donor, rng)? else {
                stats.bump("no_radical_site");
                return Ok(None);
            };
            let sys = build_intra_system(&radical, &self.policy, rng)?;
            if sys.is_none() {
                stats.bump("no_transfer_pair");
            }
            return Ok(sys);
        }
        let Some(acceptor) = self.sample_molecule(draw.acceptor, rng, stats)? else {
            return Ok(None);
        };
        let Some(radical) = Self::remove_random_h(&acceptor, rng)? else {
            stats.bump("no_radical_site");
            return Ok(None);
        };
        let sys = assemble_inter_system_at(&donor, &radical, d, &self.policy, &self.inter, rng)?;
        if sys.is_none() {
            stats.bump("placement_failed");
        }
        Ok(sys)
    }

    /// The configuration energy window applied to every path frame.
    fn path_energy_rejection(&self, frames: &[crate::structure::Structure]) -> Option<&'static str> {
        let results = crate::calc::batch_evaluate(frames, self.calc.as_ref(), 1);
        if results.iter().any(|r| !r.converged) {
            return Some("config_calc_failed");
        }
        let e: Vec<f64> = results.iter().map(|r| r.energy).collect();
        let (left, right) = hatbuild::barriers(&e);
        (left.min(right) > self.config_opts.max_de_ev).then_some("energy_filter")
    }

    /// Build system `index` of `kind`. Each slot has its own random stream,
    /// so results do not depend on scheduling. The inter H–radical distance
    /// is drawn once per slot and kept across retries, so accepted
    /// distances follow the sampling distribution exactly.
    pub fn build(&self, kind: SystemKind, index: usize, stats: &mut RejectionStats) -> Result<Option<BuiltSystem>> {
        let mut rng = self.stream.child(format!("{}-{index}", kind.as_str())).rng();
        let d = sample_transfer_distance(&mut rng, &self.inter);
        let mut draw = self.sampler.sample(&mut rng);
        for attempt in 0..self.max_attempts {
            if attempt > 0 && attempt % self.attempts_per_draw == 0 {
                draw = self.sampler.sample(&mut rng);
            }
            stats.bump("attempts");
            let Some(sys) = self.assemble(&draw, d, &mut rng, stats)? else {
                continue;
            };
            let built = match kind {
                SystemKind::Single => {
                    match sample_reaction_configuration(&sys, &mut rng, Some(self.calc.as_ref()), &self.config_opts)? {
                        Ok(conf) => BuiltSystem {
                            frames: vec![GeneratedFrame {
                                structure: conf.structure,
                                role: conf.role,
                            }],
                            system: sys,
                        },
                        Err(rej) => {
                            stats.bump(rejection_key(&rej));
                            continue;
                        }
                    }
                }
                SystemKind::Interp => {
                    let frames = interpolation_frames(&sys)?;
                    let mut clash = false;
                    for f in &frames {
                        if check_clashes(&sys, f, &self.config_opts)?.is_some() {
                            clash = true;
                            break;
                        }
                    }
                    if clash {
                        stats.bump("clash");
                        continue;
                    }
                    if let Some(key) = self.path_energy_rejection(&frames) {
                        stats.bump(key);
                        continue;
                    }
                    let n = frames.len();
                    let roles = (0..n).map(|k| match k {
                        0 => FrameRole::Start,
                        k if k + 1 == n => FrameRole::End,
                        _ => FrameRole::Interp,
                    });
                    BuiltSystem {
                        frames: frames
                            .into_iter()
                            .zip(roles)
                            .map(|(structure, role)| GeneratedFrame { structure, role })
                            .collect(),
                        system: sys,
                    }
                }
            };
            stats.bump(match built.system.hat_type {
                HatType::Intra => "accepted_intra",
                HatType::Inter => "accepted_inter",
            });
            return Ok(Some(built));
        }
        stats.bump("budget_exhausted");
        Ok(None)
    }
}

fn rejection_key(r: &ConfigRejection) -> &'static str {
    match r {
        ConfigRejection::Clash { .. } => "clash",
        ConfigRejection::Energy { .. } => "energy_filter",
        ConfigRejection::CalculatorFailed(_) => "config_calc_failed",
    }
}

pub(crate) fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Pipeline(format!("thread pool: {e}")))
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub n_single: usize,
    pub n_interp: usize,
    /// Slots that ran out of attempts.
    pub n_failed: usize,
    pub stats: RejectionStats,
}

impl GenerateSummary {
    pub fn check_complete(&self, max_attempts: usize) -> Result<()> {
        if self.n_failed > 0 {
            return Err(Error::Pipeline(format!(
                "{} systems unreachable within {max_attempts} attempts; partial output written",
                self.n_failed
            )));
        }
        Ok(())
    }
}

impl GenerateSummary {
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("single_systems={}", self.n_single),
            format!("interp_systems={}", self.n_interp),
            format!("unreachable_systems={}", self.n_failed),
        ];
        out.extend(self.stats.lines());
        out
    }
}

fn record_for(id: String, kind: SystemKind, built: &BuiltSystem, offset: usize) -> ManifestRecord {
    let sys = &built.system;
    ManifestRecord {
        system_id: id,
        kind,
        hat_type: sys.hat_type,
        system_class: sys.system_class.clone(),
        molecule_ids: sys.molecule_ids.clone(),
        n_atoms: sys.structure.len(),
        h_index: sys.h_index,
        donor_index: sys.donor_index,
        acceptor_index: sys.acceptor_index,
        transfer_distance_ang: sys.transfer_distance(),
        frame_file: match kind {
            SystemKind::Single => CONFIGS_FILE.into(),
            SystemKind::Interp => INTERP_FILE.into(),
        },
        frame_offset: offset,
        frame_roles: built.frames.iter().map(|f| f.role).collect(),
        split: None,
        label: None,
        barrier_left_ev: None,
        barrier_right_ev: None,
    }
}

/// Build all systems and write the unlabeled dataset. Systems that run out
/// of attempts are left out and counted in `n_failed`.
pub fn cmd_generate(cfg: &PipelineConfig, registry: &CalculatorRegistry) -> Result<GenerateSummary> {
    let calc = registry.build(&cfg.calculator)?;
    let generator = Generator::new(cfg, calc)?;
    let slots: Vec<(SystemKind, usize)> = (0..cfg.hat.n_configs)
        .map(|i| (SystemKind::Single, i))
        .chain((0..cfg.hat.n_interp).map(|i| (SystemKind::Interp, i)))
        .collect();
    let results: Vec<Result<(Option<BuiltSystem>, RejectionStats)>> = pool(cfg.workers)?.install(|| {
        slots
            .par_iter()
            .map(|&(kind, i)| {
                let mut stats = RejectionStats::default();
                let built = generator.build(kind, i, &mut stats)?;
                Ok((built, stats))
            })
            .collect()
    });

    let mut ds = Dataset {
        dir: cfg.dataset_dir(),
        records: Vec::new(),
        configs: Vec::new(),
        interp: Vec::new(),
    };
    let mut summary = GenerateSummary {
        n_single: 0,
        n_interp: 0,
        n_failed: 0,
        stats: RejectionStats::default(),
    };
    for (&(kind, i), res) in slots.iter().zip(results) {
        let (built, stats) = res?;
        summary.stats.merge(&stats);
        let Some(built) = built else {
            summary.n_failed += 1;
            continue;
        };
        let id = format!("{}-{i:06}", kind.as_str());
        let frames = match kind {
            SystemKind::Single => &mut ds.configs,
            SystemKind::Interp => &mut ds.interp,
        };
        ds.records.push(record_for(id.clone(), kind, &built, frames.len()));
        for f in built.frames {
            frames.push(Frame::unlabeled(f.structure.with_tag(TAG_SYSTEM_ID, id.clone())));
        }
        match kind {
            SystemKind::Single => summary.n_single += 1,
            SystemKind::Interp => summary.n_interp += 1,
        }
    }
    ds.save()?;
    Ok(summary)
}
