//! Config-driven orchestration: generate → label → split → train → evaluate.
//!
//! Every command reads one [`PipelineConfig`] (TOML). Relative paths in the
//! file are resolved against the file's directory. Section seeds (`model`,
//! `train`, `split`) are overwritten with the top-level `seed`.

mod commands;
mod generate;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calc::CalculatorSpec;
use crate::error::{Error, Result};
use crate::eval::SplitSpec;
use crate::hatbuild::{ConfigOptions, InterOptions, RoleProbabilities, TransferPolicy};
use crate::mlp::{ModelConfig, TrainConfig};
use crate::nms::NmsConfig;
use crate::templates::MixingPolicy;

pub use commands::{
    cmd_barriers, cmd_curve, cmd_eval, cmd_label, cmd_split, cmd_train, cmd_transfer, curve_points, evaluate_model,
    held_out_barriers, labels_of, train_model, transfer_report, EvalSummary, LabelSummary, TrainSummary, CHECKPOINT_FILE,
};
pub use generate::{cmd_generate, BuiltSystem, GenerateSummary, Generator, RejectionStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateSection {
    /// Tags every selected template must carry (`aminoacid`, `capped`, ...).
    pub filter: Vec<String>,
    /// Extra extended-XYZ template files.
    pub files: Vec<PathBuf>,
    /// Include the packaged library.
    pub packaged: bool,
    /// Largest assembled radical system.
    pub max_atoms: Option<usize>,
    /// System-class weights; empty means all classes weighted equally.
    pub mixing: BTreeMap<String, f64>,
}

impl Default for TemplateSection {
    fn default() -> Self {
        TemplateSection {
            filter: Vec::new(),
            files: Vec::new(),
            packaged: true,
            max_atoms: None,
            mixing: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsSection {
    pub temperature_k: f64,
    pub max_bond_strain: f64,
    pub max_de_ev: f64,
    /// Force tolerance of the template relaxation (eV/Å).
    pub relax_tol: f64,
}

impl Default for NmsSection {
    fn default() -> Self {
        let d = NmsConfig::default();
        NmsSection {
            temperature_k: d.temperature_k,
            max_bond_strain: d.max_bond_strain,
            max_de_ev: d.max_de_ev,
            relax_tol: 1e-4,
        }
    }
}

impl NmsSection {
    pub fn nms_config(&self) -> NmsConfig {
        NmsConfig {
            temperature_k: self.temperature_k,
            max_bond_strain: self.max_bond_strain,
            max_de_ev: self.max_de_ev,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HatSection {
    /// Single reaction configurations to generate.
    pub n_configs: usize,
    /// Interpolation systems to generate.
    pub n_interp: usize,
    /// Attempts per system before the target is declared unreachable.
    pub max_attempts: usize,
    /// Consecutive attempts that keep one class draw before redrawing.
    pub attempts_per_draw: usize,
    pub donor_elements: Vec<u8>,
    pub intra_min_bonds: usize,
    pub intra_max_distance: f64,
    pub max_de_ev: f64,
    pub p_start: f64,
    pub p_end: f64,
    pub p_sampled: f64,
    pub sphere_fraction: f64,
    pub min_distance: f64,
    pub chi2_dof: f64,
    pub chi2_scale: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub max_placements: usize,
    pub cone_half_angle_deg: f64,
    pub clash_distance: f64,
}

impl Default for HatSection {
    fn default() -> Self {
        let p = TransferPolicy::default();
        let c = ConfigOptions::default();
        let i = InterOptions::default();
        HatSection {
            n_configs: 500,
            n_interp: 50,
            max_attempts: 200,
            attempts_per_draw: 10,
            donor_elements: p.donor_elements,
            intra_min_bonds: p.intra_min_bonds,
            intra_max_distance: p.intra_max_distance,
            max_de_ev: c.max_de_ev,
            p_start: c.roles.start,
            p_end: c.roles.end,
            p_sampled: c.roles.sampled,
            sphere_fraction: c.sphere_fraction,
            min_distance: c.min_distance,
            chi2_dof: i.chi2_dof,
            chi2_scale: i.chi2_scale,
            d_min: i.d_min,
            d_max: i.d_max,
            max_placements: i.max_placements,
            cone_half_angle_deg: i.cone_half_angle.to_degrees(),
            clash_distance: i.clash_distance,
        }
    }
}

impl HatSection {
    pub fn policy(&self) -> TransferPolicy {
        TransferPolicy {
            donor_elements: self.donor_elements.clone(),
            intra_min_bonds: self.intra_min_bonds,
            intra_max_distance: self.intra_max_distance,
        }
    }

    pub fn config_options(&self) -> ConfigOptions {
        ConfigOptions {
            roles: RoleProbabilities {
                start: self.p_start,
                end: self.p_end,
                sampled: self.p_sampled,
            },
            sphere_fraction: self.sphere_fraction,
            min_distance: self.min_distance,
            max_de_ev: self.max_de_ev,
            ..ConfigOptions::default()
        }
    }

    pub fn inter_options(&self) -> InterOptions {
        InterOptions {
            chi2_dof: self.chi2_dof,
            chi2_scale: self.chi2_scale,
            d_min: self.d_min,
            d_max: self.d_max,
            max_placements: self.max_placements,
            cone_half_angle: self.cone_half_angle_deg.to_radians(),
            clash_distance: self.clash_distance,
        }
    }

    fn validate(&self) -> Result<()> {
        let p = [self.p_start, self.p_end, self.p_sampled];
        if p.iter().any(|x| *x < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("hat.p_start + p_end + p_sampled must be 1".into()));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::Config("hat.d_min must be positive and below d_max".into()));
        }
        if self.max_attempts == 0 || self.attempts_per_draw == 0 {
            return Err(Error::Config("hat.max_attempts and attempts_per_draw must be positive".into()));
        }
        if self.donor_elements.is_empty() {
            return Err(Error::Config("hat.donor_elements is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelSection {
    /// Relabel with this calculator instead of `[calculator]`.
    pub calculator: Option<CalculatorSpec>,
    /// Highest tolerated fraction of failed frames.
    pub max_failure_rate: f64,
}

impl Default for LabelSection {
    fn default() -> Self {
        LabelSection {
            calculator: None,
            max_failure_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub curve_sizes: Vec<usize>,
    /// Atom count separating the small and large buckets (small inclusive).
    pub transfer_threshold: usize,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            curve_sizes: vec![100, 200],
            transfer_threshold: 50,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Threads for generation and labeling; training is single-threaded.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub templates: TemplateSection,
    #[serde(default)]
    pub nms: NmsSection,
    #[serde(default)]
    pub hat: HatSection,
    #[serde(default)]
    pub calculator: CalculatorSpec,
    #[serde(default)]
    pub label: LabelSection,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl PipelineConfig {
    /// Defaults for everything except the seed.
    pub fn with_seed(seed: u64) -> Self {
        let mut c: PipelineConfig = toml::from_str(&format!("seed = {seed}")).expect("minimal config parses");
        c.sync_seeds();
        c
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut c: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.resolve_paths(base);
        c.sync_seeds();
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.sync_seeds();
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(out) = &o.out_dir {
            self.out_dir = out.clone();
        }
        self.validate()
    }

    fn sync_seeds(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.split.seed = self.seed;
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.out_dir);
        self.templates.files.iter_mut().for_each(join);
        self.calculator.resolve_paths(base);
        if let Some(c) = &mut self.label.calculator {
            c.resolve_paths(base);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.hat.validate()?;
        self.split.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.label.max_failure_rate) {
            return Err(Error::Config("label.max_failure_rate must be in [0, 1]".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn mixing_policy(&self) -> MixingPolicy {
        MixingPolicy {
            weights: self.templates.mixing.clone(),
        }
    }

    /// Hash of the settings that determine outputs. Output location and
    /// worker count are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.workers = 1;
        let text = serde_json::to_string(&c).expect("config serialises");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join(CHECKPOINT_FILE)
    }

    pub fn report_header(&self) -> String {
        crate::eval::report_header(&self.hash(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = PipelineConfig::from_toml("seed = 5\n", Path::new("/runs")).unwrap();
        assert_eq!(c.out_dir, PathBuf::from("/runs/out"));
        assert_eq!((c.model.seed, c.train.seed, c.split.seed), (5, 5, 5));
        assert_eq!(c.hat, HatSection::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["seed = 1\nsed = 2\n", "seed = 1\n[hat]\nn_config = 3\n", "seed = 1\n[model]\nfeatures = 3\n"] {
            let err = PipelineConfig::from_toml(text, Path::new(".")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{err}");
        }
        assert!(PipelineConfig::from_toml("out_dir = \"x\"\n", Path::new(".")).is_err());
    }

    #[test]
    fn hash_ignores_location_and_workers() {
        let a = PipelineConfig::from_toml("seed = 1\nworkers = 3\n", Path::new("/a")).unwrap();
        let b = PipelineConfig::from_toml("seed = 1\nworkers = 1\n", Path::new("/b")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = b.clone();
        c.apply(&Overrides { seed: Some(2), ..Default::default() }).unwrap();
        assert_ne!(c.hash(), b.hash());
        assert_eq!(c.train.seed, 2);
    }

    #[test]
    fn calculator_paths_resolve_against_config_dir() {
        let text = "seed = 1\n[calculator]\nkind = \"external\"\ncommand = \"x {input} {output}\"\ncache_dir = \"cache\"\n";
        let c = PipelineConfig::from_toml(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.calculator.cache_dir, Some(PathBuf::from("/cfg/cache")));
    }
}
