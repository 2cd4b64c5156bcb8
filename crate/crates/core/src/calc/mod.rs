//! Energy/force calculators.
//!
//! Every calculator implements [`Calculator`] and is constructed by name from
//! a [`CalculatorSpec`] through the [`CalculatorRegistry`]. The built-in
//! entries are:
//!
//! | name        | implementation                                   |
//! |-------------|--------------------------------------------------|
//! | `surrogate` | [`SurrogateCalculator`], analytic reactive PES    |
//! | `external`  | [`ExternalCalculator`], file + subprocess protocol |
//! | `constant`  | [`ConstantCalculator`], flat surface               |
//! | `model`     | trained neural potential loaded from a checkpoint |

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::structure::Structure;

mod external;
mod surrogate;

pub use external::{ExternalCalculator, ExternalConfig, ExternalResult};
pub use surrogate::{
    morse, LjParams, MorseParams, SurrogateCalculator, SurrogateParams, TransferSite,
};

/// Result of a single energy/force evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CalcResult {
    pub energy: f64,
    pub forces: Vec<Vec3>,
    pub converged: bool,
    pub provenance: String,
    /// Diagnostic for failed evaluations.
    pub message: Option<String>,
}

impl CalcResult {
    pub fn ok(energy: f64, forces: Vec<Vec3>, provenance: impl Into<String>) -> Self {
        CalcResult {
            energy,
            forces,
            converged: true,
            provenance: provenance.into(),
            message: None,
        }
    }

    pub fn failed(n_atoms: usize, provenance: impl Into<String>, message: impl Into<String>) -> Self {
        CalcResult {
            energy: f64::NAN,
            forces: vec![[0.0; 3]; n_atoms],
            converged: false,
            provenance: provenance.into(),
            message: Some(message.into()),
        }
    }

    pub fn max_force_component(&self) -> f64 {
        self.forces
            .iter()
            .flatten()
            .fold(0.0_f64, |m, f| m.max(f.abs()))
    }
}

/// A potential energy surface. Implementations must be safe to call from
/// several worker threads at once.
pub trait Calculator: Send + Sync {
    /// Registry name of the implementation.
    fn name(&self) -> &str;

    /// Calculator id plus a hash of its parameters.
    fn provenance(&self) -> String;

    /// Energy (eV) and forces (eV/Å). Hard errors (bad input, missing
    /// parameters) are `Err`; engine failures are reported as
    /// `converged = false`.
    fn evaluate(&self, s: &Structure) -> Result<CalcResult>;
}

/// Evaluate many structures, preserving input order. Errors become
/// `converged = false` entries; nothing is dropped.
pub fn batch_evaluate(
    structures: &[Structure],
    calc: &dyn Calculator,
    workers: usize,
) -> Vec<CalcResult> {
    let eval = |s: &Structure| {
        calc.evaluate(s)
            .unwrap_or_else(|e| CalcResult::failed(s.len(), calc.provenance(), e.to_string()))
    };
    if workers <= 1 || structures.len() <= 1 {
        return structures.iter().map(eval).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| structures.par_iter().map(eval).collect()),
        Err(_) => structures.iter().map(eval).collect(),
    }
}

/// Flat potential energy surface: constant energy, zero forces.
#[derive(Debug, Clone)]
pub struct ConstantCalculator {
    pub energy: f64,
}

impl Calculator for ConstantCalculator {
    fn name(&self) -> &str {
        "constant"
    }

    fn provenance(&self) -> String {
        format!("constant:{}", self.energy)
    }

    fn evaluate(&self, s: &Structure) -> Result<CalcResult> {
        Ok(CalcResult::ok(self.energy, vec![[0.0; 3]; s.len()], self.provenance()))
    }
}

/// Calculator selection as it appears in pipeline configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalculatorSpec {
    /// Registry name.
    pub kind: String,
    /// Surrogate: smooth-min transfer coupling (eV).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hat_delta_ev: Option<f64>,
    /// External: command template with `{input}` and `{output}` placeholders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// External: per-structure timeout in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_s: Option<f64>,
    /// External: result cache directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// External: scratch directory for per-task subdirectories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scratch_dir: Option<PathBuf>,
    /// Constant: energy value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_ev: Option<f64>,
    /// Model: checkpoint path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl CalculatorSpec {
    pub fn named(kind: impl Into<String>) -> Self {
        CalculatorSpec {
            kind: kind.into(),
            hat_delta_ev: None,
            command: None,
            timeout_s: None,
            cache_dir: None,
            scratch_dir: None,
            energy_ev: None,
            checkpoint: None,
        }
    }

    pub fn surrogate() -> Self {
        Self::named("surrogate")
    }

    /// Resolve relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &std::path::Path) {
        for p in [&mut self.cache_dir, &mut self.scratch_dir, &mut self.checkpoint]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

impl Default for CalculatorSpec {
    fn default() -> Self {
        Self::surrogate()
    }
}

pub type CalculatorFactory = fn(&CalculatorSpec) -> Result<Arc<dyn Calculator>>;

/// Name → constructor table for calculators.
#[derive(Clone)]
pub struct CalculatorRegistry {
    factories: BTreeMap<String, CalculatorFactory>,
}

impl CalculatorRegistry {
    pub fn empty() -> Self {
        CalculatorRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register("surrogate", build_surrogate);
        reg.register("external", build_external);
        reg.register("constant", build_constant);
        reg.register("model", crate::mlp::build_model_calculator);
        reg
    }

    /// Register (or replace) a factory.
    pub fn register(&mut self, name: &str, factory: CalculatorFactory) {
        self.factories.insert(name.to_owned(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, spec: &CalculatorSpec) -> Result<Arc<dyn Calculator>> {
        let factory = self
            .factories
            .get(&spec.kind)
            .ok_or_else(|| Error::UnknownCalculator(spec.kind.clone()))?;
        factory(spec)
    }
}

impl Default for CalculatorRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

fn build_surrogate(spec: &CalculatorSpec) -> Result<Arc<dyn Calculator>> {
    let mut params = SurrogateParams::default();
    if let Some(delta) = spec.hat_delta_ev {
        params.hat_delta = delta;
    }
    Ok(Arc::new(SurrogateCalculator::new(params)?))
}

fn build_external(spec: &CalculatorSpec) -> Result<Arc<dyn Calculator>> {
    let command = spec
        .command
        .clone()
        .ok_or_else(|| Error::Config("external calculator needs `command`".into()))?;
    let mut cfg = ExternalConfig::new(command);
    if let Some(t) = spec.timeout_s {
        cfg.timeout = std::time::Duration::from_secs_f64(t);
    }
    if let Some(d) = &spec.cache_dir {
        cfg.cache_dir = d.clone();
    }
    if let Some(d) = &spec.scratch_dir {
        cfg.scratch_dir = d.clone();
    }
    Ok(Arc::new(ExternalCalculator::new(cfg)))
}

fn build_constant(spec: &CalculatorSpec) -> Result<Arc<dyn Calculator>> {
    Ok(Arc::new(ConstantCalculator {
        energy: spec.energy_ev.unwrap_or(0.0),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FailsOnHydrogen;

    impl Calculator for FailsOnHydrogen {
        fn name(&self) -> &str {
            "fails-on-h"
        }
        fn provenance(&self) -> String {
            "fails-on-h".into()
        }
        fn evaluate(&self, s: &Structure) -> Result<CalcResult> {
            if s.elements().contains(&1) {
                Err(Error::Calculator("hydrogen not supported".into()))
            } else {
                Ok(CalcResult::ok(s.len() as f64, vec![[0.0; 3]; s.len()], "fails-on-h"))
            }
        }
    }

    fn dimer(z: u8, d: f64) -> Structure {
        Structure::new(vec![z, z], vec![[0.0; 3], [0.0, 0.0, d]]).unwrap()
    }

    #[test]
    fn registry_builds_by_name() {
        let reg = CalculatorRegistry::with_builtins();
        assert_eq!(
            reg.names().collect::<Vec<_>>(),
            vec!["constant", "external", "model", "surrogate"]
        );
        let calc = reg.build(&CalculatorSpec::surrogate()).unwrap();
        assert_eq!(calc.name(), "surrogate");
        assert!(matches!(
            reg.build(&CalculatorSpec::named("dft")),
            Err(Error::UnknownCalculator(_))
        ));
        assert!(reg.build(&CalculatorSpec::named("external")).is_err());
    }

    #[test]
    fn custom_registration() {
        fn build(_: &CalculatorSpec) -> Result<Arc<dyn Calculator>> {
            Ok(Arc::new(FailsOnHydrogen))
        }
        let mut reg = CalculatorRegistry::empty();
        reg.register("fails-on-h", build);
        assert_eq!(reg.build(&CalculatorSpec::named("fails-on-h")).unwrap().name(), "fails-on-h");
    }

    #[test]
    fn batch_preserves_order_and_failures() {
        let calc = FailsOnHydrogen;
        assert!(batch_evaluate(&[], &calc, 4).is_empty());
        let items: Vec<Structure> = (0..10)
            .map(|i| if i == 6 { dimer(1, 0.74) } else { dimer(6, 1.5 + i as f64 * 0.01) })
            .collect();
        let results = batch_evaluate(&items, &calc, 3);
        assert_eq!(results.len(), 10);
        assert_eq!(results.iter().filter(|r| !r.converged).count(), 1);
        assert!(!results[6].converged);
        assert!(results[6].message.as_deref().unwrap().contains("hydrogen"));
    }

    #[test]
    fn batch_is_worker_count_independent() {
        let calc = SurrogateCalculator::default();
        let mut rng = crate::rng::RngStream::root(11).rng();
        let items: Vec<Structure> = (0..100)
            .map(|_| {
                use rand::Rng;
                let d = rng.random_range(1.0..2.5);
                let s = dimer(6, d);
                let t: f64 = rng.random_range(-0.2..0.2);
                s.clone().with_position(1, [t, 0.0, d]).unwrap()
            })
            .collect();
        let a = batch_evaluate(&items, &calc, 1);
        let b = batch_evaluate(&items, &calc, 8);
        assert_eq!(a, b);
    }

    #[test]
    fn spec_rejects_unknown_keys() {
        let ok: CalculatorSpec = toml::from_str("kind = \"surrogate\"\nhat_delta_ev = 0.2").unwrap();
        assert_eq!(ok.hat_delta_ev, Some(0.2));
        assert!(toml::from_str::<CalculatorSpec>("kind = \"surrogate\"\nbogus = 1").is_err());
    }
}
