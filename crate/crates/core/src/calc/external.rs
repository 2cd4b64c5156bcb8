//! File + subprocess protocol for external quantum-chemistry engines.
//!
//! For every structure the calculator writes an extended-XYZ input, runs the
//! configured command through `sh -c` with `{input}` and `{output}`
//! substituted, and reads a JSON result:
//!
//! ```json
//! {"energy_ev": -1.0, "forces_ev_per_ang": [[0.0, 0.0, 0.0]], "converged": true}
//! ```
//!
//! Parsed results are cached under `cache/<hash[0:2]>/<hash>.json`, keyed by
//! a SHA-256 (256-bit) digest of the command template and the canonicalised
//! structure (elements, exact coordinate bits, charge, multiplicity).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CalcResult, Calculator};
use crate::error::{Error, Result};
use crate::structure::Structure;
use crate::xyz::{self, Frame};

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalConfig {
    pub command: String,
    pub timeout: Duration,
    pub cache_dir: PathBuf,
    pub scratch_dir: PathBuf,
}

impl ExternalConfig {
    pub fn new(command: impl Into<String>) -> Self {
        ExternalConfig {
            command: command.into(),
            timeout: Duration::from_secs(600),
            cache_dir: PathBuf::from("cache"),
            scratch_dir: std::env::temp_dir().join("hatlab-scratch"),
        }
    }
}

/// Result file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalResult {
    pub energy_ev: f64,
    pub forces_ev_per_ang: Vec<[f64; 3]>,
    pub converged: bool,
}

pub struct ExternalCalculator {
    config: ExternalConfig,
    provenance: String,
    launches: AtomicUsize,
    task_counter: AtomicUsize,
    cache_lock: Mutex<()>,
}

impl ExternalCalculator {
    pub fn new(config: ExternalConfig) -> Self {
        let digest = Sha256::digest(config.command.as_bytes());
        let provenance = format!("external:{}", hex::encode(&digest[..8]));
        ExternalCalculator {
            config,
            provenance,
            launches: AtomicUsize::new(0),
            task_counter: AtomicUsize::new(0),
            cache_lock: Mutex::new(()),
        }
    }

    /// Number of subprocesses launched so far (cache hits launch none).
    pub fn subprocess_calls(&self) -> usize {
        self.launches.load(Ordering::SeqCst)
    }

    /// Hex SHA-256 of the canonicalised input.
    pub fn structure_hash(&self, s: &Structure) -> String {
        let mut h = Sha256::new();
        h.update(self.config.command.as_bytes());
        h.update([0u8]);
        h.update(s.charge().to_le_bytes());
        h.update(s.multiplicity().to_le_bytes());
        for (&z, p) in s.elements().iter().zip(s.positions()) {
            h.update([z]);
            for x in p {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cache_path(&self, hash: &str) -> PathBuf {
        self.config.cache_dir.join(&hash[..2]).join(format!("{hash}.json"))
    }

    fn to_calc_result(&self, s: &Structure, r: ExternalResult) -> CalcResult {
        if r.forces_ev_per_ang.len() != s.len() {
            return CalcResult::failed(
                s.len(),
                self.provenance.clone(),
                format!(
                    "result has {} force rows for {} atoms",
                    r.forces_ev_per_ang.len(),
                    s.len()
                ),
            );
        }
        let finite = r.energy_ev.is_finite() && r.forces_ev_per_ang.iter().flatten().all(|x| x.is_finite());
        if r.converged && !finite {
            return CalcResult::failed(s.len(), self.provenance.clone(), "non-finite values in result");
        }
        CalcResult {
            energy: r.energy_ev,
            forces: r.forces_ev_per_ang,
            converged: r.converged,
            provenance: self.provenance.clone(),
            message: (!r.converged).then(|| "engine reported non-convergence".to_owned()),
        }
    }

    fn read_cache(&self, hash: &str) -> Option<ExternalResult> {
        let text = fs::read_to_string(self.cache_path(hash)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn write_cache(&self, hash: &str, r: &ExternalResult) -> Result<()> {
        let _guard = self.cache_lock.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.cache_path(hash);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(r)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    fn run(&self, s: &Structure, workdir: &Path) -> std::result::Result<ExternalResult, String> {
        fs::create_dir_all(workdir).map_err(|e| format!("cannot create scratch dir: {e}"))?;
        let input = workdir.join("input.xyz");
        let output = workdir.join("output.json");
        xyz::write_structure_file(&input, &[Frame::unlabeled(s.clone())]).map_err(|e| e.to_string())?;
        let cmd = self
            .config
            .command
            .replace("{input}", &input.display().to_string())
            .replace("{output}", &output.display().to_string());
        self.launches.fetch_add(1, Ordering::SeqCst);
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .current_dir(workdir)
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("failed to launch {cmd:?}: {e}"))?;
        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if started.elapsed() >= self.config.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(format!("timed out after {:.1} s", self.config.timeout.as_secs_f64()));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(format!("wait failed: {e}")),
            }
        };
        if !status.success() {
            let mut stderr = String::new();
            if let Some(mut pipe) = child.stderr.take() {
                let _ = pipe.read_to_string(&mut stderr);
            }
            return Err(format!("command exited with {status}: {}", stderr.trim()));
        }
        let text = fs::read_to_string(&output).map_err(|e| format!("cannot read result file: {e}"))?;
        serde_json::from_str(&text).map_err(|e| format!("unparsable result file: {e}"))
    }
}

impl Calculator for ExternalCalculator {
    fn name(&self) -> &str {
        "external"
    }

    fn provenance(&self) -> String {
        self.provenance.clone()
    }

    fn evaluate(&self, s: &Structure) -> Result<CalcResult> {
        let hash = self.structure_hash(s);
        if let Some(cached) = self.read_cache(&hash) {
            return Ok(self.to_calc_result(s, cached));
        }
        let task = self.task_counter.fetch_add(1, Ordering::SeqCst);
        let workdir = self
            .config
            .scratch_dir
            .join(format!("{}-{}-{task}", &hash[..16], std::process::id()));
        let outcome = self.run(s, &workdir);
        let _ = fs::remove_dir_all(&workdir);
        match outcome {
            Ok(r) => {
                let result = self.to_calc_result(s, r.clone());
                if result.forces.len() == s.len() && (result.converged || !r.converged) {
                    if let Err(e) = self.write_cache(&hash, &r) {
                        log::warn!("could not cache external result: {e}");
                    }
                }
                Ok(result)
            }
            Err(msg) => {
                log::warn!("external calculator failed: {msg}");
                Ok(CalcResult::failed(s.len(), self.provenance.clone(), msg))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn water() -> Structure {
        Structure::new(vec![8, 1, 1], vec![[0.0; 3], [0.96, 0.0, 0.0], [-0.24, 0.93, 0.0]]).unwrap()
    }

    fn config(dir: &Path, command: &str) -> ExternalConfig {
        ExternalConfig {
            command: command.into(),
            timeout: Duration::from_secs(10),
            cache_dir: dir.join("cache"),
            scratch_dir: dir.join("scratch"),
        }
    }

    const ECHO: &str = r#"printf '{"energy_ev": -3.5, "forces_ev_per_ang": [[0,0,0.5],[0,0,-0.25],[0,0,-0.25]], "converged": true}' > {output}"#;

    #[test]
    fn mock_round_trip_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        let calc = ExternalCalculator::new(config(dir.path(), ECHO));
        let r = calc.evaluate(&water()).unwrap();
        assert!(r.converged);
        assert_eq!(r.energy, -3.5);
        assert_eq!(r.forces[0], [0.0, 0.0, 0.5]);
        assert_eq!(calc.subprocess_calls(), 1);

        let again = calc.evaluate(&water()).unwrap();
        assert_eq!(again, r);
        assert_eq!(calc.subprocess_calls(), 1, "second call must be served from cache");

        let hash = calc.structure_hash(&water());
        assert_eq!(hash.len(), 64);
        let expected = dir.path().join("cache").join(&hash[..2]).join(format!("{hash}.json"));
        assert!(expected.exists());
    }

    #[test]
    fn input_file_is_extended_xyz() {
        let dir = tempfile::tempdir().unwrap();
        let dump = dir.path().join("seen.xyz");
        let cmd = format!("cp {{input}} {} && {ECHO}", dump.display());
        let calc = ExternalCalculator::new(config(dir.path(), &cmd));
        calc.evaluate(&water()).unwrap();
        let frames = xyz::read_structure_file(&dump).unwrap();
        assert_eq!(frames[0].structure, water());
    }

    #[test]
    fn failures_are_unconverged_results() {
        let dir = tempfile::tempdir().unwrap();
        let failing = ExternalCalculator::new(config(dir.path(), "exit 1"));
        let r = failing.evaluate(&water()).unwrap();
        assert!(!r.converged);
        assert!(r.message.unwrap().contains("exited"));
        // failures are not cached
        failing.evaluate(&water()).unwrap();
        assert_eq!(failing.subprocess_calls(), 2);

        let garbage = ExternalCalculator::new(config(dir.path(), "echo nope > {output}"));
        let r = garbage.evaluate(&water()).unwrap();
        assert!(!r.converged);
        assert!(r.message.unwrap().contains("unparsable"));

        let mut slow_cfg = config(dir.path(), "sleep 5");
        slow_cfg.timeout = Duration::from_millis(100);
        let r = ExternalCalculator::new(slow_cfg).evaluate(&water()).unwrap();
        assert!(!r.converged);
        assert!(r.message.unwrap().contains("timed out"));

        let short = r#"printf '{"energy_ev": 1.0, "forces_ev_per_ang": [[0,0,0]], "converged": true}' > {output}"#;
        let r = ExternalCalculator::new(config(dir.path(), short)).evaluate(&water()).unwrap();
        assert!(!r.converged);
    }

    #[test]
    fn hash_distinguishes_inputs() {
        let calc = ExternalCalculator::new(ExternalConfig::new("true"));
        let a = water();
        let b = a.clone().with_position(1, [0.96, 0.0, 1e-12]).unwrap();
        assert_ne!(calc.structure_hash(&a), calc.structure_hash(&b));
        assert_ne!(
            calc.structure_hash(&a),
            calc.structure_hash(&a.clone().with_charge(-1))
        );
        let other = ExternalCalculator::new(ExternalConfig::new("false"));
        assert_ne!(calc.structure_hash(&a), other.structure_hash(&a));
    }
}
