//! Dataset manifest: one JSON line per system.
//!
//! A dataset directory holds `manifest.jsonl` plus the extended-XYZ frame
//! files it references (`configs.xyz` for single reaction configurations,
//! `interp.xyz` for 12-frame interpolation paths).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hatbuild::{FrameRole, HatType};
use crate::mlp::Sample;
use crate::xyz::{self, Frame};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIGS_FILE: &str = "configs.xyz";
pub const INTERP_FILE: &str = "interp.xyz";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    /// One reaction configuration.
    Single,
    /// A 12-frame linear interpolation path.
    Interp,
}

impl SystemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::Single => "single",
            SystemKind::Interp => "interp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelInfo {
    /// Calculator provenance string.
    pub calculator: String,
    /// Frames whose evaluation did not converge (left unlabeled).
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub system_id: String,
    pub kind: SystemKind,
    pub hat_type: HatType,
    pub system_class: String,
    pub molecule_ids: Vec<String>,
    pub n_atoms: usize,
    pub h_index: usize,
    pub donor_index: usize,
    pub acceptor_index: usize,
    /// Start H – acceptor distance (Å).
    pub transfer_distance_ang: f64,
    pub frame_file: String,
    /// Index of the first frame in `frame_file`.
    pub frame_offset: usize,
    pub frame_roles: Vec<FrameRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub barrier_left_ev: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub barrier_right_ev: Option<f64>,
}

impl ManifestRecord {
    pub fn n_frames(&self) -> usize {
        self.frame_roles.len()
    }

    pub fn frame_range(&self) -> std::ops::Range<usize> {
        self.frame_offset..self.frame_offset + self.n_frames()
    }

    /// Stratum key for splitting: kind and system class.
    pub fn stratum(&self) -> String {
        format!("{}/{}", self.kind.as_str(), self.system_class)
    }
}

pub fn format_manifest(records: &[ManifestRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_manifest(text: &str, source: &str) -> Result<Vec<ManifestRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: source.to_owned(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("jsonl.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(format_manifest(records)?.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

/// A manifest with its frames loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub configs: Vec<Frame>,
    pub interp: Vec<Frame>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let records = read_manifest(dir.join(MANIFEST_FILE))?;
        let load = |name: &str| -> Result<Vec<Frame>> {
            let p = dir.join(name);
            if p.exists() {
                xyz::read_structure_file(p)
            } else {
                Ok(Vec::new())
            }
        };
        let ds = Dataset {
            configs: load(CONFIGS_FILE)?,
            interp: load(INTERP_FILE)?,
            dir,
            records,
        };
        for r in &ds.records {
            let n = ds.file_frames(r).len();
            if r.frame_range().end > n {
                return Err(Error::Pipeline(format!(
                    "{}: frames {:?} out of range for {} ({n} frames)",
                    r.system_id,
                    r.frame_range(),
                    r.frame_file
                )));
            }
        }
        Ok(ds)
    }

    fn file_frames(&self, r: &ManifestRecord) -> &[Frame] {
        if r.frame_file == INTERP_FILE {
            &self.interp
        } else {
            &self.configs
        }
    }

    pub fn frames(&self, r: &ManifestRecord) -> &[Frame] {
        &self.file_frames(r)[r.frame_range()]
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        xyz::write_structure_file(self.dir.join(CONFIGS_FILE), &self.configs)?;
        xyz::write_structure_file(self.dir.join(INTERP_FILE), &self.interp)?;
        write_manifest(self.dir.join(MANIFEST_FILE), &self.records)
    }

    pub fn records_where<'a>(
        &'a self,
        kind: SystemKind,
        split: Option<Split>,
    ) -> impl Iterator<Item = &'a ManifestRecord> + 'a {
        self.records
            .iter()
            .filter(move |r| r.kind == kind && (split.is_none() || r.split == split))
    }

    /// Labeled single configurations of a split, as training samples.
    /// Unlabeled (failed) frames are skipped.
    pub fn samples(&self, split: Option<Split>) -> Vec<(&ManifestRecord, Sample)> {
        self.records_where(SystemKind::Single, split)
            .filter_map(|r| {
                let f = &self.frames(r)[0];
                Some((
                    r,
                    Sample {
                        structure: f.structure.clone(),
                        energy: f.energy?,
                        forces: f.forces.clone()?,
                    },
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> ManifestRecord {
        ManifestRecord {
            system_id: "single-000001".into(),
            kind: SystemKind::Single,
            hat_type: HatType::Inter,
            system_class: "inter:aminoacid+dipeptide".into(),
            molecule_ids: vec!["ala".into(), "gly-gly".into()],
            n_atoms: 29,
            h_index: 3,
            donor_index: 1,
            acceptor_index: 20,
            transfer_distance_ang: 1.8372619,
            frame_file: CONFIGS_FILE.into(),
            frame_offset: 1,
            frame_roles: vec![FrameRole::Sampled],
            split: Some(Split::Test),
            label: Some(LabelInfo {
                calculator: "surrogate:abc".into(),
                n_failed: 0,
            }),
            barrier_left_ev: None,
            barrier_right_ev: None,
        }
    }

    #[test]
    fn json_lines_round_trip() {
        let mut b = record();
        b.kind = SystemKind::Interp;
        b.frame_roles = vec![FrameRole::Start, FrameRole::Interp, FrameRole::End];
        b.barrier_left_ev = Some(0.1 + 0.2);
        b.split = None;
        let text = format_manifest(&[record(), b.clone()]).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"hat_type\":\"inter\""));
        let back = parse_manifest(&text, "m").unwrap();
        assert_eq!(back, vec![record(), b]);
    }

    #[test]
    fn unknown_fields_are_rejected_with_line() {
        let text = format_manifest(&[record()]).unwrap().replace("\"n_atoms\"", "\"atoms\"");
        let err = parse_manifest(&format!("\n{text}"), "m.jsonl").unwrap_err().to_string();
        assert!(err.starts_with("m.jsonl:2:"), "{err}");
    }
}
