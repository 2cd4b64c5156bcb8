//! Extended-XYZ reading and writing.
//!
//! Frame layout:
//!
//! ```text
//! <atom count>
//! charge=0 multiplicity=2 energy_ev=-12.5 system_id=sys-000001 bonds=0-1;1-2
//! C  0.0 0.0 0.0 [fx fy fz]
//! ```
//!
//! `charge` and `multiplicity` are required; `energy_ev` is present on labeled
//! frames and force columns are either present on every atom line or on none.
//! `bonds` is a semicolon-separated list of `i-j` index pairs. Every other key
//! lands in the structure's tag map. Values containing whitespace are written
//! double-quoted. Floats are written in shortest round-trip form so a
//! write/read cycle is lossless.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::structure::Structure;
use crate::units;

const RESERVED: [&str; 4] = ["charge", "multiplicity", "energy_ev", "bonds"];
pub const HAT_TYPES: [&str; 2] = ["intra", "inter"];
pub const FRAME_ROLES: [&str; 4] = ["start", "end", "interp", "sampled"];

/// One frame: a structure plus optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub structure: Structure,
    pub energy: Option<f64>,
    pub forces: Option<Vec<Vec3>>,
}

impl Frame {
    pub fn unlabeled(structure: Structure) -> Self {
        Frame {
            structure,
            energy: None,
            forces: None,
        }
    }

    pub fn labeled(structure: Structure, energy: f64, forces: Vec<Vec3>) -> Self {
        Frame {
            structure,
            energy: Some(energy),
            forces: Some(forces),
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.energy.is_some() && self.forces.is_some()
    }
}

pub fn read_structure_file(path: impl AsRef<Path>) -> Result<Vec<Frame>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_frames(&text, &path.display().to_string())
}

pub fn write_structure_file(path: impl AsRef<Path>, frames: &[Frame]) -> Result<()> {
    let path = path.as_ref();
    let text = format_frames(frames)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn format_frames(frames: &[Frame]) -> Result<String> {
    let mut out = String::new();
    for frame in frames {
        format_frame(frame, &mut out)?;
    }
    Ok(out)
}

fn format_frame(frame: &Frame, out: &mut String) -> Result<()> {
    let s = &frame.structure;
    if let Some(f) = &frame.forces {
        if f.len() != s.len() {
            return Err(Error::LengthMismatch(format!(
                "{} force rows for {} atoms",
                f.len(),
                s.len()
            )));
        }
    }
    let mut pairs: Vec<(String, String)> = vec![
        ("charge".into(), s.charge().to_string()),
        ("multiplicity".into(), s.multiplicity().to_string()),
    ];
    if let Some(e) = frame.energy {
        pairs.push(("energy_ev".into(), e.to_string()));
    }
    if let Some(b) = s.bonds() {
        let joined = b
            .iter()
            .map(|(i, j)| format!("{i}-{j}"))
            .collect::<Vec<_>>()
            .join(";");
        pairs.push(("bonds".into(), joined));
    }
    for (k, v) in s.tags() {
        if RESERVED.contains(&k.as_str()) || k.is_empty() || k.contains(['=', ' ', '\t', '"']) {
            return Err(Error::InvalidStructure(format!("tag key {k:?} cannot be written")));
        }
        pairs.push((k.clone(), v.clone()));
    }
    let _ = writeln!(out, "{}", s.len());
    let header = pairs
        .iter()
        .map(|(k, v)| format!("{k}={}", quote(v)))
        .collect::<Vec<_>>()
        .join(" ");
    let _ = writeln!(out, "{header}");
    for (i, (&z, p)) in s.elements().iter().zip(s.positions()).enumerate() {
        let sym = units::symbol(z)?;
        let _ = write!(out, "{sym:<2} {:>22} {:>22} {:>22}", p[0], p[1], p[2]);
        if let Some(f) = &frame.forces {
            let f = f[i];
            let _ = write!(out, " {:>22} {:>22} {:>22}", f[0], f[1], f[2]);
        }
        out.push('\n');
    }
    Ok(())
}

fn quote(v: &str) -> String {
    if !v.is_empty() && !v.contains(|c: char| c.is_whitespace() || c == '"' || c == '\\') {
        return v.to_owned();
    }
    let mut q = String::with_capacity(v.len() + 2);
    q.push('"');
    for c in v.chars() {
        match c {
            '"' => q.push_str("\\\""),
            '\\' => q.push_str("\\\\"),
            '\n' => q.push_str("\\n"),
            c => q.push(c),
        }
    }
    q.push('"');
    q
}

fn parse_header(line: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        if chars.next() != Some('=') || key.is_empty() {
            return Err(format!("expected key=value pair near {key:?}"));
        }
        let mut value = String::new();
        if chars.peek() == Some(&'"') {
            chars.next();
            let mut closed = false;
            while let Some(c) = chars.next() {
                match c {
                    '"' => {
                        closed = true;
                        break;
                    }
                    '\\' => match chars.next() {
                        Some('n') => value.push('\n'),
                        Some(e) => value.push(e),
                        None => return Err("dangling escape".into()),
                    },
                    c => value.push(c),
                }
            }
            if !closed {
                return Err(format!("unterminated quoted value for key {key:?}"));
            }
        } else {
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                value.push(c);
                chars.next();
            }
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

fn parse_bonds(v: &str) -> std::result::Result<Vec<(usize, usize)>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(';')
        .map(|p| {
            let (a, b) = p
                .split_once('-')
                .ok_or_else(|| format!("bond {p:?} is not of the form i-j"))?;
            let a = a.trim().parse().map_err(|_| format!("bad bond index in {p:?}"))?;
            let b = b.trim().parse().map_err(|_| format!("bad bond index in {p:?}"))?;
            Ok((a, b))
        })
        .collect()
}

fn parse_f64(tok: &str) -> std::result::Result<f64, String> {
    let x: f64 = tok.parse().map_err(|_| format!("cannot parse {tok:?} as a float"))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("non-finite value {tok:?}"))
    }
}

pub fn parse_frames(text: &str, source: &str) -> Result<Vec<Frame>> {
    let lines: Vec<&str> = text.lines().collect();
    let err = |line: usize, msg: String| Error::Parse {
        path: source.to_owned(),
        line,
        msg,
    };
    let mut frames = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count_line = i + 1;
        let n: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| err(count_line, format!("expected atom count, found {:?}", lines[i])))?;
        if n == 0 {
            return Err(err(count_line, "frame declares zero atoms".into()));
        }
        let header_line = i + 2;
        let header = lines
            .get(i + 1)
            .ok_or_else(|| err(header_line, "missing comment line".into()))?;
        let pairs = parse_header(header).map_err(|m| err(header_line, m))?;

        let mut elements = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut forces: Vec<Vec3> = Vec::new();
        let mut has_forces: Option<bool> = None;
        for k in 0..n {
            let ln = i + 3 + k;
            let line = lines.get(i + 2 + k).ok_or_else(|| {
                err(ln, format!("frame declares {n} atoms but only {k} atom lines follow"))
            })?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let with_f = match toks.len() {
                4 => false,
                7 => true,
                _ => {
                    return Err(err(
                        ln,
                        format!(
                            "expected 4 or 7 columns on atom line, found {} (frame declares {n} atoms)",
                            toks.len()
                        ),
                    ))
                }
            };
            match has_forces {
                None => has_forces = Some(with_f),
                Some(prev) if prev != with_f => {
                    return Err(err(ln, "inconsistent force columns within frame".into()))
                }
                _ => {}
            }
            elements.push(units::atomic_number(toks[0]).map_err(|e| err(ln, e.to_string()))?);
            let mut p = [0.0; 3];
            for d in 0..3 {
                p[d] = parse_f64(toks[1 + d]).map_err(|m| err(ln, m))?;
            }
            positions.push(p);
            if with_f {
                let mut f = [0.0; 3];
                for d in 0..3 {
                    f[d] = parse_f64(toks[4 + d]).map_err(|m| err(ln, m))?;
                }
                forces.push(f);
            }
        }

        let mut s = Structure::new(elements, positions).map_err(|e| err(count_line, e.to_string()))?;
        let mut charge = None;
        let mut multiplicity = None;
        let mut energy = None;
        let mut tags = BTreeMap::new();
        for (k, v) in pairs {
            match k.as_str() {
                "charge" => {
                    charge = Some(v.parse::<i32>().map_err(|_| {
                        err(header_line, format!("cannot parse charge {v:?}"))
                    })?)
                }
                "multiplicity" => {
                    multiplicity = Some(v.parse::<u32>().map_err(|_| {
                        err(header_line, format!("cannot parse multiplicity {v:?}"))
                    })?)
                }
                "energy_ev" => energy = Some(parse_f64(&v).map_err(|m| err(header_line, m))?),
                "bonds" => {
                    let b = parse_bonds(&v).map_err(|m| err(header_line, m))?;
                    s = s.with_bonds(b).map_err(|e| err(header_line, e.to_string()))?;
                }
                "hat_type" if !HAT_TYPES.contains(&v.as_str()) => {
                    return Err(err(header_line, format!("invalid hat_type {v:?}")))
                }
                "frame_role" if !FRAME_ROLES.contains(&v.as_str()) => {
                    return Err(err(header_line, format!("invalid frame_role {v:?}")))
                }
                _ => {
                    tags.insert(k, v);
                }
            }
        }
        let charge = charge.ok_or_else(|| err(header_line, "missing required key charge".into()))?;
        let multiplicity = multiplicity
            .ok_or_else(|| err(header_line, "missing required key multiplicity".into()))?;
        s = s
            .with_charge(charge)
            .with_multiplicity(multiplicity)
            .map_err(|e| err(header_line, e.to_string()))?
            .with_tags(tags);
        frames.push(Frame {
            structure: s,
            energy,
            forces: has_forces.unwrap_or(false).then_some(forces),
        });
        i += 2 + n;
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    const WATER: &str = "3\ncharge=0 multiplicity=1 energy_ev=-1.5 system_id=w1 hat_type=intra bonds=0-1;0-2\n\
O 0.0 0.0 0.0 0.1 0.2 0.3\nH 0.96 0.0 0.0 -0.1 0.0 0.0\nH -0.24 0.93 0.0 0.0 -0.2 -0.3\n";

    #[test]
    fn parses_labeled_frame() {
        let frames = parse_frames(WATER, "water").unwrap();
        assert_eq!(frames.len(), 1);
        let f = &frames[0];
        assert_eq!(f.energy, Some(-1.5));
        let forces = f.forces.as_ref().unwrap();
        assert_eq!(forces.len(), 3);
        assert!(forces.iter().all(|r| r.len() == 3));
        assert_eq!(forces[2], [0.0, -0.2, -0.3]);
        assert_eq!(f.structure.bonds().unwrap(), &[(0, 1), (0, 2)]);
        assert_eq!(f.structure.tag("system_id"), Some("w1"));
    }

    #[test]
    fn short_frame_reports_line() {
        let text = "5\ncharge=0 multiplicity=1\nC 0 0 0\nH 1 0 0\nH 0 1 0\nH 0 0 1\n";
        match parse_frames(text, "short") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn atom_count_mismatch_with_following_frame_reports_line() {
        let text = "3\ncharge=0 multiplicity=1\nC 0 0 0\nH 1 0 0\n1\ncharge=0 multiplicity=1\nH 0 0 0\n";
        match parse_frames(text, "mixed") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 5, "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs() {
        let bad_float = "1\ncharge=0 multiplicity=1\nC 0 abc 0\n";
        assert!(matches!(parse_frames(bad_float, "x"), Err(Error::Parse { line: 3, .. })));
        let bad_header = "1\ncharge=0 multiplicity\nC 0 0 0\n";
        assert!(matches!(parse_frames(bad_header, "x"), Err(Error::Parse { line: 2, .. })));
        let no_mult = "1\ncharge=0\nC 0 0 0\n";
        assert!(matches!(parse_frames(no_mult, "x"), Err(Error::Parse { line: 2, .. })));
        let bad_role = "1\ncharge=0 multiplicity=1 frame_role=middle\nC 0 0 0\n";
        assert!(parse_frames(bad_role, "x").is_err());
        let bad_count = "x\n";
        assert!(matches!(parse_frames(bad_count, "x"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn quoted_values_round_trip() {
        let s = Structure::new(vec![1], vec![[0.0; 3]])
            .unwrap()
            .with_tag("note", "two words \"quoted\" \\ slash")
            .with_tag("empty", "");
        let frames = vec![Frame::unlabeled(s)];
        let text = format_frames(&frames).unwrap();
        assert_eq!(parse_frames(&text, "q").unwrap(), frames);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.xyz");
        let frames = parse_frames(WATER, "water").unwrap();
        write_structure_file(&path, &frames).unwrap();
        assert_eq!(read_structure_file(&path).unwrap(), frames);
    }
}
