//! Packaged library of small peptide-like structures and the molecule-pair
//! sampler used to pick HAT systems.
//!
//! Template files are extended-XYZ with `name`, `class`
//! (`aminoacid|dipeptide`), `capping` (`capped|uncapped`), an explicit
//! `bonds=` table and an `eligible_h=` list of transferable hydrogens.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::structure::{self, Structure};
use crate::units;
use crate::xyz;

pub const TAG_NAME: &str = "name";
pub const TAG_CLASS: &str = "class";
pub const TAG_CAPPING: &str = "capping";
pub const TAG_ELIGIBLE_H: &str = "eligible_h";

pub const MIN_ATOMS: usize = 10;
pub const MAX_ATOMS: usize = 130;

/// Filter tags understood by [`list_templates`].
pub const KNOWN_TAGS: [&str; 4] = ["aminoacid", "dipeptide", "capped", "uncapped"];

const PACKAGED: &[(&str, &str)] = &[
    ("ace-ala-gly-nme", include_str!("../data/templates/ace-ala-gly-nme.xyz")),
    ("ace-gly-gly-nme", include_str!("../data/templates/ace-gly-gly-nme.xyz")),
    ("ala", include_str!("../data/templates/ala.xyz")),
    ("ala-ala", include_str!("../data/templates/ala-ala.xyz")),
    ("asn", include_str!("../data/templates/asn.xyz")),
    ("asp", include_str!("../data/templates/asp.xyz")),
    ("cys", include_str!("../data/templates/cys.xyz")),
    ("gly", include_str!("../data/templates/gly.xyz")),
    ("gly-gly", include_str!("../data/templates/gly-gly.xyz")),
    ("leu", include_str!("../data/templates/leu.xyz")),
    ("pro", include_str!("../data/templates/pro.xyz")),
    ("ser", include_str!("../data/templates/ser.xyz")),
    ("thr", include_str!("../data/templates/thr.xyz")),
    ("val", include_str!("../data/templates/val.xyz")),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub name: String,
    /// `aminoacid` or `dipeptide`.
    pub class: String,
    pub capped: bool,
    /// Carries an explicit bond table.
    pub structure: Structure,
    pub eligible_h: Vec<usize>,
}

impl Template {
    pub fn from_structure(s: Structure) -> Result<Self> {
        let name = s
            .tag(TAG_NAME)
            .ok_or_else(|| Error::InvalidStructure("template without `name`".into()))?
            .to_owned();
        let bad = |msg: String| Error::InvalidStructure(format!("template {name}: {msg}"));
        let class = s.tag(TAG_CLASS).unwrap_or("aminoacid").to_owned();
        if class != "aminoacid" && class != "dipeptide" {
            return Err(bad(format!("unknown class {class:?}")));
        }
        let capped = match s.tag(TAG_CAPPING).unwrap_or("uncapped") {
            "capped" => true,
            "uncapped" => false,
            other => return Err(bad(format!("unknown capping {other:?}"))),
        };
        let bonds = s
            .bonds()
            .ok_or_else(|| bad("missing bond table".into()))?
            .to_vec();
        if !(MIN_ATOMS..=MAX_ATOMS).contains(&s.len()) {
            return Err(bad(format!("{} atoms outside [{MIN_ATOMS}, {MAX_ATOMS}]", s.len())));
        }
        let eligible_h: Vec<usize> = match s.tag(TAG_ELIGIBLE_H) {
            Some(list) if !list.trim().is_empty() => list
                .split(',')
                .map(|t| t.trim().parse::<usize>().map_err(|_| bad(format!("bad eligible_h entry {t:?}"))))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        let adj = structure::adjacency(s.len(), &bonds);
        for &h in &eligible_h {
            if h >= s.len() || s.elements()[h] != units::HYDROGEN {
                return Err(bad(format!("eligible_h {h} is not a hydrogen")));
            }
            let heavy = adj[h].iter().filter(|&&k| s.elements()[k] != units::HYDROGEN).count();
            if adj[h].len() != 1 || heavy != 1 {
                return Err(bad(format!("eligible_h {h} is not bonded to exactly one heavy atom")));
            }
        }
        Ok(Template {
            name,
            class,
            capped,
            structure: s,
            eligible_h,
        })
    }

    pub fn len(&self) -> usize {
        self.structure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.structure.is_empty()
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        match tag {
            "capped" => self.capped,
            "uncapped" => !self.capped,
            other => self.class == other,
        }
    }
}

/// The full packaged library, sorted by name.
pub fn library() -> Vec<Template> {
    let mut out: Vec<Template> = PACKAGED
        .iter()
        .map(|(name, text)| {
            let frames = xyz::parse_frames(text, name).expect("packaged template parses");
            Template::from_structure(frames.into_iter().next().expect("one frame").structure)
                .expect("packaged template is valid")
        })
        .collect();
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

/// Templates carrying every tag in `filter` (all of them if empty).
pub fn list_templates(filter: &[&str]) -> Result<Vec<Template>> {
    for tag in filter {
        if !KNOWN_TAGS.contains(tag) {
            return Err(Error::UnknownTag(tag.to_string()));
        }
    }
    Ok(library()
        .into_iter()
        .filter(|t| filter.iter().all(|tag| t.has_tag(tag)))
        .collect())
}

/// Load user-provided templates from an extended-XYZ file (one per frame).
pub fn load_template_file(path: impl AsRef<Path>) -> Result<Vec<Template>> {
    xyz::read_structure_file(path)?
        .into_iter()
        .map(|f| Template::from_structure(f.structure))
        .collect()
}

/// Weights over system classes such as `intra:aminoacid` or
/// `inter:aminoacid+dipeptide`. A bare `intra` / `inter` key spreads its
/// weight evenly over the classes of that HAT type.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MixingPolicy {
    pub weights: BTreeMap<String, f64>,
}

impl MixingPolicy {
    /// Every available class weighted equally.
    pub fn equal() -> Self {
        MixingPolicy::default()
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, f64)>) -> Self {
        MixingPolicy {
            weights: pairs.into_iter().map(|(k, v)| (k.to_owned(), v)).collect(),
        }
    }
}

/// Molecule-pair class label; roles are not part of the class.
pub fn system_class(hat_type: &str, a: &Template, b: Option<&Template>) -> String {
    match b {
        None => format!("{hat_type}:{}", a.class),
        Some(b) => {
            let (x, y) = if a.class <= b.class { (&a.class, &b.class) } else { (&b.class, &a.class) };
            format!("{hat_type}:{x}+{y}")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemDraw {
    pub hat_type: &'static str,
    pub class: String,
    /// Index of the hydrogen-donor molecule in the sampler's template list.
    pub donor: usize,
    /// Index of the molecule that becomes the radical (same as `donor` for intra).
    pub acceptor: usize,
}

/// Samples (class, templates) with the configured class weights and a
/// uniform choice among the template combinations of the chosen class.
#[derive(Debug, Clone)]
pub struct PairSampler {
    templates: Vec<Template>,
    classes: Vec<(String, f64, Vec<(usize, usize)>)>,
}

impl PairSampler {
    /// `max_atoms` bounds the assembled radical system (donor + acceptor − 1).
    pub fn new(templates: Vec<Template>, policy: &MixingPolicy, max_atoms: Option<usize>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("template selection is empty".into()));
        }
        let limit = max_atoms.unwrap_or(usize::MAX);
        let mut combos: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        for (i, t) in templates.iter().enumerate() {
            if t.len() - 1 <= limit {
                combos.entry(system_class("intra", t, None)).or_default().push((i, i));
            }
            for (j, u) in templates.iter().enumerate() {
                if t.len() + u.len() - 1 <= limit {
                    combos.entry(system_class("inter", t, Some(u))).or_default().push((i, j));
                }
            }
        }

        let mut weights: BTreeMap<String, f64> = BTreeMap::new();
        if policy.weights.is_empty() {
            let w = 1.0 / combos.len().max(1) as f64;
            for k in combos.keys() {
                weights.insert(k.clone(), w);
            }
        } else {
            let total: f64 = policy.weights.values().sum();
            if (total - 1.0).abs() > 1e-9 || policy.weights.values().any(|w| *w < 0.0) {
                return Err(Error::Config(format!("mixing weights must be ≥ 0 and sum to 1, got {total}")));
            }
            for (key, &w) in &policy.weights {
                if key == "intra" || key == "inter" {
                    let members: Vec<&String> =
                        combos.keys().filter(|c| c.starts_with(&format!("{key}:"))).collect();
                    if members.is_empty() && w > 0.0 {
                        return Err(Error::Config(format!("no {key} systems fit the template selection")));
                    }
                    for m in &members {
                        *weights.entry((*m).clone()).or_default() += w / members.len() as f64;
                    }
                } else if combos.contains_key(key) {
                    *weights.entry(key.clone()).or_default() += w;
                } else if w > 0.0 {
                    return Err(Error::Config(format!("unknown or empty system class {key:?}")));
                }
            }
        }
        let classes: Vec<_> = weights
            .into_iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(k, w)| {
                let c = combos.remove(&k).unwrap_or_default();
                (k, w, c)
            })
            .collect();
        if classes.is_empty() {
            return Err(Error::Config("no system class has positive weight".into()));
        }
        Ok(PairSampler { templates, classes })
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    /// (class, weight) pairs in sampling order.
    pub fn class_weights(&self) -> Vec<(&str, f64)> {
        self.classes.iter().map(|(k, w, _)| (k.as_str(), *w)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SystemDraw {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.classes.len() - 1;
        for (k, (_, w, _)) in self.classes.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        let (class, _, combos) = &self.classes[pick];
        let (donor, acceptor) = combos[rng.random_range(0..combos.len())];
        SystemDraw {
            hat_type: if class.starts_with("intra:") { "intra" } else { "inter" },
            class: class.clone(),
            donor,
            acceptor,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn library_listing() {
        let all = list_templates(&[]).unwrap();
        assert_eq!(all.len(), PACKAGED.len());
        let names: Vec<&str> = all.iter().map(|t| t.name.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert!(list_templates(&["aminoacid"]).unwrap().len() >= 10);
        let capped = list_templates(&["dipeptide", "capped"]).unwrap();
        assert_eq!(capped.len(), 2);
        assert!(matches!(list_templates(&["protein"]), Err(Error::UnknownTag(t)) if t == "protein"));
    }

    #[test]
    fn eligible_hydrogens_have_one_heavy_partner() {
        for t in library() {
            assert!((MIN_ATOMS..=MAX_ATOMS).contains(&t.len()), "{}", t.name);
            assert!(!t.eligible_h.is_empty(), "{}", t.name);
            let bonds = t.structure.bonds().unwrap();
            for &h in &t.eligible_h {
                let partners: Vec<usize> = bonds
                    .iter()
                    .filter_map(|&(a, b)| if a == h { Some(b) } else if b == h { Some(a) } else { None })
                    .collect();
                assert_eq!(partners.len(), 1);
                assert_ne!(t.structure.elements()[partners[0]], units::HYDROGEN);
            }
        }
    }

    #[test]
    fn intra_only_policy() {
        let s = PairSampler::new(library(), &MixingPolicy::from_pairs([("intra", 1.0)]), None).unwrap();
        let mut rng = RngStream::root(1).rng();
        for _ in 0..500 {
            let d = s.sample(&mut rng);
            assert_eq!(d.hat_type, "intra");
            assert_eq!(d.donor, d.acceptor);
        }
    }

    #[test]
    fn equal_policy_frequencies() {
        let s = PairSampler::new(library(), &MixingPolicy::equal(), None).unwrap();
        let classes = s.class_weights();
        assert_eq!(classes.len(), 5);
        let mut rng = RngStream::root(2).rng();
        let n = 10_000;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..n {
            *counts.entry(s.sample(&mut rng).class).or_default() += 1;
        }
        for (class, w) in classes {
            let f = counts[class] as f64 / n as f64;
            assert!((f - w).abs() < 0.02, "{class}: {f} vs {w}");
        }
    }

    #[test]
    fn size_limit_and_determinism() {
        let s = PairSampler::new(library(), &MixingPolicy::equal(), Some(30)).unwrap();
        let lib = s.templates();
        let mut a = RngStream::root(3).rng();
        let mut b = RngStream::root(3).rng();
        for _ in 0..1000 {
            let d = s.sample(&mut a);
            assert_eq!(d, s.sample(&mut b));
            let n = if d.hat_type == "intra" {
                lib[d.donor].len() - 1
            } else {
                lib[d.donor].len() + lib[d.acceptor].len() - 1
            };
            assert!(n <= 30);
        }
    }

    #[test]
    fn bad_policies_are_rejected() {
        assert!(PairSampler::new(library(), &MixingPolicy::from_pairs([("intra", 0.5)]), None).is_err());
        assert!(PairSampler::new(library(), &MixingPolicy::from_pairs([("sideways", 1.0)]), None).is_err());
    }
}
