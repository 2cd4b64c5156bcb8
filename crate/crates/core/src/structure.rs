//! The universal geometric record: elements, Cartesian positions (Å), an
//! optional bond table and free-form metadata.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};
use crate::units;

/// Default scale applied to the sum of covalent radii when inferring bonds.
pub const DEFAULT_BOND_SCALE: f64 = 1.25;

/// A validated molecular structure. Instances are immutable; the `with_*`
/// methods return modified copies.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    elements: Vec<u8>,
    positions: Vec<Vec3>,
    bonds: Option<Vec<(usize, usize)>>,
    charge: i32,
    multiplicity: u32,
    tags: BTreeMap<String, String>,
}

impl Structure {
    pub fn new(elements: Vec<u8>, positions: Vec<Vec3>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::InvalidStructure("structure has no atoms".into()));
        }
        if elements.len() != positions.len() {
            return Err(Error::InvalidStructure(format!(
                "{} elements but {} positions",
                elements.len(),
                positions.len()
            )));
        }
        check_finite(&positions)?;
        Ok(Structure {
            elements,
            positions,
            bonds: None,
            charge: 0,
            multiplicity: 1,
            tags: BTreeMap::new(),
        })
    }

    /// Attach a bond table. Pairs are normalised to `(min, max)`, sorted and
    /// deduplicated.
    pub fn with_bonds(mut self, bonds: Vec<(usize, usize)>) -> Result<Self> {
        self.bonds = Some(normalize_bonds(bonds, self.len())?);
        Ok(self)
    }

    pub fn without_bonds(mut self) -> Self {
        self.bonds = None;
        self
    }

    pub fn with_charge(mut self, charge: i32) -> Self {
        self.charge = charge;
        self
    }

    pub fn with_multiplicity(mut self, multiplicity: u32) -> Result<Self> {
        if multiplicity == 0 {
            return Err(Error::InvalidStructure("multiplicity must be >= 1".into()));
        }
        self.multiplicity = multiplicity;
        Ok(self)
    }

    pub fn with_tag(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.tags.insert(key.into(), value.into());
        self
    }

    pub fn without_tag(mut self, key: &str) -> Self {
        self.tags.remove(key);
        self
    }

    pub fn with_tags(mut self, tags: BTreeMap<String, String>) -> Self {
        self.tags = tags;
        self
    }

    pub fn with_positions(mut self, positions: Vec<Vec3>) -> Result<Self> {
        if positions.len() != self.len() {
            return Err(Error::InvalidStructure(format!(
                "expected {} positions, got {}",
                self.len(),
                positions.len()
            )));
        }
        check_finite(&positions)?;
        self.positions = positions;
        Ok(self)
    }

    pub fn with_position(mut self, index: usize, position: Vec3) -> Result<Self> {
        check_finite(&[position])?;
        *self
            .positions
            .get_mut(index)
            .ok_or_else(|| Error::InvalidStructure(format!("atom index {index} out of range")))? =
            position;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[u8] {
        &self.elements
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> Vec3 {
        self.positions[i]
    }

    pub fn bonds(&self) -> Option<&[(usize, usize)]> {
        self.bonds.as_deref()
    }

    pub fn charge(&self) -> i32 {
        self.charge
    }

    pub fn multiplicity(&self) -> u32 {
        self.multiplicity
    }

    pub fn tags(&self) -> &BTreeMap<String, String> {
        &self.tags
    }

    pub fn tag(&self, key: &str) -> Option<&str> {
        self.tags.get(key).map(String::as_str)
    }

    pub fn tag_usize(&self, key: &str) -> Option<usize> {
        self.tag(key).and_then(|v| v.parse().ok())
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        geom::distance(self.positions[i], self.positions[j])
    }

    /// Explicit bonds when present, otherwise bonds inferred with the
    /// default scale.
    pub fn bonds_or_inferred(&self) -> Result<Vec<(usize, usize)>> {
        match &self.bonds {
            Some(b) => Ok(b.clone()),
            None => infer_bonds(self, DEFAULT_BOND_SCALE),
        }
    }

    pub fn count_element(&self, z: u8) -> usize {
        self.elements.iter().filter(|&&e| e == z).count()
    }

    /// Minimal interatomic distance, `None` for a single atom.
    pub fn min_distance(&self) -> Option<f64> {
        let n = self.len();
        let mut best: Option<f64> = None;
        for i in 0..n {
            for j in i + 1..n {
                let d = self.distance(i, j);
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }
}

fn check_finite(positions: &[Vec3]) -> Result<()> {
    if positions.iter().flatten().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidStructure("non-finite coordinate".into()))
    }
}

fn normalize_bonds(bonds: Vec<(usize, usize)>, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(bonds.len());
    for (a, b) in bonds {
        if a >= n || b >= n {
            return Err(Error::InvalidStructure(format!(
                "bond ({a}, {b}) references an atom outside 0..{n}"
            )));
        }
        if a == b {
            return Err(Error::InvalidStructure(format!("bond ({a}, {b}) is a self-pair")));
        }
        out.push((a.min(b), a.max(b)));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Symmetric matrix of interatomic distances in Å.
pub fn distance_matrix(s: &Structure) -> Vec<Vec<f64>> {
    let n = s.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = s.distance(i, j);
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

/// Covalent-radius bond rule: `(i, j)` is bonded iff
/// `d_ij <= scale * (r_cov(i) + r_cov(j))`.
pub fn infer_bonds(s: &Structure, scale: f64) -> Result<Vec<(usize, usize)>> {
    let radii = s
        .elements()
        .iter()
        .map(|&z| units::covalent_radius(z))
        .collect::<Result<Vec<_>>>()?;
    let n = s.len();
    let mut bonds = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if s.distance(i, j) <= scale * (radii[i] + radii[j]) {
                bonds.push((i, j));
            }
        }
    }
    Ok(bonds)
}

/// Apply `x -> R x + t` to every atom.
pub fn rigid_transform(s: &Structure, rotation: &Mat3, translation: Vec3) -> Result<Structure> {
    let err = geom::orthonormality_error(rotation);
    if err > 1e-10 || !err.is_finite() {
        return Err(Error::NotOrthonormal(err));
    }
    let positions = s
        .positions()
        .iter()
        .map(|&p| geom::add(geom::mat_vec(rotation, p), translation))
        .collect();
    s.clone().with_positions(positions)
}

/// Adjacency lists for `n` atoms.
pub fn adjacency(n: usize, bonds: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in bonds {
        adj[a].push(b);
        adj[b].push(a);
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

/// Through-bond distances from `source` (`usize::MAX` when unreachable).
pub fn bond_distances_from(adj: &[Vec<usize>], source: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; adj.len()];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

/// All-pairs through-bond distances, capped at `cap` (pairs further apart or
/// disconnected report `cap`).
pub fn bond_distance_matrix(adj: &[Vec<usize>], cap: usize) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut out = vec![vec![cap; n]; n];
    for (src, row) in out.iter_mut().enumerate() {
        row[src] = 0;
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            if row[u] + 1 >= cap {
                continue;
            }
            for &v in &adj[u] {
                if v != src && row[v] == cap {
                    row[v] = row[u] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    out
}

/// Connected-component label per atom, numbered in order of first atom.
pub fn connected_components(adj: &[Vec<usize>]) -> Vec<usize> {
    let mut label = vec![usize::MAX; adj.len()];
    let mut next = 0;
    for start in 0..adj.len() {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if label[v] == usize::MAX {
                    label[v] = next;
                    queue.push_back(v);
                }
            }
        }
        next += 1;
    }
    label
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{axis_angle, IDENTITY};
    use proptest::prelude::*;

    fn pair(z1: u8, z2: u8, d: f64) -> Structure {
        Structure::new(vec![z1, z2], vec![[0.0; 3], [0.0, 0.0, d]]).unwrap()
    }

    #[test]
    fn rejects_malformed_structures() {
        assert!(Structure::new(vec![], vec![]).is_err());
        assert!(Structure::new(vec![1, 1], vec![[0.0; 3]]).is_err());
        assert!(Structure::new(vec![1], vec![[f64::NAN, 0.0, 0.0]]).is_err());
        let s = pair(1, 1, 1.0);
        assert!(s.clone().with_bonds(vec![(0, 2)]).is_err());
        assert!(s.clone().with_bonds(vec![(1, 1)]).is_err());
        assert!(s.with_multiplicity(0).is_err());
    }

    #[test]
    fn bonds_are_normalised() {
        let s = pair(1, 1, 1.0).with_bonds(vec![(1, 0), (0, 1)]).unwrap();
        assert_eq!(s.bonds().unwrap(), &[(0, 1)]);
    }

    #[test]
    fn distance_matrix_examples() {
        let m = distance_matrix(&pair(6, 6, 1.0));
        assert_eq!(m[0][1], 1.0);
        assert_eq!(m[1][0], 1.0);
        let single = Structure::new(vec![6], vec![[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(distance_matrix(&single), vec![vec![0.0]]);

        let a = 1.5;
        let tri = Structure::new(
            vec![6, 6, 6],
            vec![[0.0, 0.0, 0.0], [a, 0.0, 0.0], [a / 2.0, a * 3f64.sqrt() / 2.0, 0.0]],
        )
        .unwrap();
        let m = distance_matrix(&tri);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!((m[i][j] - 1.5).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bond_inference_thresholds() {
        // C-H threshold 1.25 * (0.76 + 0.31) = 1.3375 Å
        assert_eq!(infer_bonds(&pair(6, 1, 1.09), 1.25).unwrap(), vec![(0, 1)]);
        assert!(infer_bonds(&pair(6, 1, 1.34), 1.25).unwrap().is_empty());
        assert!(infer_bonds(&pair(6, 6, 3.0), 1.25).unwrap().is_empty());
        // H-H threshold 0.775 Å
        assert_eq!(infer_bonds(&pair(1, 1, 0.74), 1.25).unwrap(), vec![(0, 1)]);
        assert!(infer_bonds(&pair(1, 1, 0.78), 1.25).unwrap().is_empty());
        match infer_bonds(&pair(26, 1, 1.0), 1.25) {
            Err(Error::UnknownElement(26)) => {}
            other => panic!("expected unknown element error, got {other:?}"),
        }
    }

    #[test]
    fn rigid_transform_examples() {
        let s = Structure::new(vec![6], vec![[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(rigid_transform(&s, &IDENTITY, [0.0; 3]).unwrap(), s);
        let r = axis_angle([0.0, 0.0, 1.0], std::f64::consts::PI);
        let t = rigid_transform(&s, &r, [0.0; 3]).unwrap();
        assert!(geom::distance(t.position(0), [-1.0, 0.0, 0.0]) < 1e-12);
        let bad = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(rigid_transform(&s, &bad, [0.0; 3]), Err(Error::NotOrthonormal(_))));
    }

    #[test]
    fn graph_helpers() {
        // chain 0-1-2-3 plus isolated 4
        let adj = adjacency(5, &[(0, 1), (1, 2), (2, 3)]);
        assert_eq!(bond_distances_from(&adj, 0), vec![0, 1, 2, 3, usize::MAX]);
        let m = bond_distance_matrix(&adj, 3);
        assert_eq!(m[0][3], 3);
        assert_eq!(m[0][2], 2);
        assert_eq!(m[0][4], 3);
        assert_eq!(connected_components(&adj), vec![0, 0, 0, 0, 1]);
    }

    fn arb_structure() -> impl Strategy<Value = Structure> {
        (2usize..8).prop_flat_map(|n| {
            (
                proptest::collection::vec(prop_oneof![Just(1u8), Just(6u8), Just(8u8)], n),
                proptest::collection::vec(proptest::array::uniform3(-3.0f64..3.0), n),
            )
                .prop_map(|(e, p)| Structure::new(e, p).unwrap())
        })
    }

    proptest! {
        #[test]
        fn distances_invariant_under_rigid_motion(
            s in arb_structure(),
            axis in proptest::array::uniform3(-1.0f64..1.0),
            angle in 0.0f64..6.3,
            t in proptest::array::uniform3(-10.0f64..10.0),
        ) {
            prop_assume!(geom::norm(axis) > 1e-3);
            let r = axis_angle(axis, angle);
            let moved = rigid_transform(&s, &r, t).unwrap();
            let a = distance_matrix(&s);
            let b = distance_matrix(&moved);
            for i in 0..s.len() {
                for j in 0..s.len() {
                    prop_assert!((a[i][j] - b[i][j]).abs() < 1e-9);
                }
            }
            // inverse transform recovers the original
            let rt = geom::transpose(&r);
            let back_t = geom::scale(geom::mat_vec(&rt, t), -1.0);
            let back = rigid_transform(&moved, &rt, back_t).unwrap();
            for (p, q) in s.positions().iter().zip(back.positions()) {
                prop_assert!(geom::distance(*p, *q) < 1e-12);
            }
        }

        #[test]
        fn bond_inference_is_permutation_covariant(
            s in arb_structure(),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = s.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            // new atom k is old atom perm[k]
            let permuted = Structure::new(
                perm.iter().map(|&k| s.elements()[k]).collect(),
                perm.iter().map(|&k| s.position(k)).collect(),
            ).unwrap();
            let mut inverse = vec![0; n];
            for (new, &old) in perm.iter().enumerate() {
                inverse[old] = new;
            }
            let mut expected: Vec<(usize, usize)> = infer_bonds(&s, 1.25).unwrap()
                .into_iter()
                .map(|(a, b)| {
                    let (x, y) = (inverse[a], inverse[b]);
                    (x.min(y), x.max(y))
                })
                .collect();
            expected.sort_unstable();
            prop_assert_eq!(infer_bonds(&permuted, 1.25).unwrap(), expected);
        }
    }
}
