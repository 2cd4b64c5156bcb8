//! Analytic reactive surrogate potential.
//!
//! ```text
//! E = Σ_bonds Morse(r) + Σ_angles ½ k (r₁₃ − r₁₃⁰)² + Σ_nonbonded LJ(r) + E_HAT
//! E_HAT = −Δ ln(exp(−M_d/Δ) + exp(−M_a/Δ))
//! ```
//!
//! `M_d`/`M_a` are the Morse energies of the transferring hydrogen with its
//! donor and with the acceptor. The smooth minimum gives a double well along
//! the transfer coordinate with a finite barrier in between. Lennard-Jones
//! acts between atoms at least three bonds apart or in different molecules.
//! The 1-3 springs (equilibrium from the two bond lengths and a tetrahedral
//! angle) give the surface angular stiffness so relaxed templates are true
//! minima.
//!
//! When a [`TransferSite`] is active, all bonded terms of the hydrogen are
//! replaced by `E_HAT`, and the hydrogen has no LJ with the donor, the
//! acceptor or their direct neighbours. The donor-acceptor pair has no LJ
//! either.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{CalcResult, Calculator};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::structure::{self, Structure};
use crate::units;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MorseParams {
    /// Well depth (eV).
    pub de: f64,
    /// Equilibrium length (Å).
    pub re: f64,
    /// Width (1/Å).
    pub a: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LjParams {
    pub epsilon: f64,
    pub sigma: f64,
}

/// Morse energy `D((1 − e^{−a(r−r_e)})² − 1)` and its radial derivative.
pub fn morse(p: &MorseParams, r: f64) -> (f64, f64) {
    let x = (-p.a * (r - p.re)).exp();
    let one_minus = 1.0 - x;
    let e = p.de * (one_minus * one_minus - 1.0);
    let de = 2.0 * p.de * p.a * x * one_minus;
    (e, de)
}

fn lj(p: &LjParams, r: f64) -> (f64, f64) {
    let sr6 = (p.sigma / r).powi(6);
    let sr12 = sr6 * sr6;
    let e = 4.0 * p.epsilon * (sr12 - sr6);
    let de = 4.0 * p.epsilon * (-12.0 * sr12 + 6.0 * sr6) / r;
    (e, de)
}

fn key(a: u8, b: u8) -> (u8, u8) {
    (a.min(b), a.max(b))
}

fn pair_name(a: u8, b: u8) -> String {
    let (a, b) = key(a, b);
    format!("{}-{}", units::symbol_or_number(a), units::symbol_or_number(b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateParams {
    pub morse: BTreeMap<(u8, u8), MorseParams>,
    pub lj: BTreeMap<(u8, u8), LjParams>,
    /// 1-3 spring constant (eV/Å²).
    pub angle_k: f64,
    /// Reference angle for the 1-3 spring (radians).
    pub angle_theta0: f64,
    /// Barrier of the threefold torsion `V/2 (1 + cos 3φ)` on every proper
    /// dihedral (eV).
    pub torsion_v: f64,
    /// Smooth-min coupling Δ (eV).
    pub hat_delta: f64,
}

impl SurrogateParams {
    pub fn morse_for(&self, a: u8, b: u8) -> Result<&MorseParams> {
        self.morse.get(&key(a, b)).ok_or_else(|| Error::MissingPairParameters {
            kind: "Morse",
            pair: pair_name(a, b),
        })
    }

    pub fn lj_for(&self, a: u8, b: u8) -> Result<&LjParams> {
        self.lj.get(&key(a, b)).ok_or_else(|| Error::MissingPairParameters {
            kind: "Lennard-Jones",
            pair: pair_name(a, b),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("surrogate parameter {what} must be > 0")));
        for (k, m) in &self.morse {
            if !(m.de > 0.0 && m.a > 0.0 && m.re > 0.0) {
                return bad(&format!("Morse {}", pair_name(k.0, k.1)));
            }
        }
        for (k, l) in &self.lj {
            if !(l.epsilon > 0.0 && l.sigma > 0.0) {
                return bad(&format!("LJ {}", pair_name(k.0, k.1)));
            }
        }
        if !(self.hat_delta > 0.0) {
            return bad("hat_delta");
        }
        if !(self.angle_k >= 0.0) {
            return bad("angle_k");
        }
        if !(self.torsion_v >= 0.0) {
            return bad("torsion_v");
        }
        Ok(())
    }

    fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, m) in &self.morse {
            h.update([k.0, k.1]);
            for x in [m.de, m.re, m.a] {
                h.update(x.to_le_bytes());
            }
        }
        for (k, l) in &self.lj {
            h.update([k.0, k.1]);
            for x in [l.epsilon, l.sigma] {
                h.update(x.to_le_bytes());
            }
        }
        for x in [self.angle_k, self.angle_theta0, self.torsion_v, self.hat_delta] {
            h.update(x.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

impl Default for SurrogateParams {
    fn default() -> Self {
        const H: u8 = 1;
        const C: u8 = 6;
        const N: u8 = 7;
        const O: u8 = 8;
        const F: u8 = 9;
        const S: u8 = 16;
        const CL: u8 = 17;
        const BR: u8 = 35;
        const I: u8 = 53;
        let morse_table: &[(u8, u8, f64, f64, f64)] = &[
            (H, H, 4.75, 0.74, 1.94),
            (H, C, 4.30, 1.09, 1.85),
            (H, N, 4.00, 1.01, 2.20),
            (H, O, 4.60, 0.96, 2.30),
            (H, S, 3.80, 1.34, 1.70),
            (C, C, 3.60, 1.52, 2.00),
            (C, N, 3.20, 1.44, 2.10),
            (C, O, 3.70, 1.33, 2.20),
            (C, S, 2.90, 1.82, 1.80),
            (N, N, 2.00, 1.45, 2.20),
            (N, O, 2.20, 1.40, 2.30),
            (N, S, 2.00, 1.70, 1.90),
            (O, O, 1.50, 1.45, 2.40),
            (O, S, 2.50, 1.60, 2.00),
            (S, S, 2.60, 2.05, 1.60),
            (H, F, 5.90, 0.92, 2.20),
            (H, CL, 4.60, 1.27, 1.90),
            (H, BR, 3.90, 1.41, 1.80),
            (H, I, 3.20, 1.61, 1.75),
            (C, F, 4.60, 1.35, 2.00),
            (C, CL, 3.50, 1.77, 1.80),
            (C, BR, 2.90, 1.94, 1.70),
            (C, I, 2.40, 2.14, 1.60),
        ];
        let morse = morse_table
            .iter()
            .map(|&(a, b, de, re, w)| (key(a, b), MorseParams { de, re, a: w }))
            .collect();
        let lj_elements: &[(u8, f64, f64)] = &[
            (H, 0.003, 2.5),
            (C, 0.006, 3.2),
            (N, 0.006, 3.1),
            (O, 0.006, 3.0),
            (F, 0.004, 2.9),
            (S, 0.012, 3.5),
            (CL, 0.010, 3.4),
            (BR, 0.013, 3.6),
            (I, 0.017, 3.9),
        ];
        let mut lj = BTreeMap::new();
        for &(a, ea, sa) in lj_elements {
            for &(b, eb, sb) in lj_elements {
                lj.insert(
                    key(a, b),
                    LjParams {
                        epsilon: (ea * eb).sqrt(),
                        sigma: 0.5 * (sa + sb),
                    },
                );
            }
        }
        SurrogateParams {
            morse,
            lj,
            angle_k: 4.0,
            angle_theta0: 109.47_f64.to_radians(),
            torsion_v: 0.1,
            hat_delta: 0.3,
        }
    }
}

/// Atoms involved in a hydrogen transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferSite {
    pub h: usize,
    pub donor: usize,
    pub acceptor: usize,
}

impl TransferSite {
    pub const TAG_H: &'static str = "hat_h";
    pub const TAG_DONOR: &'static str = "hat_donor";
    pub const TAG_ACCEPTOR: &'static str = "hat_acceptor";

    /// Read the site from structure tags, if all three keys are present.
    pub fn from_tags(s: &Structure) -> Option<Self> {
        Some(TransferSite {
            h: s.tag_usize(Self::TAG_H)?,
            donor: s.tag_usize(Self::TAG_DONOR)?,
            acceptor: s.tag_usize(Self::TAG_ACCEPTOR)?,
        })
    }

    pub fn tag(&self, s: Structure) -> Structure {
        s.with_tag(Self::TAG_H, self.h.to_string())
            .with_tag(Self::TAG_DONOR, self.donor.to_string())
            .with_tag(Self::TAG_ACCEPTOR, self.acceptor.to_string())
    }

    fn validate(&self, s: &Structure) -> Result<()> {
        let n = s.len();
        if self.h >= n || self.donor >= n || self.acceptor >= n {
            return Err(Error::Precondition(format!("transfer site {self:?} out of range")));
        }
        if s.elements()[self.h] != units::HYDROGEN {
            return Err(Error::Precondition(format!("atom {} is not hydrogen", self.h)));
        }
        if self.donor == self.acceptor || self.h == self.donor || self.h == self.acceptor {
            return Err(Error::Precondition(format!("degenerate transfer site {self:?}")));
        }
        Ok(())
    }
}

/// The built-in reactive surrogate. Pure; safe to share across threads.
#[derive(Debug, Clone)]
pub struct SurrogateCalculator {
    params: SurrogateParams,
    provenance: String,
}

impl Default for SurrogateCalculator {
    fn default() -> Self {
        Self::new(SurrogateParams::default()).expect("default surrogate parameters are valid")
    }
}

struct Accumulator<'a> {
    pos: &'a [Vec3],
    energy: f64,
    grad: Vec<Vec3>,
}

impl Accumulator<'_> {
    fn r(&self, i: usize, j: usize) -> f64 {
        geom::distance(self.pos[i], self.pos[j])
    }

    /// Threefold torsion `v/2 (1 + cos 3φ)` on dihedral i-j-k-l. Skipped when
    /// either bond angle is (numerically) linear.
    fn torsion(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        let f = geom::sub(self.pos[i], self.pos[j]);
        let g = geom::sub(self.pos[j], self.pos[k]);
        let h = geom::sub(self.pos[l], self.pos[k]);
        let a = geom::cross(f, g);
        let b = geom::cross(h, g);
        let (a2, b2) = (geom::dot(a, a), geom::dot(b, b));
        let gn = geom::norm(g);
        if a2 < 1e-10 || b2 < 1e-10 || gn < 1e-10 {
            return;
        }
        let phi = (geom::dot(geom::cross(b, a), g) / gn).atan2(geom::dot(a, b));
        self.energy += 0.5 * v * (1.0 + (3.0 * phi).cos());
        let de_dphi = -1.5 * v * (3.0 * phi).sin();
        let fg = geom::dot(f, g);
        let hg = geom::dot(h, g);
        let d1 = geom::scale(a, -gn / a2);
        let d4 = geom::scale(b, gn / b2);
        let ta = geom::scale(a, fg / (a2 * gn));
        let tb = geom::scale(b, hg / (b2 * gn));
        let d2 = geom::sub(geom::add(geom::scale(d1, -1.0), ta), tb);
        let d3 = geom::add(geom::sub(geom::scale(d4, -1.0), ta), tb);
        for (idx, d) in [(i, d1), (j, d2), (k, d3), (l, d4)] {
            for c in 0..3 {
                self.grad[idx][c] += de_dphi * d[c];
            }
        }
    }

    /// Add a pair term with energy `e` and radial derivative `de_dr`.
    fn pair(&mut self, i: usize, j: usize, r: f64, e: f64, de_dr: f64) {
        self.energy += e;
        let u = geom::scale(geom::sub(self.pos[i], self.pos[j]), de_dr / r);
        for d in 0..3 {
            self.grad[i][d] += u[d];
            self.grad[j][d] -= u[d];
        }
    }
}

impl SurrogateCalculator {
    pub fn new(params: SurrogateParams) -> Result<Self> {
        params.validate()?;
        let provenance = format!("surrogate:{}", params.hash());
        Ok(SurrogateCalculator { params, provenance })
    }

    pub fn params(&self) -> &SurrogateParams {
        &self.params
    }

    /// Evaluate with an explicit transfer site (or none).
    pub fn evaluate_with(&self, s: &Structure, site: Option<TransferSite>) -> Result<CalcResult> {
        let p = &self.params;
        let n = s.len();
        let z = s.elements();
        let mut bonds = s.bonds_or_inferred()?;
        if let Some(site) = site {
            site.validate(s)?;
            bonds.retain(|&(a, b)| a != site.h && b != site.h);
        }
        let adj = structure::adjacency(n, &bonds);
        let mut acc = Accumulator {
            pos: s.positions(),
            energy: 0.0,
            grad: vec![[0.0; 3]; n],
        };

        for &(i, j) in &bonds {
            let m = p.morse_for(z[i], z[j])?;
            let r = acc.r(i, j);
            let (e, de) = morse(m, r);
            acc.pair(i, j, r, e, de);
        }

        let bonded = |a: usize, b: usize| adj[a].binary_search(&b).is_ok();
        let cos0 = p.angle_theta0.cos();
        if p.angle_k > 0.0 {
            for (c, nbrs) in adj.iter().enumerate() {
                for (x, &a) in nbrs.iter().enumerate() {
                    for &b in &nbrs[x + 1..] {
                        if bonded(a, b) {
                            continue;
                        }
                        let ra = p.morse_for(z[a], z[c])?.re;
                        let rb = p.morse_for(z[b], z[c])?.re;
                        let r0 = (ra * ra + rb * rb - 2.0 * ra * rb * cos0).sqrt();
                        let r = acc.r(a, b);
                        let dr = r - r0;
                        acc.pair(a, b, r, 0.5 * p.angle_k * dr * dr, p.angle_k * dr);
                    }
                }
            }
        }

        if p.torsion_v > 0.0 {
            for &(j, k) in &bonds {
                for &i in &adj[j] {
                    if i == k {
                        continue;
                    }
                    for &l in &adj[k] {
                        if l != j && l != i {
                            acc.torsion(i, j, k, l, p.torsion_v);
                        }
                    }
                }
            }
        }

        let topo = structure::bond_distance_matrix(&adj, 3);
        let excluded_for_h: Vec<bool> = match site {
            Some(site) => {
                let mut ex = vec![false; n];
                for c in [site.donor, site.acceptor] {
                    ex[c] = true;
                    for &k in &adj[c] {
                        ex[k] = true;
                    }
                }
                ex
            }
            None => Vec::new(),
        };
        for i in 0..n {
            for j in i + 1..n {
                let lj_applies = match site {
                    Some(site) => {
                        if i == site.h || j == site.h {
                            let other = if i == site.h { j } else { i };
                            !excluded_for_h[other]
                        } else if (i, j) == (site.donor.min(site.acceptor), site.donor.max(site.acceptor)) {
                            false
                        } else {
                            topo[i][j] >= 3
                        }
                    }
                    None => topo[i][j] >= 3,
                };
                if lj_applies {
                    let l = p.lj_for(z[i], z[j])?;
                    let r = acc.r(i, j);
                    let (e, de) = lj(l, r);
                    acc.pair(i, j, r, e, de);
                }
            }
        }

        if let Some(site) = site {
            let md_p = p.morse_for(z[site.donor], units::HYDROGEN)?;
            let ma_p = p.morse_for(z[site.acceptor], units::HYDROGEN)?;
            let rd = acc.r(site.h, site.donor);
            let ra = acc.r(site.h, site.acceptor);
            let (md, dmd) = morse(md_p, rd);
            let (ma, dma) = morse(ma_p, ra);
            let delta = p.hat_delta;
            let lo = md.min(ma);
            // −Δ ln(e^{−Md/Δ} + e^{−Ma/Δ}) evaluated around the smaller well
            let wd_raw = (-(md - lo) / delta).exp();
            let wa_raw = (-(ma - lo) / delta).exp();
            let sum = wd_raw + wa_raw;
            acc.energy += lo - delta * sum.ln();
            let (wd, wa) = (wd_raw / sum, wa_raw / sum);
            acc.pair(site.h, site.donor, rd, 0.0, wd * dmd);
            acc.pair(site.h, site.acceptor, ra, 0.0, wa * dma);
        }

        let forces = acc.grad.iter().map(|g| [-g[0], -g[1], -g[2]]).collect();
        if !acc.energy.is_finite() {
            return Ok(CalcResult::failed(n, self.provenance.clone(), "non-finite surrogate energy"));
        }
        Ok(CalcResult::ok(acc.energy, forces, self.provenance.clone()))
    }
}

impl Calculator for SurrogateCalculator {
    fn name(&self) -> &str {
        "surrogate"
    }

    fn provenance(&self) -> String {
        self.provenance.clone()
    }

    fn evaluate(&self, s: &Structure) -> Result<CalcResult> {
        self.evaluate_with(s, TransferSite::from_tags(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{random_rotation, unit_vector, RngStream};
    use rand::Rng;

    fn calc() -> SurrogateCalculator {
        SurrogateCalculator::default()
    }

    fn fd_forces(c: &SurrogateCalculator, s: &Structure, site: Option<TransferSite>, h: f64) -> Vec<Vec3> {
        let mut out = vec![[0.0; 3]; s.len()];
        for i in 0..s.len() {
            for d in 0..3 {
                let mut plus = s.position(i);
                plus[d] += h;
                let mut minus = s.position(i);
                minus[d] -= h;
                let ep = c.evaluate_with(&s.clone().with_position(i, plus).unwrap(), site).unwrap().energy;
                let em = c.evaluate_with(&s.clone().with_position(i, minus).unwrap(), site).unwrap().energy;
                out[i][d] = -(ep - em) / (2.0 * h);
            }
        }
        out
    }

    fn max_rel_err(a: &[Vec3], b: &[Vec3]) -> f64 {
        let scale = b.iter().flatten().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-3);
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs() / scale))
    }

    /// Methane-like donor and a methyl radical acceptor, hydrogen in flight.
    fn transfer_system(h_frac: f64) -> (Structure, TransferSite) {
        let t = 1.09 / 3f64.sqrt();
        let donor = [0.0, 0.0, 0.0];
        let acc = [3.0, 0.0, 0.0];
        let mut pos = vec![donor, acc];
        let mut el = vec![6, 6];
        // donor hydrogens
        for p in [[-t, t, t], [-t, -t, -t], [-t, t, -t]] {
            pos.push(p);
            el.push(1);
        }
        // acceptor hydrogens, mirrored
        for p in [[3.0 + t, t, t], [3.0 + t, -t, -t], [3.0 + t, t, -t]] {
            pos.push(p);
            el.push(1);
        }
        let h_pos = geom::lerp(donor, acc, h_frac);
        pos.push(h_pos);
        el.push(1);
        let bonds = vec![(0, 2), (0, 3), (0, 4), (1, 5), (1, 6), (1, 7), (0, 8)];
        let s = Structure::new(el, pos).unwrap().with_bonds(bonds).unwrap();
        (s, TransferSite { h: 8, donor: 0, acceptor: 1 })
    }

    #[test]
    fn diatomic_at_equilibrium() {
        let c = calc();
        let re = c.params().morse_for(6, 6).unwrap().re;
        let de = c.params().morse_for(6, 6).unwrap().de;
        let s = Structure::new(vec![6, 6], vec![[0.0; 3], [0.0, 0.0, re]])
            .unwrap()
            .with_bonds(vec![(0, 1)])
            .unwrap();
        let r = c.evaluate(&s).unwrap();
        assert!((r.energy + de).abs() < 1e-12);
        assert!(r.max_force_component() < 1e-12);
    }

    #[test]
    fn missing_parameters_name_the_pair() {
        let c = calc();
        let s = Structure::new(vec![53, 53], vec![[0.0; 3], [0.0, 0.0, 2.7]])
            .unwrap()
            .with_bonds(vec![(0, 1)])
            .unwrap();
        match c.evaluate(&s) {
            Err(Error::MissingPairParameters { pair, .. }) => assert_eq!(pair, "I-I"),
            other => panic!("expected missing parameters, got {other:?}"),
        }
    }

    #[test]
    fn forces_match_finite_differences() {
        let c = calc();
        let mut rng = RngStream::root(5).rng();
        for k in 0..10 {
            let (s, site) = transfer_system(0.3 + 0.04 * k as f64);
            let jittered: Vec<Vec3> = s
                .positions()
                .iter()
                .map(|p| geom::add(*p, geom::scale(unit_vector(&mut rng), rng.random_range(0.0..0.1))))
                .collect();
            let s = s.with_positions(jittered).unwrap();
            for site in [Some(site), None] {
                let r = c.evaluate_with(&s, site).unwrap();
                let fd = fd_forces(&c, &s, site, 1e-4);
                let err = max_rel_err(&r.forces, &fd);
                assert!(err < 1e-6, "site {site:?} k {k} err {err:e}");
            }
        }
    }

    #[test]
    fn template_forces_match_finite_differences() {
        let c = calc();
        let mut rng = RngStream::root(6).rng();
        for t in crate::templates::library() {
            let jittered: Vec<Vec3> = t
                .structure
                .positions()
                .iter()
                .map(|p| geom::add(*p, geom::scale(unit_vector(&mut rng), rng.random_range(0.0..0.05))))
                .collect();
            let s = t.structure.clone().with_positions(jittered).unwrap();
            let r = c.evaluate(&s).unwrap();
            let fd = fd_forces(&c, &s, None, 1e-4);
            let err = max_rel_err(&r.forces, &fd);
            assert!(err < 1e-6, "{} err {err:e}", t.name);
        }
    }

    #[test]
    fn symmetric_midpoint() {
        let c = calc();
        let (s, site) = transfer_system(0.5);
        let r = c.evaluate_with(&s, Some(site)).unwrap();
        let f = r.forces[site.h];
        assert!(f[0].abs() < 1e-9, "H force along axis {f:?}");
        // mirror x -> 3 - x and swap donor/acceptor roles
        let mirrored: Vec<Vec3> = s.positions().iter().map(|p| [3.0 - p[0], p[1], p[2]]).collect();
        let m = s.clone().with_positions(mirrored).unwrap();
        let rm = c.evaluate_with(&m, Some(site)).unwrap();
        assert!((rm.energy - r.energy).abs() < 1e-9);
        assert!((r.forces[0][0] + r.forces[1][0]).abs() < 1e-9);
    }

    #[test]
    fn transfer_profile_is_a_double_well() {
        let c = calc();
        let (s, site) = transfer_system(0.0);
        let donor = s.position(site.donor);
        let acc = s.position(site.acceptor);
        let re = 1.09;
        let dir = geom::normalize(geom::sub(acc, donor));
        let start = geom::add(donor, geom::scale(dir, re));
        let end = geom::sub(acc, geom::scale(dir, re));
        let n = (geom::distance(start, end) / 0.01).ceil() as usize;
        // extend slightly past both wells so the minima are interior
        let lo = geom::sub(start, geom::scale(dir, 0.2));
        let hi = geom::add(end, geom::scale(dir, 0.2));
        let steps = n + 40;
        let e: Vec<f64> = (0..=steps)
            .map(|k| {
                let p = geom::lerp(lo, hi, k as f64 / steps as f64);
                c.evaluate_with(&s.clone().with_position(site.h, p).unwrap(), Some(site))
                    .unwrap()
                    .energy
            })
            .collect();
        let minima = (1..e.len() - 1).filter(|&k| e[k] < e[k - 1] && e[k] < e[k + 1]).count();
        let maxima = (1..e.len() - 1).filter(|&k| e[k] > e[k - 1] && e[k] > e[k + 1]).count();
        assert_eq!((minima, maxima), (2, 1));
    }

    #[test]
    fn invariances() {
        let c = calc();
        let mut rng = RngStream::root(9).rng();
        let (s, site) = transfer_system(0.35);
        let base = c.evaluate_with(&s, Some(site)).unwrap();
        let net: Vec3 = base.forces.iter().fold([0.0; 3], |a, f| geom::add(a, *f));
        assert!(geom::norm(net) < 1e-9);
        for _ in 0..20 {
            let rot = random_rotation(&mut rng);
            let t = geom::scale(unit_vector(&mut rng), 5.0);
            let moved = structure::rigid_transform(&s, &rot, t).unwrap();
            let r = c.evaluate_with(&moved, Some(site)).unwrap();
            assert!((r.energy - base.energy).abs() < 1e-9);
            for (f, f0) in r.forces.iter().zip(&base.forces) {
                let rf0 = geom::mat_vec(&rot, *f0);
                for d in 0..3 {
                    assert!((f[d] - rf0[d]).abs() < 1e-9);
                }
            }
        }
        // swap two donor hydrogens (2 and 3) with matching bond relabeling
        let mut pos = s.positions().to_vec();
        pos.swap(2, 3);
        let swapped = s.clone().with_positions(pos).unwrap();
        let r = c.evaluate_with(&swapped, Some(site)).unwrap();
        assert!((r.energy - base.energy).abs() < 1e-9);
    }
}
