//! Radical systems, reaction configurations and linear interpolation paths.
//!
//! A radical is made by deleting a hydrogen from a molecule; the heavy atom
//! it was bonded to becomes the acceptor. The transferring hydrogen either
//! sits in the same molecule (intra) or in a second molecule placed next to
//! the radical (inter). Reaction configurations then move that hydrogen onto
//! a sphere around the midpoint between its start position and the acceptor.

use rand::Rng;
use rand_distr::{ChiSquared, Distribution};
use serde::{Deserialize, Serialize};

use crate::calc::{Calculator, SurrogateParams, TransferSite};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::rng;
use crate::structure::{self, Structure, DEFAULT_BOND_SCALE};
use crate::templates::Template;
use crate::units;

pub const TAG_RADICAL_SITE: &str = "radical_site";
pub const TAG_HAT_TYPE: &str = "hat_type";
pub const TAG_FRAME_ROLE: &str = "frame_role";
pub const TAG_SYSTEM_ID: &str = "system_id";
pub const N_INTERP_FRAMES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HatType {
    Intra,
    Inter,
}

impl HatType {
    pub fn as_str(self) -> &'static str {
        match self {
            HatType::Intra => "intra",
            HatType::Inter => "inter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(HatType::Intra),
            "inter" => Ok(HatType::Inter),
            other => Err(Error::Config(format!("unknown hat_type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameRole {
    Start,
    End,
    Sampled,
    Interp,
}

impl FrameRole {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameRole::Start => "start",
            FrameRole::End => "end",
            FrameRole::Sampled => "sampled",
            FrameRole::Interp => "interp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "start" => Ok(FrameRole::Start),
            "end" => Ok(FrameRole::End),
            "sampled" => Ok(FrameRole::Sampled),
            "interp" => Ok(FrameRole::Interp),
            other => Err(Error::Config(format!("unknown frame_role {other:?}"))),
        }
    }
}

/// A molecule ready for system building: geometry with explicit bonds plus
/// the hydrogens allowed to transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub name: String,
    pub class: String,
    pub structure: Structure,
    pub eligible_h: Vec<usize>,
}

impl Molecule {
    pub fn from_template(t: &Template) -> Self {
        Molecule {
            name: t.name.clone(),
            class: t.class.clone(),
            structure: t.structure.clone(),
            eligible_h: t.eligible_h.clone(),
        }
    }

    /// Same molecule at another geometry (e.g. a normal-mode sample).
    pub fn with_geometry(&self, s: Structure) -> Result<Self> {
        if s.elements() != self.structure.elements() {
            return Err(Error::InvalidStructure(format!("geometry does not match molecule {}", self.name)));
        }
        let mut out = self.clone();
        let bonds = self.structure.bonds_or_inferred()?;
        out.structure = s.with_bonds(bonds)?;
        Ok(out)
    }

    pub fn radical_site(&self) -> Option<usize> {
        self.structure.tag_usize(TAG_RADICAL_SITE)
    }
}

/// Which hydrogens may transfer and the intra-system geometry rules.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferPolicy {
    /// Heavy atoms a transferring hydrogen may be bonded to.
    pub donor_elements: Vec<u8>,
    /// Minimum through-bond separation donor ↔ acceptor for intra systems.
    pub intra_min_bonds: usize,
    /// Maximum start H–acceptor distance for intra systems (Å).
    pub intra_max_distance: f64,
}

impl Default for TransferPolicy {
    fn default() -> Self {
        TransferPolicy {
            donor_elements: vec![6, 7, 8],
            intra_min_bonds: 3,
            intra_max_distance: 4.0,
        }
    }
}

impl TransferPolicy {
    pub fn carbon_only() -> Self {
        TransferPolicy {
            donor_elements: vec![6],
            ..Self::default()
        }
    }
}

/// Index of atom `i` after atom `removed` is deleted.
pub fn index_after_removal(i: usize, removed: usize) -> Option<usize> {
    match i.cmp(&removed) {
        std::cmp::Ordering::Less => Some(i),
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some(i - 1),
    }
}

fn heavy_partner(s: &Structure, bonds: &[(usize, usize)], h: usize) -> Result<usize> {
    let partners: Vec<usize> = bonds
        .iter()
        .filter_map(|&(a, b)| if a == h { Some(b) } else if b == h { Some(a) } else { None })
        .collect();
    match partners.as_slice() {
        [p] if s.elements()[*p] != units::HYDROGEN => Ok(*p),
        _ => Err(Error::Precondition(format!(
            "atom {h} must be a hydrogen bonded to exactly one heavy atom (has {} bonds)",
            partners.len()
        ))),
    }
}

/// Remove hydrogen `h` from `s`. The result has multiplicity 2, remapped
/// bonds, and a `radical_site` tag naming the heavy atom `h` was bonded to.
pub fn make_radical(s: &Structure, h: usize) -> Result<Structure> {
    if h >= s.len() || s.elements()[h] != units::HYDROGEN {
        return Err(Error::Precondition(format!("atom {h} is not a hydrogen")));
    }
    let bonds = s.bonds_or_inferred()?;
    let site = heavy_partner(s, &bonds, h)?;
    let mut elements = s.elements().to_vec();
    let mut positions = s.positions().to_vec();
    elements.remove(h);
    positions.remove(h);
    let bonds: Vec<(usize, usize)> = bonds
        .iter()
        .filter_map(|&(a, b)| Some((index_after_removal(a, h)?, index_after_removal(b, h)?)))
        .collect();
    let site = index_after_removal(site, h).expect("site is not the removed atom");
    Structure::new(elements, positions)?
        .with_bonds(bonds)?
        .with_charge(s.charge())
        .with_tags(s.tags().clone())
        .with_multiplicity(2)
        .map(|r| r.with_tag(TAG_RADICAL_SITE, site.to_string()))
}

/// Radical version of a molecule with its eligible-H list remapped.
pub fn radicalize(m: &Molecule, h: usize) -> Result<Molecule> {
    let structure = make_radical(&m.structure, h)?;
    let eligible_h = m.eligible_h.iter().filter_map(|&k| index_after_removal(k, h)).collect();
    Ok(Molecule {
        name: m.name.clone(),
        class: m.class.clone(),
        structure,
        eligible_h,
    })
}

/// A donor–acceptor system at its start geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct RadicalSystem {
    /// Start geometry with explicit bonds (including H–donor).
    pub structure: Structure,
    pub h_index: usize,
    pub donor_index: usize,
    pub acceptor_index: usize,
    pub hat_type: HatType,
    pub molecule_ids: Vec<String>,
    /// Molecule index (0 = donor molecule, 1 = radical molecule) per atom.
    pub molecule_of: Vec<usize>,
    pub system_class: String,
    /// Hydrogens that compete for the closest-H rule.
    pub competing_h: Vec<usize>,
}

impl RadicalSystem {
    pub fn site(&self) -> TransferSite {
        TransferSite {
            h: self.h_index,
            donor: self.donor_index,
            acceptor: self.acceptor_index,
        }
    }

    pub fn h_start(&self) -> Vec3 {
        self.structure.position(self.h_index)
    }

    pub fn acceptor_position(&self) -> Vec3 {
        self.structure.position(self.acceptor_index)
    }

    /// Start H – acceptor separation.
    pub fn transfer_distance(&self) -> f64 {
        geom::distance(self.h_start(), self.acceptor_position())
    }

    /// H at the acceptor–H equilibrium length along acceptor → start H.
    pub fn h_end(&self) -> Result<Vec3> {
        let re = equilibrium_h_length(self.structure.elements()[self.acceptor_index])?;
        let dir = geom::normalize(geom::sub(self.h_start(), self.acceptor_position()));
        Ok(geom::add(self.acceptor_position(), geom::scale(dir, re)))
    }

    /// The system geometry with H moved to `h`, tagged with the transfer
    /// site, HAT type and frame role.
    pub fn frame(&self, h: Vec3, role: FrameRole) -> Result<Structure> {
        let s = self.structure.clone().with_position(self.h_index, h)?;
        Ok(self
            .site()
            .tag(s)
            .with_tag(TAG_HAT_TYPE, self.hat_type.as_str())
            .with_tag(TAG_FRAME_ROLE, role.as_str()))
    }

    /// Check the structural invariants of the start geometry.
    pub fn check_invariants(&self) -> Result<()> {
        let s = &self.structure;
        let z = s.elements();
        let fail = |msg: String| Err(Error::InvalidStructure(format!("radical system: {msg}")));
        if z[self.h_index] != units::HYDROGEN {
            return fail(format!("atom {} is not hydrogen", self.h_index));
        }
        if self.donor_index == self.acceptor_index {
            return fail("donor equals acceptor".into());
        }
        let limit = DEFAULT_BOND_SCALE
            * (units::covalent_radius(units::HYDROGEN)? + units::covalent_radius(z[self.donor_index])?);
        if s.distance(self.h_index, self.donor_index) > limit {
            return fail("transferring hydrogen is not bonded to its donor".into());
        }
        if self.hat_type == HatType::Inter
            && self.molecule_of[self.donor_index] == self.molecule_of[self.acceptor_index]
        {
            return fail("inter system with donor and acceptor in one molecule".into());
        }
        let d = self.transfer_distance();
        for &k in &self.competing_h {
            if k != self.h_index && s.distance(k, self.acceptor_index) < d {
                return fail(format!("hydrogen {k} is closer to the acceptor than the transferring one"));
            }
        }
        Ok(())
    }
}

/// Acceptor–H Morse equilibrium length from the default surrogate table.
pub fn equilibrium_h_length(z: u8) -> Result<f64> {
    thread_local! {
        static PARAMS: SurrogateParams = SurrogateParams::default();
    }
    PARAMS.with(|p| p.morse_for(z, units::HYDROGEN).map(|m| m.re))
}

/// Pick the transferring hydrogen inside a radical (intra HAT).
///
/// Candidates are eligible hydrogens bonded to an allowed donor element,
/// at least `intra_min_bonds` bonds from the radical site and within
/// `intra_max_distance` of it. Candidates are tried in random order; the
/// first one with no other candidate closer to the radical site is chosen.
pub fn select_transfer_pair<R: Rng + ?Sized>(
    radical: &Molecule,
    policy: &TransferPolicy,
    rng: &mut R,
) -> Result<Option<(usize, usize, usize)>> {
    let s = &radical.structure;
    let acceptor = radical
        .radical_site()
        .ok_or_else(|| Error::Precondition("structure has no radical_site tag".into()))?;
    let bonds = s.bonds_or_inferred()?;
    let adj = structure::adjacency(s.len(), &bonds);
    let from_acceptor = structure::bond_distances_from(&adj, acceptor);
    let mut candidates = Vec::new();
    for &h in &radical.eligible_h {
        let Ok(donor) = heavy_partner(s, &bonds, h) else {
            continue;
        };
        if !policy.donor_elements.contains(&s.elements()[donor]) {
            continue;
        }
        if from_acceptor[donor] < policy.intra_min_bonds {
            continue;
        }
        if s.distance(h, acceptor) > policy.intra_max_distance {
            continue;
        }
        candidates.push((h, donor));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    for k in order {
        let (h, donor) = candidates[k];
        let d = s.distance(h, acceptor);
        if candidates.iter().all(|&(o, _)| o == h || s.distance(o, acceptor) >= d) {
            return Ok(Some((h, donor, acceptor)));
        }
    }
    Ok(None)
}

/// Build an intra system from a radical molecule.
pub fn build_intra_system<R: Rng + ?Sized>(
    radical: &Molecule,
    policy: &TransferPolicy,
    rng: &mut R,
) -> Result<Option<RadicalSystem>> {
    let Some((h, donor, acceptor)) = select_transfer_pair(radical, policy, rng)? else {
        return Ok(None);
    };
    let s = &radical.structure;
    let bonds = s.bonds_or_inferred()?;
    let competing_h = intra_candidates(radical, policy, &bonds, acceptor);
    let sys = RadicalSystem {
        structure: s.clone().with_tags(Default::default()),
        h_index: h,
        donor_index: donor,
        acceptor_index: acceptor,
        hat_type: HatType::Intra,
        molecule_ids: vec![radical.name.clone()],
        molecule_of: vec![0; s.len()],
        system_class: format!("intra:{}", radical.class),
        competing_h,
    };
    sys.check_invariants()?;
    Ok(Some(sys))
}

fn intra_candidates(radical: &Molecule, policy: &TransferPolicy, bonds: &[(usize, usize)], acceptor: usize) -> Vec<usize> {
    let s = &radical.structure;
    let adj = structure::adjacency(s.len(), bonds);
    let from_acceptor = structure::bond_distances_from(&adj, acceptor);
    radical
        .eligible_h
        .iter()
        .copied()
        .filter(|&h| {
            heavy_partner(s, bonds, h).is_ok_and(|d| {
                policy.donor_elements.contains(&s.elements()[d])
                    && from_acceptor[d] >= policy.intra_min_bonds
                    && s.distance(h, acceptor) <= policy.intra_max_distance
            })
        })
        .collect()
}

/// Placement parameters for inter systems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterOptions {
    pub chi2_dof: f64,
    /// Å per χ² unit.
    pub chi2_scale: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub max_placements: usize,
    /// Half-angle of the cone around donor → H in which the radical site is placed.
    pub cone_half_angle: f64,
    /// Minimum intermolecular distance (Å), H–acceptor exempt.
    pub clash_distance: f64,
}

impl Default for InterOptions {
    fn default() -> Self {
        InterOptions {
            chi2_dof: 3.0,
            chi2_scale: 0.6,
            d_min: 1.0,
            d_max: 4.0,
            max_placements: 50,
            cone_half_angle: 60f64.to_radians(),
            clash_distance: 1.7,
        }
    }
}

/// Draw the H–radical distance: scaled χ² resampled into `[d_min, d_max]`.
pub fn sample_transfer_distance<R: Rng + ?Sized>(rng: &mut R, opts: &InterOptions) -> f64 {
    let chi2 = ChiSquared::new(opts.chi2_dof).expect("positive degrees of freedom");
    loop {
        let d = opts.chi2_scale * chi2.sample(rng);
        if (opts.d_min..=opts.d_max).contains(&d) {
            return d;
        }
    }
}

fn cone_direction<R: Rng + ?Sized>(rng: &mut R, axis: Vec3, half_angle: f64) -> Vec3 {
    let cos_t = 1.0 - rng.random::<f64>() * (1.0 - half_angle.cos());
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = geom::normalize(geom::cross(axis, helper));
    let e2 = geom::cross(axis, e1);
    geom::add(
        geom::scale(axis, cos_t),
        geom::add(geom::scale(e1, sin_t * phi.cos()), geom::scale(e2, sin_t * phi.sin())),
    )
}

/// Intermolecular clash: closer than the clash distance or close enough to
/// be inferred as bonded.
fn intermolecular_clash(zi: u8, zj: u8, r: f64, clash_distance: f64) -> Result<bool> {
    let bond = DEFAULT_BOND_SCALE * (units::covalent_radius(zi)? + units::covalent_radius(zj)?);
    Ok(r < clash_distance.max(bond))
}

/// Place `radical` next to a randomly chosen eligible hydrogen of `donor`,
/// drawing the distance from the truncated scaled χ² distribution.
pub fn assemble_inter_system<R: Rng + ?Sized>(
    donor: &Molecule,
    radical: &Molecule,
    policy: &TransferPolicy,
    opts: &InterOptions,
    rng: &mut R,
) -> Result<Option<RadicalSystem>> {
    let d = sample_transfer_distance(rng, opts);
    assemble_inter_system_at(donor, radical, d, policy, opts, rng)
}

/// As [`assemble_inter_system`] with a given H–radical distance `d`.
pub fn assemble_inter_system_at<R: Rng + ?Sized>(
    donor: &Molecule,
    radical: &Molecule,
    d: f64,
    policy: &TransferPolicy,
    opts: &InterOptions,
    rng: &mut R,
) -> Result<Option<RadicalSystem>> {
    let acceptor_local = radical
        .radical_site()
        .ok_or_else(|| Error::Precondition("radical has no radical_site tag".into()))?;
    let ds = &donor.structure;
    let rs = &radical.structure;
    let donor_bonds = ds.bonds_or_inferred()?;
    let candidates: Vec<(usize, usize)> = donor
        .eligible_h
        .iter()
        .filter_map(|&h| heavy_partner(ds, &donor_bonds, h).ok().map(|p| (h, p)))
        .filter(|&(_, p)| policy.donor_elements.contains(&ds.elements()[p]))
        .collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    let (h, donor_atom) = candidates[rng.random_range(0..candidates.len())];
    let competing: Vec<usize> = candidates.iter().map(|&(k, _)| k).collect();
    let p_h = ds.position(h);
    let axis = geom::normalize(geom::sub(p_h, ds.position(donor_atom)));
    let anchor = rs.position(acceptor_local);

    for _ in 0..opts.max_placements {
        let rot = rng::random_rotation(rng);
        let target = geom::add(p_h, geom::scale(cone_direction(rng, axis, opts.cone_half_angle), d));
        let placed: Vec<Vec3> = rs
            .positions()
            .iter()
            .map(|p| geom::add(geom::mat_vec(&rot, geom::sub(*p, anchor)), target))
            .collect();

        let mut clash = false;
        'outer: for (i, pi) in ds.positions().iter().enumerate() {
            for (j, pj) in placed.iter().enumerate() {
                if i == h && j == acceptor_local {
                    continue;
                }
                if intermolecular_clash(ds.elements()[i], rs.elements()[j], geom::distance(*pi, *pj), opts.clash_distance)? {
                    clash = true;
                    break 'outer;
                }
            }
        }
        if clash {
            continue;
        }
        let acc_pos = placed[acceptor_local];
        let dh = geom::distance(p_h, acc_pos);
        if competing.iter().any(|&k| k != h && geom::distance(ds.position(k), acc_pos) < dh) {
            continue;
        }

        let n1 = ds.len();
        let mut elements = ds.elements().to_vec();
        elements.extend_from_slice(rs.elements());
        let mut positions = ds.positions().to_vec();
        positions.extend(placed);
        let mut bonds = donor_bonds.clone();
        bonds.extend(rs.bonds_or_inferred()?.iter().map(|&(a, b)| (a + n1, b + n1)));
        let structure = Structure::new(elements, positions)?
            .with_bonds(bonds)?
            .with_charge(ds.charge() + rs.charge())
            .with_multiplicity(2)?;
        let mut molecule_of = vec![0; n1];
        molecule_of.extend(std::iter::repeat_n(1, rs.len()));
        let (x, y) = if donor.class <= radical.class {
            (&donor.class, &radical.class)
        } else {
            (&radical.class, &donor.class)
        };
        let sys = RadicalSystem {
            structure,
            h_index: h,
            donor_index: donor_atom,
            acceptor_index: acceptor_local + n1,
            hat_type: HatType::Inter,
            molecule_ids: vec![donor.name.clone(), radical.name.clone()],
            molecule_of,
            system_class: format!("inter:{x}+{y}"),
            competing_h: competing,
        };
        sys.check_invariants()?;
        return Ok(Some(sys));
    }
    Ok(None)
}

/// Probabilities of emitting the start, end or a sphere-sampled frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoleProbabilities {
    pub start: f64,
    pub end: f64,
    pub sampled: f64,
}

impl Default for RoleProbabilities {
    fn default() -> Self {
        RoleProbabilities {
            start: 0.25,
            end: 0.25,
            sampled: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfigOptions {
    pub roles: RoleProbabilities,
    /// Sphere radius bound as a fraction of half the H–acceptor distance.
    pub sphere_fraction: f64,
    /// Global minimum interatomic distance (Å).
    pub min_distance: f64,
    /// H–donor / H–acceptor may approach this fraction of their Morse r_e.
    pub h_pair_fraction: f64,
    pub max_de_ev: f64,
}

impl Default for ConfigOptions {
    fn default() -> Self {
        ConfigOptions {
            roles: RoleProbabilities::default(),
            sphere_fraction: 0.75,
            min_distance: 0.7,
            h_pair_fraction: 0.8,
            max_de_ev: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionConfiguration {
    /// Full geometry, tagged with the transfer site and frame role.
    pub structure: Structure,
    pub role: FrameRole,
    /// Energy under the filtering calculator, if one was attached.
    pub energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigRejection {
    Clash { pair: (usize, usize), distance: f64 },
    Energy { delta_e: f64 },
    CalculatorFailed(String),
}

/// Clash check for a frame of `sys`: every pair at least `min_distance`
/// apart, the transferring H at least `h_pair_fraction · r_e` from donor and
/// acceptor.
pub fn check_clashes(sys: &RadicalSystem, s: &Structure, opts: &ConfigOptions) -> Result<Option<ConfigRejection>> {
    let z = s.elements();
    let h = sys.h_index;
    let special = |other: usize| -> Result<Option<f64>> {
        if other == sys.donor_index || other == sys.acceptor_index {
            Ok(Some(opts.h_pair_fraction * equilibrium_h_length(z[other])?))
        } else {
            Ok(None)
        }
    };
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            let r = s.distance(i, j);
            let mut limit = opts.min_distance;
            if i == h || j == h {
                if let Some(l) = special(if i == h { j } else { i })? {
                    limit = l;
                }
            }
            if r < limit {
                return Ok(Some(ConfigRejection::Clash { pair: (i, j), distance: r }));
            }
        }
    }
    Ok(None)
}

fn pick_role<R: Rng + ?Sized>(rng: &mut R, p: &RoleProbabilities) -> FrameRole {
    let total = p.start + p.end + p.sampled;
    let u = rng.random::<f64>() * total;
    if u < p.start {
        FrameRole::Start
    } else if u < p.start + p.end {
        FrameRole::End
    } else {
        FrameRole::Sampled
    }
}

/// Uniform point in the ball of radius `rho_max`, as (radius, direction).
pub fn sphere_point<R: Rng + ?Sized>(rng: &mut R, rho_max: f64) -> (f64, Vec3) {
    let rho = rng.random::<f64>() * rho_max;
    (rho, rng::unit_vector(rng))
}

/// H position for a sampled frame: midpoint of start H and acceptor plus
/// `rho · direction`.
pub fn sampled_h_position(sys: &RadicalSystem, rho: f64, direction: Vec3) -> Vec3 {
    let c = geom::lerp(sys.h_start(), sys.acceptor_position(), 0.5);
    geom::add(c, geom::scale(direction, rho))
}

/// Draw one reaction configuration. With a calculator attached, frames
/// more than `max_de_ev` above min(E_start, E_end) are rejected.
pub fn sample_reaction_configuration<R: Rng + ?Sized>(
    sys: &RadicalSystem,
    rng: &mut R,
    calc: Option<&dyn Calculator>,
    opts: &ConfigOptions,
) -> Result<std::result::Result<ReactionConfiguration, ConfigRejection>> {
    let role = pick_role(rng, &opts.roles);
    let h = match role {
        FrameRole::Start => sys.h_start(),
        FrameRole::End => sys.h_end()?,
        _ => {
            let rho_max = opts.sphere_fraction * sys.transfer_distance() / 2.0;
            let (rho, dir) = sphere_point(rng, rho_max);
            sampled_h_position(sys, rho, dir)
        }
    };
    let s = sys.frame(h, role)?;
    finish_configuration(sys, s, role, calc, opts)
}

/// Clash and energy filters shared by sampled and explicitly placed frames.
pub fn finish_configuration(
    sys: &RadicalSystem,
    s: Structure,
    role: FrameRole,
    calc: Option<&dyn Calculator>,
    opts: &ConfigOptions,
) -> Result<std::result::Result<ReactionConfiguration, ConfigRejection>> {
    if let Some(rej) = check_clashes(sys, &s, opts)? {
        return Ok(Err(rej));
    }
    let mut energy = None;
    if let Some(calc) = calc {
        let eval = |st: &Structure| -> Result<std::result::Result<f64, ConfigRejection>> {
            let r = calc.evaluate(st)?;
            Ok(if r.converged {
                Ok(r.energy)
            } else {
                Err(ConfigRejection::CalculatorFailed(r.message.unwrap_or_default()))
            })
        };
        let e = match eval(&s)? {
            Ok(e) => e,
            Err(rej) => return Ok(Err(rej)),
        };
        let e_start = match eval(&sys.frame(sys.h_start(), FrameRole::Start)?)? {
            Ok(e) => e,
            Err(rej) => return Ok(Err(rej)),
        };
        let e_end = match eval(&sys.frame(sys.h_end()?, FrameRole::End)?)? {
            Ok(e) => e,
            Err(rej) => return Ok(Err(rej)),
        };
        let delta_e = e - e_start.min(e_end);
        if delta_e > opts.max_de_ev {
            return Ok(Err(ConfigRejection::Energy { delta_e }));
        }
        energy = Some(e);
    }
    Ok(Ok(ReactionConfiguration {
        structure: s,
        role,
        energy,
    }))
}

/// Check that a frame of `sys` keeps the molecule partition of an inter
/// system: no inferred bond crosses molecules unless it involves the
/// transferring hydrogen.
pub fn check_partition(sys: &RadicalSystem, s: &Structure) -> Result<()> {
    if sys.hat_type == HatType::Intra {
        return Ok(());
    }
    for (i, j) in structure::infer_bonds(s, DEFAULT_BOND_SCALE)? {
        if sys.molecule_of[i] != sys.molecule_of[j] && i != sys.h_index && j != sys.h_index {
            return Err(Error::InvalidStructure(format!("bond {i}-{j} crosses molecules")));
        }
    }
    Ok(())
}

/// `(max(E) − E[0], max(E) − E[last])`.
pub fn barriers(energies: &[f64]) -> (f64, f64) {
    let max = energies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max - energies[0], max - energies[energies.len() - 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationPath {
    pub frames: Vec<Structure>,
    pub energies: Vec<f64>,
    pub forces: Vec<Vec<Vec3>>,
    pub barrier_left: f64,
    pub barrier_right: f64,
    /// False if any frame failed to label.
    pub valid: bool,
}

/// The 12 frames with H at `start + t (end − start)`, `t = k/11`.
pub fn interpolation_frames(sys: &RadicalSystem) -> Result<Vec<Structure>> {
    let (a, b) = (sys.h_start(), sys.h_end()?);
    (0..N_INTERP_FRAMES)
        .map(|k| {
            let t = k as f64 / (N_INTERP_FRAMES - 1) as f64;
            let role = match k {
                0 => FrameRole::Start,
                k if k == N_INTERP_FRAMES - 1 => FrameRole::End,
                _ => FrameRole::Interp,
            };
            sys.frame(geom::lerp(a, b, t), role)
        })
        .collect()
}

/// Label the interpolation frames and extract barriers.
pub fn linear_interpolation(sys: &RadicalSystem, calc: &dyn Calculator) -> Result<InterpolationPath> {
    let frames = interpolation_frames(sys)?;
    let results = crate::calc::batch_evaluate(&frames, calc, 1);
    let valid = results.iter().all(|r| r.converged);
    let energies: Vec<f64> = results.iter().map(|r| r.energy).collect();
    let forces = results.into_iter().map(|r| r.forces).collect();
    let (barrier_left, barrier_right) = if valid { barriers(&energies) } else { (f64::NAN, f64::NAN) };
    Ok(InterpolationPath {
        frames,
        energies,
        forces,
        barrier_left,
        barrier_right,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calc::{ConstantCalculator, SurrogateCalculator};
    use crate::rng::RngStream;
    use crate::templates;

    fn methane() -> Structure {
        let t = 1.09 / 3f64.sqrt();
        Structure::new(
            vec![6, 1, 1, 1, 1],
            vec![[0.0; 3], [t, t, t], [-t, -t, t], [-t, t, -t], [t, -t, -t]],
        )
        .unwrap()
        .with_bonds(vec![(0, 1), (0, 2), (0, 3), (0, 4)])
        .unwrap()
    }

    fn molecule(name: &str) -> Molecule {
        Molecule::from_template(templates::library().iter().find(|t| t.name == name).unwrap())
    }

    #[test]
    fn radical_from_methane() {
        let r = make_radical(&methane(), 2).unwrap();
        assert_eq!(r.len(), 4);
        assert_eq!(r.multiplicity(), 2);
        assert_eq!(r.tag_usize(TAG_RADICAL_SITE), Some(0));
        assert_eq!(r.bonds().unwrap(), &[(0, 1), (0, 2), (0, 3)]);
        assert!(r.bonds().unwrap().iter().all(|&(a, b)| a < 4 && b < 4));
        assert!(make_radical(&methane(), 0).is_err());
    }

    #[test]
    fn hydrogen_with_two_bonds_is_refused() {
        let s = Structure::new(vec![8, 1, 8], vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
            .unwrap()
            .with_bonds(vec![(0, 1), (1, 2)])
            .unwrap();
        assert!(make_radical(&s, 1).is_err());
    }

    /// Bent four-carbon chain with the radical at C0. H4 sits on C2 (two
    /// bonds away), H6 on C1, H5 and optionally H7 on C3.
    fn chain_radical(extra_h: bool) -> Molecule {
        let mut z = vec![6, 6, 6, 6, 1, 1, 1];
        let mut pos = vec![
            [0.0, 0.0, 0.0],
            [1.5, 0.0, 0.0],
            [2.25, 1.3, 0.0],
            [1.5, 2.6, 0.0],
            [3.3, 1.3, 0.0],
            [0.5, 2.9, 0.0],
            [1.5, -1.09, 0.0],
        ];
        let mut bonds = vec![(0, 1), (1, 2), (2, 3), (2, 4), (3, 5), (1, 6)];
        let mut eligible = vec![4, 5, 6];
        if extra_h {
            z.push(1);
            pos.push([1.8, 3.3, 0.8]);
            bonds.push((3, 7));
            eligible.push(7);
        }
        let s = Structure::new(z, pos)
            .unwrap()
            .with_bonds(bonds)
            .unwrap()
            .with_multiplicity(2)
            .unwrap()
            .with_tag(TAG_RADICAL_SITE, "0");
        Molecule {
            name: "chain".into(),
            class: "aminoacid".into(),
            structure: s,
            eligible_h: eligible,
        }
    }

    #[test]
    fn only_distant_donors_qualify() {
        let policy = TransferPolicy::default();
        let mut rng = RngStream::root(1).rng();
        for _ in 0..20 {
            let pick = select_transfer_pair(&chain_radical(false), &policy, &mut rng).unwrap();
            assert_eq!(pick, Some((5, 3, 0)));
        }
        let strict = TransferPolicy {
            intra_min_bonds: 4,
            ..policy.clone()
        };
        assert_eq!(select_transfer_pair(&chain_radical(false), &strict, &mut rng).unwrap(), None);
        let near = TransferPolicy {
            intra_max_distance: 2.5,
            ..policy
        };
        assert_eq!(select_transfer_pair(&chain_radical(false), &near, &mut rng).unwrap(), None);
    }

    #[test]
    fn closer_competing_candidate_rejects_the_farther_one() {
        let m = chain_radical(true);
        let policy = TransferPolicy::default();
        let mut rng = RngStream::root(2).rng();
        for _ in 0..20 {
            let (h, _, _) = select_transfer_pair(&m, &policy, &mut rng).unwrap().unwrap();
            assert_eq!(h, 5);
        }
        // without the nearer competitor the far hydrogen is accepted
        let mut alone = m.clone();
        alone.eligible_h = vec![7];
        assert_eq!(select_transfer_pair(&alone, &policy, &mut rng).unwrap(), Some((7, 3, 0)));
        let sys = build_intra_system(&m, &policy, &mut rng).unwrap().unwrap();
        assert_eq!(sys.system_class, "intra:aminoacid");
        assert!(sys.structure.tag(TAG_RADICAL_SITE).is_none());
    }

    #[test]
    fn single_atoms_too_close_clash() {
        let h = Molecule {
            name: "h".into(),
            class: "aminoacid".into(),
            structure: Structure::new(vec![6, 1], vec![[0.0; 3], [1.09, 0.0, 0.0]])
                .unwrap()
                .with_bonds(vec![(0, 1)])
                .unwrap(),
            eligible_h: vec![1],
        };
        let c = Molecule {
            name: "c".into(),
            class: "aminoacid".into(),
            structure: Structure::new(vec![6], vec![[0.0; 3]]).unwrap().with_tag(TAG_RADICAL_SITE, "0"),
            eligible_h: vec![],
        };
        let mut rng = RngStream::root(3).rng();
        let opts = InterOptions::default();
        // radical carbon 0.5 Å from H ends up ~1.6 Å from the donor carbon
        let sys = assemble_inter_system_at(&h, &c, 0.5, &TransferPolicy::default(), &opts, &mut rng).unwrap();
        assert!(sys.is_none());
        let sys = assemble_inter_system_at(&h, &c, 2.0, &TransferPolicy::default(), &opts, &mut rng).unwrap();
        assert!(sys.is_some());
    }

    #[test]
    fn inter_bookkeeping() {
        let opts = InterOptions::default();
        let policy = TransferPolicy::default();
        let mut rng = RngStream::root(4).rng();
        let donor = molecule("ala");
        let acc_mol = molecule("gly");
        let radical = radicalize(&acc_mol, acc_mol.eligible_h[0]).unwrap();
        let mut built = 0;
        for _ in 0..20 {
            if let Some(sys) = assemble_inter_system(&donor, &radical, &policy, &opts, &mut rng).unwrap() {
                built += 1;
                assert_eq!(sys.structure.len(), donor.structure.len() + acc_mol.structure.len() - 1);
                assert_eq!(sys.molecule_ids, vec!["ala".to_string(), "gly".to_string()]);
                assert_eq!(sys.system_class, "inter:aminoacid+aminoacid");
                let d = sys.transfer_distance();
                assert!((1.0..=4.0).contains(&d));
                sys.check_invariants().unwrap();
                check_partition(&sys, &sys.structure).unwrap();
            }
        }
        assert!(built > 10);
    }

    fn symmetric_system() -> RadicalSystem {
        // two methyl groups 3 Å apart, H exactly on the axis
        let t = 1.09 / 3f64.sqrt();
        let mut pos = vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        pos.extend([[-t, t, t], [-t, -t, t], [-t, 0.0, -1.0]]);
        pos.extend([[3.0 + t, t, t], [3.0 + t, -t, t], [3.0 + t, 0.0, -1.0]]);
        let re = equilibrium_h_length(6).unwrap();
        pos.push([re, 0.0, 0.0]);
        let s = Structure::new(vec![6, 6, 1, 1, 1, 1, 1, 1, 1], pos)
            .unwrap()
            .with_bonds(vec![(0, 2), (0, 3), (0, 4), (1, 5), (1, 6), (1, 7), (0, 8)])
            .unwrap()
            .with_multiplicity(2)
            .unwrap();
        RadicalSystem {
            structure: s,
            h_index: 8,
            donor_index: 0,
            acceptor_index: 1,
            hat_type: HatType::Inter,
            molecule_ids: vec!["a".into(), "b".into()],
            molecule_of: vec![0, 1, 0, 0, 0, 1, 1, 1, 0],
            system_class: "inter:x+x".into(),
            competing_h: vec![2, 3, 4, 8],
        }
    }

    #[test]
    fn interpolation_geometry_and_barriers() {
        let sys = symmetric_system();
        let flat = linear_interpolation(&sys, &ConstantCalculator { energy: -3.0 }).unwrap();
        assert_eq!(flat.frames.len(), 12);
        assert_eq!((flat.barrier_left, flat.barrier_right), (0.0, 0.0));

        let a = sys.h_start();
        let b = sys.h_end().unwrap();
        let step = geom::distance(a, b) / 11.0;
        for (k, f) in flat.frames.iter().enumerate() {
            let p = f.position(sys.h_index);
            // collinearity residual
            let along = geom::sub(b, a);
            let rel = geom::sub(p, a);
            let resid = geom::norm(geom::cross(rel, along)) / geom::norm(along);
            assert!(resid < 1e-10);
            if k > 0 {
                let prev = flat.frames[k - 1].position(sys.h_index);
                assert!((geom::distance(p, prev) - step).abs() < 1e-10);
            }
        }

        let surrogate = SurrogateCalculator::default();
        let path = linear_interpolation(&sys, &surrogate).unwrap();
        assert!(path.valid);
        assert!((path.barrier_left - path.barrier_right).abs() < 1e-9);
        assert!(path.barrier_left > 0.0);
        let (l, r) = barriers(&path.energies);
        assert_eq!((l, r), (path.barrier_left, path.barrier_right));
    }

    #[test]
    fn sampled_positions_stay_in_the_ball() {
        let sys = symmetric_system();
        let mut rng = RngStream::root(5).rng();
        let opts = ConfigOptions::default();
        let c = geom::lerp(sys.h_start(), sys.acceptor_position(), 0.5);
        let bound = 0.75 * sys.transfer_distance() / 2.0;
        let mut roles = std::collections::BTreeMap::new();
        for _ in 0..400 {
            if let Ok(cfg) = sample_reaction_configuration(&sys, &mut rng, None, &opts).unwrap() {
                *roles.entry(cfg.role).or_insert(0) += 1;
                if cfg.role == FrameRole::Sampled {
                    assert!(geom::distance(cfg.structure.position(8), c) <= bound + 1e-12);
                }
            }
        }
        assert!(roles.len() == 3);
        assert_eq!(sampled_h_position(&sys, 0.0, [0.0, 0.0, 1.0]), c);
    }

    #[test]
    fn energy_filter_and_clash_check() {
        let sys = symmetric_system();
        let calc = SurrogateCalculator::default();
        // H pulled off the axis, far from both carbons
        let off = sys.frame([1.5, 1.6, 0.0], FrameRole::Sampled).unwrap();
        let opts = ConfigOptions::default();
        let out = finish_configuration(&sys, off.clone(), FrameRole::Sampled, Some(&calc), &opts).unwrap();
        let e = out.unwrap().energy.unwrap();
        let tight = ConfigOptions {
            max_de_ev: 0.5,
            ..opts
        };
        let out = finish_configuration(&sys, off, FrameRole::Sampled, Some(&calc), &tight).unwrap();
        assert!(matches!(out, Err(ConfigRejection::Energy { delta_e }) if delta_e > 0.5 && e.is_finite()));
        // H 0.3 Å from the acceptor carbon is a clash
        let s = sys.frame([2.7, 0.0, 0.0], FrameRole::Sampled).unwrap();
        let out = finish_configuration(&sys, s, FrameRole::Sampled, None, &opts).unwrap();
        assert!(matches!(out, Err(ConfigRejection::Clash { pair: (1, 8), .. })), "{out:?}");
    }

    #[test]
    fn chi2_draws_are_truncated() {
        let mut rng = RngStream::root(6).rng();
        let opts = InterOptions::default();
        for _ in 0..2000 {
            let d = sample_transfer_distance(&mut rng, &opts);
            assert!((1.0..=4.0).contains(&d));
        }
    }
}
