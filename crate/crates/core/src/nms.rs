//! Geometry relaxation, finite-difference Hessians, normal-mode analysis and
//! normal-mode sampling.
//!
//! Sampling follows the ANI recipe: per-mode fractions `c_m` of a harmonic
//! budget `3/2 · N · kB · T` are drawn uniformly from the simplex
//! `{c ≥ 0, Σc ≤ 1}`, and each mode is displaced by
//! `R_m = ±sqrt(3 c_m N kB T / k_m)` along its Cartesian direction.
//!
//! Modes are stored twice: as orthonormal eigenvectors of the mass-weighted
//! Hessian, and as unit Cartesian displacement directions. The Cartesian
//! directions are Hessian-orthogonal, so the harmonic energy of a
//! superposition is exactly `Σ ½ k_m R_m²`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::calc::{batch_evaluate, Calculator};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::structure::Structure;
use crate::units;

pub const DEFAULT_TOL_FORCE: f64 = 1e-3;
pub const DEFAULT_MAX_STEPS: usize = 2000;
pub const DEFAULT_HESSIAN_STEP: f64 = 0.005;
/// Eigenvalues (eV/(Å²·amu)) below this magnitude count as zero modes.
pub const ZERO_EIGENVALUE: f64 = 1e-6;
/// Principal-moment ratio below which a molecule is treated as linear.
pub const LINEAR_INERTIA_RATIO: f64 = 1e-6;
/// Tag written on relaxed structures.
pub const TAG_RELAX_CONVERGED: &str = "relax_converged";

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    /// Final (best) geometry, tagged with `relax_converged=true|false`.
    pub structure: Structure,
    pub energy: f64,
    pub max_force: f64,
    pub converged: bool,
    pub steps: usize,
}

fn flatten(p: &[Vec3]) -> Vec<f64> {
    p.iter().flatten().copied().collect()
}

fn unflatten(x: &[f64]) -> Vec<Vec3> {
    x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Energy and gradient at flat coordinates `x`.
fn energy_gradient(s: &Structure, x: &[f64], calc: &dyn Calculator) -> Result<(f64, Vec<f64>)> {
    let trial = s.clone().with_positions(unflatten(x))?;
    let r = calc.evaluate(&trial)?;
    if !r.converged {
        return Err(Error::Calculator(r.message.unwrap_or_else(|| "evaluation failed".into())));
    }
    Ok((r.energy, r.forces.iter().flatten().map(|f| -f).collect()))
}

/// Local minimisation with L-BFGS and a backtracking (Armijo) line search.
///
/// Bonds present on `s` are kept fixed for the whole run, so a relaxation
/// never changes the topology the calculator sees.
pub fn optimize_geometry(s: &Structure, calc: &dyn Calculator, tol_force: f64) -> Result<OptimizeResult> {
    optimize_geometry_with(s, calc, tol_force, DEFAULT_MAX_STEPS)
}

pub fn optimize_geometry_with(
    s: &Structure,
    calc: &dyn Calculator,
    tol_force: f64,
    max_steps: usize,
) -> Result<OptimizeResult> {
    const MEMORY: usize = 10;
    const MAX_DISPLACEMENT: f64 = 0.2;
    const MIN_STEP: f64 = 1e-8;

    let s = if s.bonds().is_some() {
        s.clone()
    } else {
        let bonds = s.bonds_or_inferred()?;
        s.clone().with_bonds(bonds)?
    };
    let mut x = flatten(s.positions());
    let (mut e, mut g) = energy_gradient(&s, &x, calc)?;
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut steps = 0;
    let mut converged = max_abs(&g) < tol_force;

    while !converged && steps < max_steps {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (sv, yv, rho) in history.iter().rev() {
            let a = rho * dotv(sv, &q);
            for (qi, yi) in q.iter_mut().zip(yv) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((sv, yv, _)) = history.last() {
            let gamma = dotv(sv, yv) / dotv(yv, yv);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            // first step: steepest descent with a modest length
            let gmax = max_abs(&q).max(1e-12);
            let scale = (0.05 / gmax).min(0.01);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for ((sv, yv, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dotv(yv, &q);
            for (qi, si) in q.iter_mut().zip(sv) {
                *qi += si * (a - b);
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dotv(&dir, &g);
        if slope >= 0.0 {
            history.clear();
            dir = g.iter().map(|v| -v * 0.01).collect();
            slope = dotv(&dir, &g);
        }
        let longest = unflatten(&dir).iter().map(|d| geom::norm(*d)).fold(0.0, f64::max);
        let mut t = if longest > MAX_DISPLACEMENT { MAX_DISPLACEMENT / longest } else { 1.0 };

        let mut accepted = None;
        while t * longest >= MIN_STEP {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            match energy_gradient(&s, &xn, calc) {
                Ok((en, gn)) if en <= e + 1e-4 * t * slope => {
                    accepted = Some((xn, en, gn));
                    break;
                }
                _ => t *= 0.5,
            }
        }
        let Some((xn, en, gn)) = accepted else {
            break;
        };
        steps += 1;
        let sv: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dotv(&sv, &yv);
        if sy > 1e-12 {
            history.push((sv, yv, 1.0 / sy));
            if history.len() > MEMORY {
                history.remove(0);
            }
        }
        x = xn;
        e = en;
        g = gn;
        converged = max_abs(&g) < tol_force;
    }

    let max_force = max_abs(&g);
    let structure = s
        .with_positions(unflatten(&x))?
        .with_tag(TAG_RELAX_CONVERGED, converged.to_string());
    Ok(OptimizeResult {
        structure,
        energy: e,
        max_force,
        converged,
        steps,
    })
}

/// Finite-difference Hessian (eV/Å²) from central differences of forces,
/// symmetrised. Row/column `3i + d` is atom `i`, Cartesian component `d`.
pub fn compute_hessian(s: &Structure, calc: &dyn Calculator, step: f64) -> Result<DMatrix<f64>> {
    compute_hessian_with(s, calc, step, 1)
}

pub fn compute_hessian_with(
    s: &Structure,
    calc: &dyn Calculator,
    step: f64,
    workers: usize,
) -> Result<DMatrix<f64>> {
    if !(step > 0.0) {
        return Err(Error::Precondition(format!("hessian step must be positive, got {step}")));
    }
    let n3 = 3 * s.len();
    let mut displaced = Vec::with_capacity(2 * n3);
    for a in 0..n3 {
        for sign in [1.0, -1.0] {
            let mut p = s.position(a / 3);
            p[a % 3] += sign * step;
            displaced.push(s.clone().with_position(a / 3, p)?);
        }
    }
    let results = batch_evaluate(&displaced, calc, workers);
    let mut h = DMatrix::zeros(n3, n3);
    for a in 0..n3 {
        let (plus, minus) = (&results[2 * a], &results[2 * a + 1]);
        for r in [plus, minus] {
            if !r.converged {
                return Err(Error::Calculator(format!(
                    "hessian displacement {a} failed: {}",
                    r.message.as_deref().unwrap_or("unknown")
                )));
            }
        }
        let fp = flatten(&plus.forces);
        let fm = flatten(&minus.forces);
        for b in 0..n3 {
            h[(a, b)] = -(fp[b] - fm[b]) / (2.0 * step);
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

#[derive(Debug, Clone)]
pub struct NormalModes {
    /// Orthonormal eigenvectors of the projected mass-weighted Hessian (3N each).
    pub mass_weighted: Vec<Vec<f64>>,
    /// Unit Cartesian displacement direction of each mode (N×3).
    pub modes: Vec<Vec<Vec3>>,
    /// Mass-weighted eigenvalues, eV/(Å²·amu).
    pub eigenvalues: Vec<f64>,
    /// Effective force constants along `modes`, eV/Å².
    pub force_constants: Vec<f64>,
    pub frequencies_cm1: Vec<f64>,
    pub reference: Structure,
    pub reference_energy: f64,
    pub linear: bool,
}

impl NormalModes {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

/// Whether the principal moments of inertia mark the structure as linear.
pub fn is_linear(s: &Structure) -> Result<bool> {
    if s.len() < 3 {
        return Ok(true);
    }
    let masses: Vec<f64> = s.elements().iter().map(|&z| units::atomic_mass(z)).collect::<Result<_>>()?;
    let com = center_of_mass(s.positions(), &masses);
    let mut inertia = nalgebra::Matrix3::<f64>::zeros();
    for (p, m) in s.positions().iter().zip(&masses) {
        let r = geom::sub(*p, com);
        let r2 = geom::dot(r, r);
        for a in 0..3 {
            inertia[(a, a)] += m * r2;
            for b in 0..3 {
                inertia[(a, b)] -= m * r[a] * r[b];
            }
        }
    }
    let ev = inertia.symmetric_eigenvalues();
    let max = ev.max();
    Ok(max <= 0.0 || ev.min().max(0.0) / max < LINEAR_INERTIA_RATIO)
}

fn center_of_mass(p: &[Vec3], masses: &[f64]) -> Vec3 {
    let total: f64 = masses.iter().sum();
    let mut c = [0.0; 3];
    for (x, m) in p.iter().zip(masses) {
        c = geom::add(c, geom::scale(*x, *m));
    }
    geom::scale(c, 1.0 / total)
}

/// Orthonormal basis of mass-weighted translations and rotations.
fn external_basis(s: &Structure, masses: &[f64]) -> Vec<Vec<f64>> {
    let n = s.len();
    let com = center_of_mass(s.positions(), masses);
    let mut raw = Vec::with_capacity(6);
    for d in 0..3 {
        let mut v = vec![0.0; 3 * n];
        for i in 0..n {
            v[3 * i + d] = masses[i].sqrt();
        }
        raw.push(v);
    }
    for axis in 0..3 {
        let e = {
            let mut e = [0.0; 3];
            e[axis] = 1.0;
            e
        };
        let mut v = vec![0.0; 3 * n];
        for i in 0..n {
            let r = geom::sub(s.position(i), com);
            let c = geom::cross(e, r);
            for d in 0..3 {
                v[3 * i + d] = masses[i].sqrt() * c[d];
            }
        }
        raw.push(v);
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in raw {
        for b in &basis {
            let p = dotv(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let nv = dotv(&v, &v).sqrt();
        if nv > 1e-6 {
            v.iter_mut().for_each(|x| *x /= nv);
            basis.push(v);
        }
    }
    basis
}

/// Mass-weight, project out rigid-body motion, diagonalise and keep the
/// 3N−6 (3N−5 if linear) vibrational modes.
pub fn normal_mode_analysis(hessian: &DMatrix<f64>, s: &Structure, reference_energy: f64) -> Result<NormalModes> {
    let n = s.len();
    let n3 = 3 * n;
    if hessian.nrows() != n3 || hessian.ncols() != n3 {
        return Err(Error::LengthMismatch(format!(
            "hessian is {}x{} for {n} atoms",
            hessian.nrows(),
            hessian.ncols()
        )));
    }
    let masses: Vec<f64> = s.elements().iter().map(|&z| units::atomic_mass(z)).collect::<Result<_>>()?;
    let inv_sqrt_m: Vec<f64> = (0..n3).map(|a| 1.0 / masses[a / 3].sqrt()).collect();
    let mut hmw = hessian.clone();
    for a in 0..n3 {
        for b in 0..n3 {
            hmw[(a, b)] *= inv_sqrt_m[a] * inv_sqrt_m[b];
        }
    }
    let linear = is_linear(s)?;
    let basis = external_basis(s, &masses);
    let n_external = basis.len();
    let mut proj = DMatrix::<f64>::identity(n3, n3);
    for v in &basis {
        let col = nalgebra::DVector::from_column_slice(v);
        proj -= &col * col.transpose();
    }
    let projected = &proj * hmw * &proj;
    let projected = (&projected + projected.transpose()) * 0.5;
    let eig = SymmetricEigen::new(projected);

    let mut order: Vec<usize> = (0..n3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].abs().total_cmp(&eig.eigenvalues[b].abs()));
    let near_zero = order
        .iter()
        .filter(|&&k| eig.eigenvalues[k].abs() < ZERO_EIGENVALUE)
        .count();
    if near_zero > n_external {
        return Err(Error::NotAMinimum(format!(
            "not at a minimum or ill-conditioned Hessian: {near_zero} near-zero eigenvalues, expected {n_external}"
        )));
    }
    let mut kept: Vec<usize> = order[n_external..].to_vec();
    kept.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    if let Some(&k) = kept.iter().find(|&&k| eig.eigenvalues[k] <= 0.0) {
        return Err(Error::NotAMinimum(format!(
            "not at a minimum: imaginary mode with eigenvalue {:.3e}",
            eig.eigenvalues[k]
        )));
    }

    let mut out = NormalModes {
        mass_weighted: Vec::with_capacity(kept.len()),
        modes: Vec::with_capacity(kept.len()),
        eigenvalues: Vec::with_capacity(kept.len()),
        force_constants: Vec::with_capacity(kept.len()),
        frequencies_cm1: Vec::with_capacity(kept.len()),
        reference: s.clone(),
        reference_energy,
        linear,
    };
    for k in kept {
        let lambda = eig.eigenvalues[k];
        let e: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let u: Vec<f64> = e.iter().zip(&inv_sqrt_m).map(|(x, w)| x * w).collect();
        let u2 = dotv(&u, &u);
        let unit: Vec<f64> = u.iter().map(|x| x / u2.sqrt()).collect();
        out.force_constants.push(lambda / u2);
        out.frequencies_cm1.push(lambda.sqrt() * units::EV_A2_AMU_TO_CM1);
        out.eigenvalues.push(lambda);
        out.modes.push(unflatten(&unit));
        out.mass_weighted.push(e);
    }
    Ok(out)
}

/// Relax, build the Hessian and run the mode analysis in one go.
pub fn modes_for(s: &Structure, calc: &dyn Calculator, tol_force: f64) -> Result<NormalModes> {
    let relaxed = optimize_geometry(s, calc, tol_force)?;
    if relaxed.max_force > 10.0 * tol_force {
        return Err(Error::NotAMinimum(format!(
            "relaxation stopped with max force {:.2e} eV/Å",
            relaxed.max_force
        )));
    }
    let h = compute_hessian(&relaxed.structure, calc, DEFAULT_HESSIAN_STEP)?;
    normal_mode_analysis(&h, &relaxed.structure, relaxed.energy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig {
    pub temperature_k: f64,
    pub max_bond_strain: f64,
    pub max_de_ev: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            temperature_k: 300.0,
            max_bond_strain: 0.25,
            max_de_ev: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmsSample {
    pub structure: Structure,
    pub energy: f64,
    /// E(sample) − E(reference), eV.
    pub delta_e: f64,
    /// Σ ½ k_m R_m², eV.
    pub harmonic_energy: f64,
    pub coefficients: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NmsRejection {
    BondStrain { bond: (usize, usize), strain: f64 },
    Energy { delta_e: f64 },
    CalculatorFailed(String),
}

#[derive(Debug, Clone)]
pub enum NmsOutcome {
    Accepted(NmsSample),
    Rejected(NmsRejection),
}

impl NmsOutcome {
    pub fn accepted(self) -> Option<NmsSample> {
        match self {
            NmsOutcome::Accepted(s) => Some(s),
            NmsOutcome::Rejected(_) => None,
        }
    }
}

/// Uniform draw from `{c ∈ R^m : c ≥ 0, Σc ≤ 1}`.
pub fn uniform_simplex<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..=m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    e[..m].iter().map(|x| x / total).collect()
}

/// Signed amplitudes `R_m = sign_m · sqrt(3 c_m N kB T / k_m)`.
pub fn amplitudes(nm: &NormalModes, coefficients: &[f64], signs: &[f64], temperature_k: f64) -> Vec<f64> {
    let budget = 3.0 * nm.reference.len() as f64 * units::KB_EV_PER_K * temperature_k;
    coefficients
        .iter()
        .zip(signs)
        .zip(&nm.force_constants)
        .map(|((c, s), k)| s * (c * budget / k).sqrt())
        .collect()
}

/// Reference geometry displaced by `Σ R_m q_m`.
pub fn displace(nm: &NormalModes, amplitudes: &[f64]) -> Result<Structure> {
    let mut pos = nm.reference.positions().to_vec();
    for (mode, r) in nm.modes.iter().zip(amplitudes) {
        for (p, q) in pos.iter_mut().zip(mode) {
            *p = geom::add(*p, geom::scale(*q, *r));
        }
    }
    nm.reference.clone().with_positions(pos)
}

/// Bond-strain and energy filters on a displaced structure.
pub fn check_sample(
    nm: &NormalModes,
    candidate: Structure,
    calc: &dyn Calculator,
    cfg: &NmsConfig,
) -> Result<std::result::Result<(Structure, f64), NmsRejection>> {
    let bonds = nm.reference.bonds_or_inferred()?;
    for &(i, j) in &bonds {
        let r0 = nm.reference.distance(i, j);
        let strain = (candidate.distance(i, j) - r0).abs() / r0;
        if strain > cfg.max_bond_strain {
            return Ok(Err(NmsRejection::BondStrain { bond: (i, j), strain }));
        }
    }
    let r = calc.evaluate(&candidate)?;
    if !r.converged {
        return Ok(Err(NmsRejection::CalculatorFailed(r.message.unwrap_or_default())));
    }
    let delta_e = r.energy - nm.reference_energy;
    if delta_e > cfg.max_de_ev {
        return Ok(Err(NmsRejection::Energy { delta_e }));
    }
    Ok(Ok((candidate, r.energy)))
}

/// Draw one normal-mode sample. Rejection is a normal outcome.
pub fn nms_sample<R: Rng + ?Sized>(
    nm: &NormalModes,
    rng: &mut R,
    calc: &dyn Calculator,
    cfg: &NmsConfig,
) -> Result<NmsOutcome> {
    let m = nm.len();
    let coefficients = uniform_simplex(rng, m);
    let signs: Vec<f64> = (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let amps = amplitudes(nm, &coefficients, &signs, cfg.temperature_k);
    let harmonic_energy = amps
        .iter()
        .zip(&nm.force_constants)
        .map(|(r, k)| 0.5 * k * r * r)
        .sum();
    let candidate = displace(nm, &amps)?;
    Ok(match check_sample(nm, candidate, calc, cfg)? {
        Ok((structure, energy)) => NmsOutcome::Accepted(NmsSample {
            structure,
            energy,
            delta_e: energy - nm.reference_energy,
            harmonic_energy,
            coefficients,
            amplitudes: amps,
        }),
        Err(reason) => NmsOutcome::Rejected(reason),
    })
}
