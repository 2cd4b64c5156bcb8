//! SchNet-style continuous-filter convolution network.

use std::collections::BTreeMap;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::rng::RngStream;
use crate::structure::Structure;
use crate::units;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_interaction_blocks: usize,
    pub feature_dim: usize,
    pub n_rbf: usize,
    /// Å⁻².
    pub rbf_gamma: f64,
    /// Å.
    pub cutoff: f64,
    pub readout_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The desk-scale profile.
    fn default() -> Self {
        ModelConfig {
            n_interaction_blocks: 2,
            feature_dim: 32,
            n_rbf: 25,
            rbf_gamma: 0.4,
            cutoff: 5.0,
            readout_hidden: vec![16],
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Six blocks with 128 features.
    pub fn full_scale() -> Self {
        ModelConfig {
            n_interaction_blocks: 6,
            feature_dim: 128,
            readout_hidden: vec![64],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.n_interaction_blocks >= 1
            && self.feature_dim >= 1
            && self.n_rbf >= 2
            && self.readout_hidden.iter().all(|&d| d >= 1);
        if !dims_ok {
            return Err(Error::Config("model dimensions must be at least 1 (n_rbf at least 2)".into()));
        }
        if !(self.cutoff > 0.0 && self.rbf_gamma > 0.0) {
            return Err(Error::Config("cutoff and rbf_gamma must be positive".into()));
        }
        Ok(())
    }

    pub fn rbf_centers(&self) -> Vec<f64> {
        (0..self.n_rbf)
            .map(|k| self.cutoff * k as f64 / (self.n_rbf - 1) as f64)
            .collect()
    }
}

/// `½(cos(π r / r_c) + 1)` inside the cutoff, 0 beyond; with derivative.
pub fn cosine_envelope(r: f64, cutoff: f64) -> (f64, f64) {
    if r >= cutoff {
        return (0.0, 0.0);
    }
    let x = std::f64::consts::PI * r / cutoff;
    (0.5 * (x.cos() + 1.0), -0.5 * std::f64::consts::PI / cutoff * x.sin())
}

/// Gaussian radial basis times the cosine envelope, with d/dr.
pub fn rbf_expand(r: f64, cfg: &ModelConfig) -> (Vec<f64>, Vec<f64>) {
    let (env, denv) = cosine_envelope(r, cfg.cutoff);
    cfg.rbf_centers()
        .into_iter()
        .map(|mu| {
            let d = r - mu;
            let g = (-cfg.rbf_gamma * d * d).exp();
            (g * env, g * denv - 2.0 * cfg.rbf_gamma * d * g * env)
        })
        .unzip()
}

/// Linear per-element energy baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesScaler {
    /// eV per atom of each element.
    pub means: BTreeMap<u8, f64>,
    /// Standard deviation of the training residuals (eV). Recorded only;
    /// targets are not divided by it.
    pub scale: f64,
}

impl SpeciesScaler {
    pub fn baseline(&self, s: &Structure) -> Result<f64> {
        s.elements()
            .iter()
            .map(|&z| {
                self.means.get(&z).copied().ok_or_else(|| Error::UnseenElement {
                    z,
                    symbol: units::symbol_or_number(z),
                })
            })
            .sum()
    }

    pub fn remove(&self, s: &Structure, energy: f64) -> Result<f64> {
        Ok(energy - self.baseline(s)?)
    }

    pub fn restore(&self, s: &Structure, residual: f64) -> Result<f64> {
        Ok(residual + self.baseline(s)?)
    }
}

/// Least-squares fit of `E ≈ Σ_e count_e · mean_e`. Falls back to ridge
/// (λ = 1e-6) when the element counts are linearly dependent.
pub fn fit_species_scaler(structures: &[&Structure], energies: &[f64]) -> Result<SpeciesScaler> {
    if structures.is_empty() || structures.len() != energies.len() {
        return Err(Error::LengthMismatch(format!(
            "{} structures, {} energies",
            structures.len(),
            energies.len()
        )));
    }
    let elements: Vec<u8> = structures
        .iter()
        .flat_map(|s| s.elements().iter().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = structures.len();
    let m = elements.len();
    let x = DMatrix::from_fn(n, m, |i, k| structures[i].count_element(elements[k]) as f64);
    let y = DVector::from_column_slice(energies);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.rank(smax * 1e-10 * n.max(m) as f64);
    let coef = if rank == m {
        svd.solve(&y, 0.0).map_err(|e| Error::Pipeline(format!("scaler fit failed: {e}")))?
    } else {
        log::warn!("species counts are rank deficient ({rank} < {m}); using ridge regression");
        let xtx = x.transpose() * &x + DMatrix::identity(m, m) * 1e-6;
        let xty = x.transpose() * &y;
        xtx.cholesky()
            .ok_or_else(|| Error::Pipeline("ridge system is not positive definite".into()))?
            .solve(&xty)
    };
    let resid = &y - &x * &coef;
    let mean = resid.mean();
    let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    Ok(SpeciesScaler {
        means: elements.iter().copied().zip(coef.iter().copied()).collect(),
        // an exact fit leaves nothing to scale
        scale: if std > 0.0 { std } else { 1.0 },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

/// Neighbour graph of a batch of structures. Pairs are undirected (i < j)
/// within the cutoff; each pair's filter is used in both directions.
pub struct GraphBatch {
    pub n_atoms: usize,
    pub n_configs: usize,
    pub species: Rc<Vec<usize>>,
    pub atom_config: Rc<Vec<usize>>,
    pub atom_offsets: Vec<usize>,
    pub pair_i: Rc<Vec<usize>>,
    pub pair_j: Rc<Vec<usize>>,
    /// `P × 1` distances.
    pub dist: Array2<f64>,
    /// Unit vectors i → j.
    pub unit: Vec<Vec3>,
    pub rbf: Array2<f64>,
    pub rbf_deriv: Rc<Array2<f64>>,
}

impl GraphBatch {
    /// Forces from dE/dr over pairs.
    pub fn forces_from_pair_gradient(&self, de_dr: &Array2<f64>) -> Vec<Vec3> {
        let mut f = vec![[0.0; 3]; self.n_atoms];
        for (p, (&i, &j)) in self.pair_i.iter().zip(self.pair_j.iter()).enumerate() {
            let g = de_dr[[p, 0]];
            for k in 0..3 {
                let c = g * self.unit[p][k];
                f[i][k] += c;
                f[j][k] -= c;
            }
        }
        f
    }

    pub fn config_atoms(&self, c: usize) -> std::ops::Range<usize> {
        self.atom_offsets[c]..self.atom_offsets[c + 1]
    }
}

/// Fixed linear map that whitens the radial basis over `[0, r_c]`.
///
/// Neighbouring wide Gaussians are almost collinear. The expansion is
/// multiplied by `T` with `Tᵀ G T ≈ I` for the Gram matrix `G`; the first
/// filter layer absorbs it. Directions with eigenvalue below `1e-8 · λ_max`
/// are damped.
pub fn rbf_whitening(cfg: &ModelConfig) -> Array2<f64> {
    const SAMPLES: usize = 2000;
    let k = cfg.n_rbf;
    let mut gram = nalgebra::DMatrix::<f64>::zeros(k, k);
    for s in 0..SAMPLES {
        let r = cfg.cutoff * (s as f64 + 0.5) / SAMPLES as f64;
        let (v, _) = rbf_expand(r, cfg);
        for a in 0..k {
            for b in 0..k {
                gram[(a, b)] += v[a] * v[b] / SAMPLES as f64;
            }
        }
    }
    let eig = nalgebra::SymmetricEigen::new(gram);
    let floor = 1e-8 * eig.eigenvalues.max();
    Array2::from_shape_fn((k, k), |(a, b)| eig.eigenvectors[(a, b)] / (eig.eigenvalues[b] + floor).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Sorted element list; row `k` of the embedding belongs to `elements[k]`.
    pub elements: Vec<u8>,
    pub scaler: SpeciesScaler,
    pub params: Vec<Param>,
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
}

impl Model {
    pub fn new(config: ModelConfig, scaler: SpeciesScaler) -> Result<Self> {
        config.validate()?;
        let elements: Vec<u8> = scaler.means.keys().copied().collect();
        if elements.is_empty() {
            return Err(Error::Config("model needs at least one element".into()));
        }
        let mut rng = RngStream::new(config.seed, "model-init").rng();
        let f = config.feature_dim;
        let mut params = Vec::new();
        let mut push = |name: String, value: Array2<f64>| params.push(Param { name, value });
        push(
            "embedding".into(),
            Array2::from_shape_fn((elements.len(), f), |_| StandardNormal.sample(&mut rng)),
        );
        for b in 0..config.n_interaction_blocks {
            push(format!("block{b}.filter1"), glorot(&mut rng, config.n_rbf, f));
            push(format!("block{b}.filter2"), glorot(&mut rng, f, f));
            push(format!("block{b}.in2f"), glorot(&mut rng, f, f));
            push(format!("block{b}.f2out"), glorot(&mut rng, f, f));
            push(format!("block{b}.f2out_bias"), Array2::zeros((1, f)));
            push(format!("block{b}.dense"), glorot(&mut rng, f, f));
            push(format!("block{b}.dense_bias"), Array2::zeros((1, f)));
        }
        let mut width = f;
        for (k, &h) in config.readout_hidden.iter().enumerate() {
            push(format!("readout{k}.weight"), glorot(&mut rng, width, h));
            push(format!("readout{k}.bias"), Array2::zeros((1, h)));
            width = h;
        }
        push("output.weight".into(), glorot(&mut rng, width, 1));
        push("output.bias".into(), Array2::zeros((1, 1)));
        Ok(Model {
            config,
            elements,
            scaler,
            params,
        })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn species_index(&self, z: u8) -> Result<usize> {
        self.elements.binary_search(&z).map_err(|_| Error::UnseenElement {
            z,
            symbol: units::symbol_or_number(z),
        })
    }

    /// SHA-256 over parameter names, shapes and exact values.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update((p.value.nrows() as u64).to_le_bytes());
            h.update((p.value.ncols() as u64).to_le_bytes());
            for x in p.value.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn batch(&self, structures: &[&Structure]) -> Result<GraphBatch> {
        let rc = self.config.cutoff;
        let mut species = Vec::new();
        let mut atom_config = Vec::new();
        let mut atom_offsets = vec![0];
        let (mut pair_i, mut pair_j, mut dist, mut unit) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (c, s) in structures.iter().enumerate() {
            let base = species.len();
            for &z in s.elements() {
                species.push(self.species_index(z)?);
                atom_config.push(c);
            }
            let pos = s.positions();
            for i in 0..pos.len() {
                for j in i + 1..pos.len() {
                    let d = geom::sub(pos[j], pos[i]);
                    let r = geom::norm(d);
                    if r < rc {
                        pair_i.push(base + i);
                        pair_j.push(base + j);
                        dist.push(r);
                        unit.push(geom::scale(d, 1.0 / r));
                    }
                }
            }
            atom_offsets.push(species.len());
        }
        let p = dist.len();
        let k = self.config.n_rbf;
        let mut rbf = Array2::zeros((p, k));
        let mut rbf_deriv = Array2::zeros((p, k));
        for (e, &r) in dist.iter().enumerate() {
            let (v, d) = rbf_expand(r, &self.config);
            for q in 0..k {
                rbf[[e, q]] = v[q];
                rbf_deriv[[e, q]] = d[q];
            }
        }
        let t = rbf_whitening(&self.config);
        let rbf = rbf.dot(&t);
        let rbf_deriv = rbf_deriv.dot(&t);
        Ok(GraphBatch {
            n_atoms: species.len(),
            n_configs: structures.len(),
            species: Rc::new(species),
            atom_config: Rc::new(atom_config),
            atom_offsets,
            pair_i: Rc::new(pair_i),
            pair_j: Rc::new(pair_j),
            dist: Array2::from_shape_vec((p, 1), dist).expect("column"),
            unit,
            rbf,
            rbf_deriv: Rc::new(rbf_deriv),
        })
    }

    /// Network energies (without baseline) as a `B × 1` node.
    pub fn forward<'a>(&self, params: &[Var<'a>], batch: &GraphBatch, r: &Var<'a>) -> Var<'a> {
        let mut it = params.iter();
        let mut next = || it.next().expect("parameter list matches the architecture");
        let n = batch.n_atoms;
        let phi = r.expand_features(batch.rbf.clone(), batch.rbf_deriv.clone());
        let mut h = next().gather_rows(batch.species.clone());
        for _ in 0..self.config.n_interaction_blocks {
            let (filter1, filter2, in2f) = (next(), next(), next());
            let (f2out, f2out_b, dense, dense_b) = (next(), next(), next(), next());
            let w = phi.matmul(filter1).ssp().matmul(filter2);
            let x = h.matmul(in2f);
            let to_i = x
                .gather_rows(batch.pair_j.clone())
                .mul(&w)
                .scatter_add_rows(batch.pair_i.clone(), n);
            let to_j = x
                .gather_rows(batch.pair_i.clone())
                .mul(&w)
                .scatter_add_rows(batch.pair_j.clone(), n);
            let v = to_i.add(&to_j).matmul(f2out).add_row(f2out_b).ssp().matmul(dense).add_row(dense_b);
            h = h.add(&v);
        }
        let mut out = h;
        for _ in &self.config.readout_hidden {
            let (w, b) = (next(), next());
            out = out.matmul(w).add_row(b).ssp();
        }
        let (w, b) = (next(), next());
        out.matmul(w)
            .add_row(b)
            .scatter_add_rows(batch.atom_config.clone(), batch.n_configs)
    }

    /// Energies (eV) and forces (eV/Å) for a batch, in input order.
    pub fn evaluate_batch(&self, structures: &[&Structure]) -> Result<Vec<(f64, Vec<Vec3>)>> {
        if structures.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.batch(structures)?;
        let tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let r = tape.leaf(batch.dist.clone());
        let e = self.forward(&params, &batch, &r);
        let de_dr = match tape.grad(&e.sum(), &[&r], false).pop().flatten() {
            Some(g) => g.value().clone(),
            None => Array2::zeros((batch.dist.nrows(), 1)),
        };
        let forces = batch.forces_from_pair_gradient(&de_dr);
        structures
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let energy = e.value()[[c, 0]] + self.scaler.baseline(s)?;
                Ok((energy, forces[batch.config_atoms(c)].to_vec()))
            })
            .collect()
    }

    pub fn energy_and_forces(&self, s: &Structure) -> Result<(f64, Vec<Vec3>)> {
        Ok(self.evaluate_batch(&[s])?.pop().expect("one result"))
    }

    pub fn energy(&self, s: &Structure) -> Result<f64> {
        self.energy_and_forces(s).map(|(e, _)| e)
    }
}
