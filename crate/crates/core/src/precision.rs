//! Generalized precision `Ω̂_jk = (1/n) Σ_i |∂_jk log S^♯η(x_i)|`, its delta-method
//! standard deviations, and thresholding into an adjacency.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SingError};
use crate::estimate::CHUNK;
use crate::graphops::Graph;
use crate::linalg::{pinv_psd, quad_form, Matrix};
use crate::map::TriangularMap;
use crate::samples::{SampleSet, Standardization};
use crate::scalar::{signum0, Real};

/// Eigenvalues below this fraction of the largest are dropped when inverting
/// an information block.
pub const PINV_REL_TOL: f64 = 1e-12;

/// `Ω̂` and `ρ` in original variable labels.
#[derive(Debug, Clone)]
pub struct PrecisionEstimate<T> {
    pub omega: Matrix<T>,
    /// Delta-method standard deviation of each off-diagonal `Ω̂_jk`; zero diagonal.
    pub rho: Matrix<T>,
    /// `(∇_α Ω̂_jk)^T Î^+ (∇_α Ω̂_jk)` without the `1/n`; `ρ² = this / n`.
    pub gradient_quadratic: Matrix<T>,
    pub n: usize,
    /// Map ordering the estimate was computed under.
    pub permutation: Vec<usize>,
    /// Set when an information block was singular and a pseudo-inverse was used.
    pub pseudo_inverse_used: bool,
    pub standardization: Option<Standardization>,
}

impl<T: Real> PrecisionEstimate<T> {
    pub fn p(&self) -> usize {
        self.omega.rows()
    }

    /// Edges with `Ω̂_jk > δ ρ_jk`.
    pub fn threshold(&self, delta: T) -> Graph {
        threshold(self, delta)
    }
}

/// Per-sample `log S^♯η` Hessian in map ordering, plus optional coefficient gradients of
/// `Σ_i sign(g_i) g_i` per component pair slot.
struct Accumulation<T> {
    abs_sum: Vec<T>,
    grads: Vec<Vec<T>>,
}

/// For each component, its local pairs `(lj, lk)` with `lj < lk` and their global
/// (map-ordered) indices.
fn component_pairs<T: Real>(map: &TriangularMap<T>) -> Vec<Vec<(usize, usize, usize, usize)>> {
    map.components()
        .iter()
        .map(|c| {
            let act = c.active_inputs();
            let mut v = Vec::new();
            for lk in 0..act.len() {
                for lj in 0..lk {
                    v.push((lj, lk, act[lj], act[lk]));
                }
            }
            v
        })
        .collect()
}

fn accumulate<T: Real>(
    map: &TriangularMap<T>,
    ordered: &SampleSet<T>,
    with_gradients: bool,
    only_pair: Option<(usize, usize)>,
) -> Result<Accumulation<T>> {
    let p = map.dimension();
    let pairs = component_pairs(map);
    let n = ordered.n();
    let sizes: Vec<usize> = map
        .components()
        .iter()
        .zip(&pairs)
        .map(|(c, pr)| if with_gradients { pr.len() * c.n_coefficients() } else { 0 })
        .collect();
    let chunk_results: Vec<Result<Accumulation<T>>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Accumulation {
                abs_sum: vec![T::zero(); p * p],
                grads: sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
            };
            let mut hess = vec![T::zero(); p * p];
            let mut weights = Vec::new();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let x = ordered.row(i);
                hess.iter_mut().for_each(|v| *v = T::zero());
                let mut jets = Vec::with_capacity(p);
                for comp in map.components() {
                    let jet = comp.jet(&comp.gather(x))?;
                    let act = comp.active_inputs();
                    for (lj, &gj) in act.iter().enumerate() {
                        for (lk, &gk) in act.iter().enumerate().skip(lj) {
                            let v = jet.log_hessian_entry(lj, lk);
                            hess[gj * p + gk] = hess[gj * p + gk] + v;
                        }
                    }
                    jets.push(jet);
                }
                for j in 0..p {
                    for k in j..p {
                        acc.abs_sum[j * p + k] = acc.abs_sum[j * p + k] + hess[j * p + k].abs();
                    }
                }
                if !with_gradients {
                    continue;
                }
                for (m, comp) in map.components().iter().enumerate() {
                    weights.clear();
                    weights.extend(pairs[m].iter().map(|&(_, _, gj, gk)| {
                        if only_pair.is_some_and(|op| op != (gj, gk)) {
                            T::zero()
                        } else {
                            signum0(hess[gj * p + gk])
                        }
                    }));
                    jets[m].accumulate_pair_gradients(comp, &weights, &mut acc.grads[m]);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = Accumulation {
        abs_sum: vec![T::zero(); p * p],
        grads: sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
    };
    for part in chunk_results {
        let part = part?;
        total.abs_sum.iter_mut().zip(&part.abs_sum).for_each(|(a, b)| *a = *a + *b);
        for (t, g) in total.grads.iter_mut().zip(&part.grads) {
            t.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b);
        }
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    total.abs_sum.iter_mut().for_each(|v| *v = *v * inv_n);
    for g in &mut total.grads {
        g.iter_mut().for_each(|v| *v = *v * inv_n);
    }
    Ok(total)
}

/// Symmetric map-ordered upper-triangle values to a full matrix in original labels.
fn to_original<T: Real>(upper: &[T], perm: &[usize]) -> Matrix<T> {
    let p = perm.len();
    let mut out = Matrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let v = upper[a * p + b];
            out[(perm[a], perm[b])] = v;
            out[(perm[b], perm[a])] = v;
        }
    }
    out
}

fn check_samples<T: Real>(map: &TriangularMap<T>, samples: &SampleSet<T>) -> Result<SampleSet<T>> {
    if samples.p() != map.dimension() {
        return Err(SingError::InvalidInput(format!(
            "samples have {} columns, map dimension is {}",
            samples.p(),
            map.dimension()
        )));
    }
    samples.permute_columns(&map.pattern().permutation)
}

/// `Ω̂` alone, in original labels. `samples` in original labels, scaled as for the fit.
pub fn omega_hat<T: Real>(map: &TriangularMap<T>, samples: &SampleSet<T>) -> Result<Matrix<T>> {
    let ordered = check_samples(map, samples)?;
    let acc = accumulate(map, &ordered, false, None)?;
    Ok(to_original(&acc.abs_sum, &map.pattern().permutation))
}

/// `∇_α Ω̂_jk` over the stacked coefficients of every component (map order), for
/// original labels `j != k`, with `sign(0) = 0`.
pub fn grad_alpha_omega<T: Real>(
    map: &TriangularMap<T>,
    samples: &SampleSet<T>,
    j: usize,
    k: usize,
) -> Result<Vec<T>> {
    let p = map.dimension();
    if j == k || j >= p || k >= p {
        return Err(SingError::InvalidInput(format!("invalid pair ({j}, {k})")));
    }
    let ordered = check_samples(map, samples)?;
    let perm = &map.pattern().permutation;
    let pos = |label: usize| perm.iter().position(|&v| v == label).expect("bijection");
    let (a, b) = (pos(j), pos(k));
    let pair = (a.min(b), a.max(b));
    let acc = accumulate(map, &ordered, true, Some(pair))?;
    let pairs = component_pairs(map);
    let offsets = map.coefficient_offsets();
    let mut out = vec![T::zero(); map.n_coefficients()];
    for (m, comp) in map.components().iter().enumerate() {
        let nco = comp.n_coefficients();
        if let Some(slot) = pairs[m].iter().position(|&(_, _, gj, gk)| (gj, gk) == pair) {
            out[offsets[m]..offsets[m] + nco].copy_from_slice(&acc.grads[m][slot * nco..(slot + 1) * nco]);
        }
    }
    Ok(out)
}

/// Full estimate: `Ω̂`, and `ρ_jk = sqrt(Σ_m v_mᵀ Î_m⁺ v_m / n)` with block-diagonal
/// information (one block per component, as returned by the fit).
pub fn estimate_precision<T: Real>(
    map: &TriangularMap<T>,
    samples: &SampleSet<T>,
    information: &[Matrix<T>],
) -> Result<PrecisionEstimate<T>> {
    let p = map.dimension();
    if information.len() != p {
        return Err(SingError::InvalidInput("one information block per component required".into()));
    }
    for (comp, info) in map.components().iter().zip(information) {
        if info.rows() != comp.n_coefficients() || info.cols() != comp.n_coefficients() {
            return Err(SingError::InvalidInput(format!(
                "information block {} has the wrong shape",
                comp.index()
            )));
        }
    }
    let ordered = check_samples(map, samples)?;
    let acc = accumulate(map, &ordered, true, None)?;
    let pairs = component_pairs(map);
    let mut pinv_used = false;
    let mut quad = vec![T::zero(); p * p];
    for (m, comp) in map.components().iter().enumerate() {
        if pairs[m].is_empty() {
            continue;
        }
        let pinv = pinv_psd(&information[m], T::lit(PINV_REL_TOL));
        pinv_used |= pinv.dropped > 0;
        let nco = comp.n_coefficients();
        for (slot, &(_, _, gj, gk)) in pairs[m].iter().enumerate() {
            let v = &acc.grads[m][slot * nco..(slot + 1) * nco];
            quad[gj * p + gk] = quad[gj * p + gk] + quad_form(&pinv.inverse, v);
        }
    }
    let perm = &map.pattern().permutation;
    let n = ordered.n();
    let gradient_quadratic = to_original(&quad, perm);
    let mut rho = Matrix::zeros(p, p);
    let n_t = T::from_usize_lossy(n);
    for j in 0..p {
        for k in 0..p {
            if j != k {
                rho[(j, k)] = (gradient_quadratic[(j, k)].max(T::zero()) / n_t).sqrt();
            }
        }
    }
    Ok(PrecisionEstimate {
        omega: to_original(&acc.abs_sum, perm),
        rho,
        gradient_quadratic,
        n,
        permutation: perm.clone(),
        pseudo_inverse_used: pinv_used,
        standardization: samples.standardization().cloned(),
    })
}

/// Edge `(j, k)` present iff `Ω̂_jk > δ ρ_jk` (strict); the diagonal is ignored.
pub fn threshold<T: Real>(estimate: &PrecisionEstimate<T>, delta: T) -> Graph {
    let p = estimate.p();
    let mut g = Graph::empty(p);
    for j in 0..p {
        for k in j + 1..p {
            if estimate.omega[(j, k)] > delta * estimate.rho[(j, k)] {
                g.add_edge(j, k);
            }
        }
    }
    g
}

/// Plain-`f64` export form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionDocument {
    pub p: usize,
    pub n: usize,
    pub scale: String,
    pub omega: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    pub permutation: Vec<usize>,
    pub pseudo_inverse_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

fn rows_f64<T: Real>(m: &Matrix<T>) -> Vec<Vec<f64>> {
    (0..m.rows())
        .map(|i| m.row(i).iter().map(|v| v.to_f64_lossy()).collect())
        .collect()
}

impl<T: Real> PrecisionEstimate<T> {
    pub fn to_document(&self) -> PrecisionDocument {
        PrecisionDocument {
            p: self.p(),
            n: self.n,
            scale: if self.standardization.is_some() { "standardized" } else { "raw" }.into(),
            omega: rows_f64(&self.omega),
            rho: rows_f64(&self.rho),
            permutation: self.permutation.clone(),
            pseudo_inverse_used: self.pseudo_inverse_used,
            standardization: self.standardization.clone(),
        }
    }
}
