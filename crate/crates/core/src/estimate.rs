//! Maximum-likelihood fitting of map coefficients.
//!
//! The negative log-likelihood separates over components. For component `k`
//! the objective is
//!
//! ```text
//! J_k(α) = (1/n) Σ_i [ ½ S^k(x_i)² - h_k(x_i) ]
//! ```
//!
//! minimized by damped Newton with Armijo backtracking from the identity map. The
//! Hessian at the optimum is the observed information used for coefficient
//! covariances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SingError};
use crate::linalg::{cholesky_shifted, cholesky_solve, sym_eigen, Matrix};
use crate::map::{MapComponent, PointBase, SparsityPattern, TriangularMap, DEFAULT_QUADRATURE_ORDER, EXP_CLAMP};
use crate::samples::SampleSet;
use crate::scalar::Real;

/// Rows per partial sum; sums are combined in chunk order so results do not
/// depend on the thread count.
pub(crate) const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub beta: usize,
    pub quadrature_order: usize,
    pub max_iterations: usize,
    /// Convergence threshold on the gradient infinity-norm. `None` picks
    /// `max(1e-6, sqrt(eps))` for the scalar type.
    pub gradient_tol: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            beta: 2,
            quadrature_order: DEFAULT_QUADRATURE_ORDER,
            max_iterations: 200,
            gradient_tol: None,
        }
    }
}

impl FitOptions {
    pub fn with_beta(beta: usize) -> Self {
        Self {
            beta,
            ..Self::default()
        }
    }

    fn tol<T: Real>(&self) -> T {
        match self.gradient_tol {
            Some(t) => T::lit(t),
            None => T::lit(1e-6).max(T::epsilon().sqrt()),
        }
    }
}

/// Diagnostics for one fitted component.
#[derive(Debug, Clone)]
pub struct ComponentFit<T> {
    pub converged: bool,
    pub objective: T,
    pub grad_norm: T,
    pub iterations: usize,
    /// Objective at the start and after each accepted step.
    pub objective_trace: Vec<T>,
    /// Observed information per sample: Hessian of `J_k` at the estimate.
    pub information: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub map: TriangularMap<T>,
    pub components: Vec<ComponentFit<T>>,
}

/// Coefficient-independent evaluations of one component at every sample.
pub(crate) struct ComponentDesign<T> {
    n: usize,
    nc: usize,
    nb: usize,
    np: usize,
    q: usize,
    phi: Vec<T>,
    pvals: Vec<T>,
    weights: Vec<T>,
    u_nodes: Vec<T>,
    u_last: Vec<T>,
    h_prefix: Vec<usize>,
    h_last: Vec<usize>,
    index: usize,
}

impl<T: Real> ComponentDesign<T> {
    /// `samples` must already be in map ordering.
    pub fn new(comp: &MapComponent<T>, samples: &SampleSet<T>) -> Self {
        let lay = comp.layout();
        let n = samples.n();
        let nc = lay.n_c();
        let nb = lay.nb();
        let q = lay.quad.order();
        let np = lay.h_prefix_set.len();
        let mut d = Self {
            n,
            nc,
            nb,
            np,
            q,
            phi: Vec::with_capacity(n * nc),
            pvals: Vec::with_capacity(n * np),
            weights: Vec::with_capacity(n * q),
            u_nodes: Vec::with_capacity(n * q * nb),
            u_last: Vec::with_capacity(n * nb),
            h_prefix: lay.h_prefix.clone(),
            h_last: lay.h_last.clone(),
            index: comp.index(),
        };
        for row in samples.rows() {
            let z = comp.gather(row);
            let base = PointBase::new(lay, &z, 0);
            d.phi.extend_from_slice(&base.phi.val);
            d.pvals.extend_from_slice(&base.p.val);
            d.weights.extend_from_slice(&base.weights);
            d.u_nodes.extend_from_slice(&base.u_nodes);
            d.u_last.extend_from_slice(&base.u_last.val);
        }
        d
    }

    fn n_coef(&self) -> usize {
        self.nc + self.h_prefix.len()
    }

    /// Objective, and optionally gradient and Hessian (upper triangle filled and mirrored).
    pub fn evaluate(&self, alpha: &[T], order: usize) -> Result<(T, Vec<T>, Matrix<T>)> {
        let na = self.n_coef();
        let partials: Vec<Result<(T, Vec<T>, Vec<T>)>> = (0..self.n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = (lo + CHUNK).min(self.n);
                self.evaluate_rows(alpha, lo..hi, order)
            })
            .collect();
        let mut obj = T::zero();
        let mut grad = vec![T::zero(); if order >= 1 { na } else { 0 }];
        let mut hess = vec![T::zero(); if order >= 2 { na * na } else { 0 }];
        for part in partials {
            let (o, g, h) = part?;
            obj = obj + o;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b);
            hess.iter_mut().zip(&h).for_each(|(a, b)| *a = *a + *b);
        }
        let inv_n = T::one() / T::from_usize_lossy(self.n);
        obj = obj * inv_n;
        grad.iter_mut().for_each(|v| *v = *v * inv_n);
        hess.iter_mut().for_each(|v| *v = *v * inv_n);
        let mut h = if order >= 2 {
            Matrix::from_vec(na, na, hess)
        } else {
            Matrix::zeros(0, 0)
        };
        if order >= 2 {
            h.symmetrize_from_upper();
        }
        Ok((obj, grad, h))
    }

    fn evaluate_rows(&self, alpha: &[T], rows: std::ops::Range<usize>, order: usize) -> Result<(T, Vec<T>, Vec<T>)> {
        let (nc, nb, q) = (self.nc, self.nb, self.q);
        let nh = self.h_prefix.len();
        let na = nc + nh;
        let (gamma, hco) = alpha.split_at(nc);
        let clamp = T::lit(EXP_CLAMP);
        let mut obj = T::zero();
        let mut grad = vec![T::zero(); if order >= 1 { na } else { 0 }];
        let mut hess = vec![T::zero(); if order >= 2 { na * na } else { 0 }];
        let mut a = vec![T::zero(); nb];
        let mut v = vec![T::zero(); nb];
        let mut mm = vec![T::zero(); nb * nb];
        let mut gs = vec![T::zero(); na];
        for i in rows {
            let phi = &self.phi[i * nc..(i + 1) * nc];
            let pv = &self.pvals[i * self.np..(i + 1) * self.np];
            let ul = &self.u_last[i * nb..(i + 1) * nb];
            a.iter_mut().for_each(|x| *x = T::zero());
            for (m, &al) in hco.iter().enumerate() {
                let d = self.h_last[m];
                a[d] = a[d] + al * pv[self.h_prefix[m]];
            }
            let c = crate::linalg::dot(gamma, phi);
            let h = crate::linalg::dot(&a, ul);
            if h > clamp || h.is_nan() {
                return Err(SingError::ExponentOverflow {
                    component: self.index,
                    value: h.to_f64_lossy(),
                });
            }
            v.iter_mut().for_each(|x| *x = T::zero());
            if order >= 2 {
                mm.iter_mut().for_each(|x| *x = T::zero());
            }
            for node in 0..q {
                let un = &self.u_nodes[(i * q + node) * nb..(i * q + node + 1) * nb];
                let hq = crate::linalg::dot(&a, un);
                if hq > clamp || hq.is_nan() {
                    return Err(SingError::ExponentOverflow {
                        component: self.index,
                        value: hq.to_f64_lossy(),
                    });
                }
                let we = self.weights[i * q + node] * hq.exp();
                for d in 0..nb {
                    let wd = we * un[d];
                    v[d] = v[d] + wd;
                    if order >= 2 {
                        for e in d..nb {
                            mm[d * nb + e] = mm[d * nb + e] + wd * un[e];
                        }
                    }
                }
            }
            let s = c + v[0];
            obj = obj + s * s / T::lit(2.0) - h;
            if order == 0 {
                continue;
            }
            gs[..nc].copy_from_slice(phi);
            for m in 0..nh {
                gs[nc + m] = pv[self.h_prefix[m]] * v[self.h_last[m]];
            }
            for (r, g) in grad.iter_mut().enumerate() {
                *g = *g + s * gs[r];
            }
            for m in 0..nh {
                let d = self.h_last[m];
                grad[nc + m] = grad[nc + m] - pv[self.h_prefix[m]] * ul[d];
            }
            if order < 2 {
                continue;
            }
            for r in 0..na {
                let gr = gs[r];
                if gr == T::zero() {
                    continue;
                }
                let row = &mut hess[r * na..(r + 1) * na];
                for (cidx, &gc) in gs.iter().enumerate().skip(r) {
                    row[cidx] = row[cidx] + gr * gc;
                }
            }
            for m in 0..nh {
                let pm = s * pv[self.h_prefix[m]];
                if pm == T::zero() {
                    continue;
                }
                let dm = self.h_last[m];
                let row = &mut hess[(nc + m) * na..(nc + m + 1) * na];
                for m2 in m..nh {
                    let d2 = self.h_last[m2];
                    let (lo, hi) = if dm <= d2 { (dm, d2) } else { (d2, dm) };
                    row[nc + m2] = row[nc + m2] + pm * pv[self.h_prefix[m2]] * mm[lo * nb + hi];
                }
            }
        }
        Ok((obj, grad, hess))
    }
}

/// Objective `J_k`, gradient and Hessian in the stacked coefficients `[c; h]` of
/// `comp`, with `samples` in map ordering.
pub fn component_objective<T: Real>(
    comp: &MapComponent<T>,
    samples: &SampleSet<T>,
) -> Result<(T, Vec<T>, Matrix<T>)> {
    ComponentDesign::new(comp, samples).evaluate(&comp.flat_coefficients(), 2)
}

fn inf_norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

/// Newton's method with Armijo backtracking (factor 0.5, c = 1e-4) from the
/// component's current coefficients. `samples` in map ordering.
pub fn fit_component<T: Real>(
    comp: &MapComponent<T>,
    samples: &SampleSet<T>,
    options: &FitOptions,
) -> Result<(MapComponent<T>, ComponentFit<T>)> {
    let na = comp.n_coefficients();
    if samples.n() < na {
        return Err(SingError::InsufficientSamples {
            component: comp.index(),
            samples: samples.n(),
            coefficients: na,
        });
    }
    let design = ComponentDesign::new(comp, samples);
    let tol: T = options.tol();
    let mut alpha = comp.flat_coefficients();
    let (mut obj, mut grad, mut hess) = design.evaluate(&alpha, 2)?;
    let mut iterations = 0;
    let mut objective_trace = vec![obj];
    let mut converged = inf_norm(&grad) < tol;
    while !converged && iterations < options.max_iterations {
        iterations += 1;
        let step = newton_step(&hess, &grad, comp.index())?;
        let slope = crate::linalg::dot(&grad, &step);
        let mut t = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<T> = alpha.iter().zip(&step).map(|(&a, &s)| a + t * s).collect();
            if let Ok((o, _, _)) = design.evaluate(&trial, 0) {
                if o <= obj + T::lit(1e-4) * t * slope {
                    accepted = Some((trial, o));
                    break;
                }
            }
            t = t * T::lit(0.5);
        }
        let Some((trial, o)) = accepted else {
            // no decrease representable at this precision
            break;
        };
        debug_assert!(o <= obj);
        alpha = trial;
        let (o2, g, h) = design.evaluate(&alpha, 2)?;
        obj = o2;
        objective_trace.push(obj);
        grad = g;
        hess = h;
        converged = inf_norm(&grad) < tol;
    }
    let grad_norm = inf_norm(&grad);
    if !converged {
        return Err(SingError::NonConvergence {
            component: comp.index(),
            iterations,
            grad_norm: grad_norm.to_f64_lossy(),
        });
    }
    let mut fitted = comp.clone();
    fitted.set_flat_coefficients(&alpha)?;
    check_psd(&hess, comp.index())?;
    Ok((
        fitted,
        ComponentFit {
            converged,
            objective: obj,
            grad_norm,
            iterations,
            objective_trace,
            information: hess,
        },
    ))
}

/// Solves `(H + λI) Δ = -g`, escalating λ from 0 through 1e-8 .. 1e-2.
fn newton_step<T: Real>(hess: &Matrix<T>, grad: &[T], component: usize) -> Result<Vec<T>> {
    let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
    let mut damping = 0.0;
    loop {
        if let Some(l) = cholesky_shifted(hess, T::lit(damping)) {
            return Ok(cholesky_solve(&l, &neg));
        }
        damping = if damping == 0.0 { 1e-8 } else { damping * 10.0 };
        if damping > 1e-2 * (1.0 + 1e-9) {
            return Err(SingError::SingularHessian { component, damping: 1e-2 });
        }
    }
}

fn check_psd<T: Real>(info: &Matrix<T>, component: usize) -> Result<()> {
    if cholesky_shifted(info, T::zero()).is_some() {
        return Ok(());
    }
    let (vals, _) = sym_eigen(info);
    let max = vals.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let min = vals.iter().fold(T::infinity(), |m, &v| m.min(v));
    if min < -T::lit(1e-8) * max.max(T::one()) {
        return Err(SingError::NotPsd {
            component,
            min_eigenvalue: min.to_f64_lossy(),
        });
    }
    Ok(())
}

/// Hessian of `J_k` at the component's coefficients (observed information per sample).
pub fn observed_information<T: Real>(comp: &MapComponent<T>, samples: &SampleSet<T>) -> Result<Matrix<T>> {
    let (_, _, h) = component_objective(comp, samples)?;
    check_psd(&h, comp.index())?;
    Ok(h)
}

/// Fits every component of a map with the given sparsity. `samples` are in
/// original variable labels; the pattern's permutation is applied here.
pub fn fit_map<T: Real>(
    samples: &SampleSet<T>,
    pattern: &SparsityPattern,
    options: &FitOptions,
) -> Result<FitResult<T>> {
    if pattern.dimension != samples.p() {
        return Err(SingError::InvalidInput(format!(
            "pattern dimension {} differs from sample dimension {}",
            pattern.dimension,
            samples.p()
        )));
    }
    let start = TriangularMap::identity(pattern.clone(), options.beta, options.quadrature_order)?;
    fit_map_from(samples, start, options)
}

/// Like [`fit_map`] but starting Newton from the coefficients of `start`.
pub fn fit_map_from<T: Real>(
    samples: &SampleSet<T>,
    start: TriangularMap<T>,
    options: &FitOptions,
) -> Result<FitResult<T>> {
    let ordered = samples.permute_columns(&start.pattern().permutation)?;
    let fits: Vec<Result<(MapComponent<T>, ComponentFit<T>)>> = start
        .components()
        .par_iter()
        .map(|comp| {
            fit_component(comp, &ordered, options)
                .map_err(|e| e.context(format!("fitting component {}", comp.index())))
        })
        .collect();
    let mut map = start;
    let mut diagnostics = Vec::with_capacity(fits.len());
    for (k, fit) in fits.into_iter().enumerate() {
        let (comp, diag) = fit?;
        *map.component_mut(k) = comp;
        diagnostics.push(diag);
    }
    Ok(FitResult {
        map,
        components: diagnostics,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentDiagnostics {
    pub k: usize,
    pub converged: bool,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub n_coefficients: usize,
}

/// JSON form of a fit: the map document plus per-component diagnostics and the
/// information blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub map: crate::map::MapDocument<f64>,
    pub diagnostics: Vec<ComponentDiagnostics>,
    pub information: Vec<Vec<Vec<f64>>>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<crate::samples::Standardization>,
}

impl<T: Real> FitResult<T> {
    pub fn diagnostics(&self) -> Vec<ComponentDiagnostics> {
        self.components
            .iter()
            .enumerate()
            .map(|(k, c)| ComponentDiagnostics {
                k,
                converged: c.converged,
                objective: c.objective.to_f64_lossy(),
                grad_norm: c.grad_norm.to_f64_lossy(),
                iterations: c.iterations,
                n_coefficients: self.map.component(k).n_coefficients(),
            })
            .collect()
    }

    pub fn information_blocks(&self) -> Vec<Matrix<T>> {
        self.components.iter().map(|c| c.information.clone()).collect()
    }

    pub fn to_document(&self, samples: &SampleSet<T>) -> FitDocument {
        let doc = self.map.to_document();
        FitDocument {
            map: crate::map::MapDocument {
                dimension: doc.dimension,
                permutation: doc.permutation,
                components: doc
                    .components
                    .into_iter()
                    .map(|c| crate::map::ComponentDocument {
                        k: c.k,
                        active_inputs: c.active_inputs,
                        beta: c.beta,
                        c_coeffs: c.c_coeffs.iter().map(|v| v.to_f64_lossy()).collect(),
                        h_coeffs: c.h_coeffs.iter().map(|v| v.to_f64_lossy()).collect(),
                        quadrature_order: c.quadrature_order,
                    })
                    .collect(),
            },
            diagnostics: self.diagnostics(),
            information: self
                .components
                .iter()
                .map(|c| {
                    (0..c.information.rows())
                        .map(|i| c.information.row(i).iter().map(|v| v.to_f64_lossy()).collect())
                        .collect()
                })
                .collect(),
            n: samples.n(),
            standardization: samples.standardization().cloned(),
        }
    }
}
