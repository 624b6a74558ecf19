//! Monotone lower-triangular transport maps with prescribed sparsity.
//!
//! Component `k` has the form
//!
//! ```text
//! S^k(x) = c_k(x_<k) + ∫_0^{x_k} exp(h_k(x_<k, t)) dt
//! ```
//!
//! restricted to its active inputs. `c_k` is expanded in Hermite polynomials and
//! `h_k` in Hermite functions plus a constant, both over total-order index sets.
//! The integral uses a fixed Gauss-Legendre rule on `[0, x_k]`, so every quantity
//! here is an exact finite sum and differentiable in both `x` and the coefficients.
//!
//! Every `h_k` basis element factors as `P(x_<k) * u_d(t)`, with `u_d` univariate in
//! the diagonal variable. All integrals therefore reduce to a handful of moments
//! `∫ u_d u_d' (u_d'') exp(h) dt` per point, which keeps derivative evaluation cheap.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{
    multiindex_set, tensor_values, univariate_values_into, BasisFamily, MultiIndex, TensorValues, UnivariateTable,
};
use crate::error::{Result, SingError};
use crate::linalg::Matrix;
use crate::quadrature::GaussLegendre;
use crate::scalar::Real;

/// Largest admissible value of `h_k` before `exp` is reported as overflowing.
pub const EXP_CLAMP: f64 = 700.0;

pub const DEFAULT_QUADRATURE_ORDER: usize = 32;

/// Pairs `(j, k)`, `j < k`, on which map component `k` does not depend, together
/// with the ordering in force. Indices are 0-based map positions;
/// `permutation[pos]` is the original variable label placed at `pos`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityPattern {
    pub dimension: usize,
    pub inactive_pairs: BTreeSet<(usize, usize)>,
    pub permutation: Vec<usize>,
}

impl SparsityPattern {
    /// Dense lower-triangular pattern under the identity ordering.
    pub fn dense(dimension: usize) -> Self {
        Self {
            dimension,
            inactive_pairs: BTreeSet::new(),
            permutation: (0..dimension).collect(),
        }
    }

    /// Diagonal map: every off-diagonal pair inactive.
    pub fn diagonal(dimension: usize) -> Self {
        let inactive_pairs = (0..dimension)
            .flat_map(|k| (0..k).map(move |j| (j, k)))
            .collect();
        Self {
            dimension,
            inactive_pairs,
            permutation: (0..dimension).collect(),
        }
    }

    pub fn new(
        dimension: usize,
        inactive_pairs: BTreeSet<(usize, usize)>,
        permutation: Vec<usize>,
    ) -> Result<Self> {
        let pattern = Self {
            dimension,
            inactive_pairs,
            permutation,
        };
        pattern.validate()?;
        Ok(pattern)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&(j, k)) = self
            .inactive_pairs
            .iter()
            .find(|&&(j, k)| j >= k || k >= self.dimension)
        {
            return Err(SingError::InvalidInput(format!(
                "inactive pair ({j}, {k}) invalid for dimension {}",
                self.dimension
            )));
        }
        validate_permutation(&self.permutation, self.dimension)
    }

    pub fn with_permutation(mut self, permutation: Vec<usize>) -> Result<Self> {
        validate_permutation(&permutation, self.dimension)?;
        self.permutation = permutation;
        Ok(self)
    }

    /// Sorted active inputs of component `k`, always ending with `k`.
    pub fn active_inputs(&self, k: usize) -> Vec<usize> {
        (0..k)
            .filter(|&j| !self.inactive_pairs.contains(&(j, k)))
            .chain(std::iter::once(k))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inactive_pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inactive_pairs.is_empty()
    }
}

pub(crate) fn validate_permutation(perm: &[usize], p: usize) -> Result<()> {
    if perm.len() != p {
        return Err(SingError::InvalidInput(format!(
            "permutation has length {}, expected {p}",
            perm.len()
        )));
    }
    let mut seen = vec![false; p];
    for &v in perm {
        if v >= p || seen[v] {
            return Err(SingError::InvalidInput(format!("permutation {perm:?} is not a bijection")));
        }
        seen[v] = true;
    }
    Ok(())
}

/// Coefficient-independent structure of a component: index sets and quadrature rule.
#[derive(Debug)]
pub(crate) struct ComponentLayout<T> {
    /// Number of active inputs `a`; the diagonal variable is local index `a - 1`.
    pub dim: usize,
    pub beta: usize,
    /// Multi-indices over the off-diagonal inputs of total order `beta`; the `c` basis.
    pub prefix_set: Vec<MultiIndex>,
    /// Off-diagonal parts of the `h` multi-indices (total order `beta - 1`).
    pub h_prefix_set: Vec<MultiIndex>,
    /// Total order `beta - 1`: the integrand of a degree-`beta` component, so
    /// `beta = 1` gives a constant `h` and a linear map.
    pub h_set: Vec<MultiIndex>,
    pub h_prefix: Vec<usize>,
    pub h_last: Vec<usize>,
    pub quad: GaussLegendre<T>,
}

impl<T: Real> ComponentLayout<T> {
    fn new(dim: usize, beta: usize, quadrature_order: usize) -> Self {
        let prefix_set = multiindex_set(dim - 1, beta);
        let h_set = multiindex_set(dim, beta - 1);
        let h_prefix_set = multiindex_set(dim - 1, beta - 1);
        let lookup: HashMap<&[usize], usize> = h_prefix_set
            .iter()
            .enumerate()
            .map(|(i, m)| (m.degrees.as_slice(), i))
            .collect();
        let h_prefix = h_set
            .iter()
            .map(|m| lookup[&m.degrees[..dim - 1]])
            .collect();
        let h_last = h_set.iter().map(|m| m.degrees[dim - 1]).collect();
        Self {
            dim,
            beta,
            prefix_set,
            h_prefix_set,
            h_set,
            h_prefix,
            h_last,
            quad: GaussLegendre::new(if beta == 1 { 1 } else { quadrature_order }),
        }
    }

    pub fn n_c(&self) -> usize {
        self.prefix_set.len()
    }

    pub fn n_h(&self) -> usize {
        self.h_set.len()
    }

    /// Univariate degrees available along the diagonal variable.
    pub fn nb(&self) -> usize {
        self.beta + 1
    }
}

/// One component `S^k` of a triangular map.
#[derive(Debug, Clone)]
pub struct MapComponent<T> {
    index: usize,
    active_inputs: Vec<usize>,
    beta: usize,
    c_coeffs: Vec<T>,
    h_coeffs: Vec<T>,
    quadrature_order: usize,
    layout: Arc<ComponentLayout<T>>,
}

impl<T: Real> MapComponent<T> {
    /// Component with all coefficients zero, i.e. `S^k(x) = x_k`.
    pub fn identity(index: usize, active_inputs: Vec<usize>, beta: usize, quadrature_order: usize) -> Result<Self> {
        if beta < 1 {
            return Err(SingError::InvalidInput("beta must be at least 1".into()));
        }
        if quadrature_order < 1 {
            return Err(SingError::InvalidInput("quadrature order must be at least 1".into()));
        }
        if active_inputs.last() != Some(&index)
            || active_inputs.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(SingError::InvalidInput(format!(
                "active inputs {active_inputs:?} must be sorted and end with {index}"
            )));
        }
        let layout = Arc::new(ComponentLayout::new(active_inputs.len(), beta, quadrature_order));
        Ok(Self {
            index,
            active_inputs,
            beta,
            c_coeffs: vec![T::zero(); layout.n_c()],
            h_coeffs: vec![T::zero(); layout.n_h()],
            quadrature_order,
            layout,
        })
    }

    pub fn with_coefficients(mut self, c_coeffs: Vec<T>, h_coeffs: Vec<T>) -> Result<Self> {
        self.set_coefficients(c_coeffs, h_coeffs)?;
        Ok(self)
    }

    pub fn set_coefficients(&mut self, c_coeffs: Vec<T>, h_coeffs: Vec<T>) -> Result<()> {
        if c_coeffs.len() != self.layout.n_c() || h_coeffs.len() != self.layout.n_h() {
            return Err(SingError::InvalidInput(format!(
                "component {}: expected {} c and {} h coefficients, got {} and {}",
                self.index,
                self.layout.n_c(),
                self.layout.n_h(),
                c_coeffs.len(),
                h_coeffs.len()
            )));
        }
        if c_coeffs.iter().chain(&h_coeffs).any(|v| !v.is_finite()) {
            return Err(SingError::InvalidInput(format!(
                "component {}: non-finite coefficient",
                self.index
            )));
        }
        self.c_coeffs = c_coeffs;
        self.h_coeffs = h_coeffs;
        Ok(())
    }

    /// Sets the stacked coefficient vector `[c; h]`.
    pub fn set_flat_coefficients(&mut self, alpha: &[T]) -> Result<()> {
        let nc = self.layout.n_c();
        if alpha.len() != nc + self.layout.n_h() {
            return Err(SingError::InvalidInput("coefficient vector length".into()));
        }
        self.set_coefficients(alpha[..nc].to_vec(), alpha[nc..].to_vec())
    }

    pub fn flat_coefficients(&self) -> Vec<T> {
        self.c_coeffs.iter().chain(&self.h_coeffs).copied().collect()
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn active_inputs(&self) -> &[usize] {
        &self.active_inputs
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    pub fn c_coeffs(&self) -> &[T] {
        &self.c_coeffs
    }

    pub fn h_coeffs(&self) -> &[T] {
        &self.h_coeffs
    }

    pub fn quadrature_order(&self) -> usize {
        self.quadrature_order
    }

    pub fn n_coefficients(&self) -> usize {
        self.layout.n_c() + self.layout.n_h()
    }

    pub(crate) fn layout(&self) -> &ComponentLayout<T> {
        &self.layout
    }

    /// Active coordinates of a full-length point.
    pub fn gather(&self, x: &[T]) -> Vec<T> {
        self.active_inputs.iter().map(|&i| x[i]).collect()
    }

    /// `S^k(x)`; `x` is a full point in map ordering.
    pub fn eval(&self, x: &[T]) -> Result<T> {
        let z = self.gather(x);
        let base = PointBase::new(&self.layout, &z, 0);
        Ok(self.value_jet(&base)?.s)
    }

    /// `∂S^k/∂x` over the active inputs (in [`Self::active_inputs`] order).
    pub fn gradient(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.jet(&self.gather(x))?.ds)
    }

    /// Second partials of `S^k` over the active inputs.
    pub fn hessian(&self, x: &[T]) -> Result<Matrix<T>> {
        let jet = self.jet(&self.gather(x))?;
        Ok(Matrix::from_vec(jet.dim, jet.dim, jet.d2s))
    }

    /// `∂_k S^k(x) = exp(h_k(x))`.
    pub fn diag_deriv(&self, x: &[T]) -> Result<T> {
        let z = self.gather(x);
        let h = self.h_at(&z);
        check_exponent(self.index, h)?;
        Ok(h.exp())
    }

    /// `h_k` at local coordinates `z`.
    pub fn h_at(&self, z: &[T]) -> T {
        let lay = &self.layout;
        let last = z[lay.dim - 1];
        let tables: Vec<_> = z[..lay.dim - 1]
            .iter()
            .map(|&v| UnivariateTable::new(BasisFamily::FunctionWithConstant, lay.beta, v))
            .collect();
        let pv = tensor_values(&lay.h_prefix_set, &tables, 0);
        let u = UnivariateTable::new(BasisFamily::FunctionWithConstant, lay.beta, last);
        self.h_coeffs
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (m, &a)| acc + a * pv.val[lay.h_prefix[m]] * u.val[lay.h_last[m]])
    }

    /// `c_k` at local coordinates `z` (the diagonal entry is ignored).
    pub fn c_at(&self, z: &[T]) -> T {
        let lay = &self.layout;
        let tables: Vec<_> = z[..lay.dim - 1]
            .iter()
            .map(|&v| UnivariateTable::new(BasisFamily::Polynomial, lay.beta, v))
            .collect();
        let cv = tensor_values(&lay.prefix_set, &tables, 0);
        crate::linalg::dot(&self.c_coeffs, &cv.val)
    }

    fn value_jet(&self, base: &PointBase<T>) -> Result<ValueJet<T>> {
        let lay = &self.layout;
        let nb = lay.nb();
        let mut a = vec![T::zero(); nb];
        for (m, &alpha) in self.h_coeffs.iter().enumerate() {
            a[lay.h_last[m]] = a[lay.h_last[m]] + alpha * base.p.val[lay.h_prefix[m]];
        }
        let c = crate::linalg::dot(&self.c_coeffs, &base.phi.val);
        let h = crate::linalg::dot(&a, &base.u_last.val);
        check_exponent(self.index, h)?;
        let mut integral = T::zero();
        for q in 0..base.weights.len() {
            let hq = crate::linalg::dot(&a, base.u_node(q, nb));
            check_exponent(self.index, hq)?;
            integral = integral + base.weights[q] * hq.exp();
        }
        Ok(ValueJet { s: c + integral, h })
    }

    /// Full second-order jet in the local coordinates at `z`.
    pub(crate) fn jet(&self, z: &[T]) -> Result<Jet<T>> {
        let base = PointBase::new(&self.layout, z, 2);
        Jet::compute(self, base)
    }
}

struct ValueJet<T> {
    s: T,
    h: T,
}

#[inline]
fn check_exponent<T: Real>(component: usize, h: T) -> Result<()> {
    if h > T::lit(EXP_CLAMP) || h.is_nan() {
        Err(SingError::ExponentOverflow {
            component,
            value: h.to_f64_lossy(),
        })
    } else {
        Ok(())
    }
}

/// Coefficient-independent evaluations at one point (local coordinates).
#[derive(Debug, Clone)]
pub(crate) struct PointBase<T> {
    /// Quadrature weights rescaled to `[0, z_last]` (negative when `z_last < 0`).
    pub weights: Vec<T>,
    /// `u_d(t_q)`, node-major, `nb` per node.
    pub u_nodes: Vec<T>,
    pub u_last: UnivariateTable<T>,
    /// `h`-family prefix products and their derivatives.
    pub p: TensorValues<T>,
    /// `c`-family prefix products and their derivatives.
    pub phi: TensorValues<T>,
}

impl<T: Real> PointBase<T> {
    pub fn new(lay: &ComponentLayout<T>, z: &[T], order: usize) -> Self {
        debug_assert_eq!(z.len(), lay.dim);
        let z_last = z[lay.dim - 1];
        let half = z_last / T::lit(2.0);
        let nb = lay.nb();
        let q = lay.quad.order();
        let mut weights = Vec::with_capacity(q);
        let mut u_nodes = Vec::with_capacity(q * nb);
        u_nodes.resize(q * nb, T::zero());
        for (node, (xi, w)) in lay.quad.nodes.iter().zip(&lay.quad.weights).enumerate() {
            let t = half * (T::one() + *xi);
            weights.push(*w * half);
            univariate_values_into(
                BasisFamily::FunctionWithConstant,
                nb - 1,
                t,
                &mut u_nodes[node * nb..(node + 1) * nb],
            );
        }
        let h_tables: Vec<_> = z[..lay.dim - 1]
            .iter()
            .map(|&v| UnivariateTable::new(BasisFamily::FunctionWithConstant, lay.beta, v))
            .collect();
        let c_tables: Vec<_> = z[..lay.dim - 1]
            .iter()
            .map(|&v| UnivariateTable::new(BasisFamily::Polynomial, lay.beta, v))
            .collect();
        Self {
            weights,
            u_nodes,
            u_last: UnivariateTable::new(BasisFamily::FunctionWithConstant, lay.beta, z_last),
            p: tensor_values(&lay.h_prefix_set, &h_tables, order),
            phi: tensor_values(&lay.prefix_set, &c_tables, order),
        }
    }

    #[inline]
    pub fn u_node(&self, q: usize, nb: usize) -> &[T] {
        &self.u_nodes[q * nb..(q + 1) * nb]
    }
}

/// Second-order jet of one component at a point, in local coordinates
/// (`0..a`, diagonal variable last), with what is needed for coefficient gradients.
#[derive(Debug, Clone)]
pub(crate) struct Jet<T> {
    pub dim: usize,
    pub s: T,
    pub eh: T,
    /// `∂_j S`, length `a`.
    pub ds: Vec<T>,
    /// `∂_jk S`, `a * a`.
    pub d2s: Vec<T>,
    /// `∂_j h` at the point.
    pub dh: Vec<T>,
    /// `∂_jk h` at the point.
    pub d2h: Vec<T>,
    base: PointBase<T>,
    /// `A^j_d = Σ α_m ∂_j P_m` over elements with last degree `d`; `(a-1) * nb`.
    aj: Vec<T>,
    /// `A^{jk}_d`, `(a-1) * (a-1) * nb`.
    ajk: Vec<T>,
    /// Moments `∫ u_d exp(h)`, `∫ u_d u_e exp(h)`, `∫ u_d u_e u_f exp(h)`.
    v: Vec<T>,
    mm: Vec<T>,
    nn: Vec<T>,
    /// `M A^j`, `(a-1) * nb`.
    maj: Vec<T>,
}

/// Adds `coef * ∂_j` of element `e` into `first[j * stride + off]` and
/// `coef * ∂_jk` into `second[(j * l + k) * stride + off]` (full symmetric block).
#[inline]
#[allow(clippy::too_many_arguments)]
fn scatter_derivatives<T: Real>(
    tv: &TensorValues<T>,
    e: usize,
    coef: T,
    l: usize,
    stride: usize,
    off: usize,
    first: &mut [T],
    second: &mut [T],
) {
    let sup = tv.support(e);
    if sup.is_empty() {
        return;
    }
    let g = tv.grads(e);
    for (a, &j) in sup.iter().enumerate() {
        let slot = &mut first[j * stride + off];
        *slot = *slot + coef * g[a];
    }
    let hb = tv.hess_block(e);
    if hb.is_empty() {
        return;
    }
    let s = sup.len();
    for (a, &j) in sup.iter().enumerate() {
        for (b, &k) in sup.iter().enumerate() {
            let slot = &mut second[(j * l + k) * stride + off];
            *slot = *slot + coef * hb[a * s + b];
        }
    }
}

impl<T: Real> Jet<T> {
    fn compute(comp: &MapComponent<T>, base: PointBase<T>) -> Result<Self> {
        let lay = comp.layout();
        let a_dim = lay.dim;
        let l = a_dim - 1;
        let nb = lay.nb();
        // coefficient-weighted prefix sums grouped by diagonal degree
        let mut a0 = vec![T::zero(); nb];
        let mut aj = vec![T::zero(); l * nb];
        let mut ajk = vec![T::zero(); l * l * nb];
        for (m, &alpha) in comp.h_coeffs.iter().enumerate() {
            if alpha == T::zero() {
                continue;
            }
            let pm = lay.h_prefix[m];
            let d = lay.h_last[m];
            a0[d] = a0[d] + alpha * base.p.val[pm];
            scatter_derivatives(&base.p, pm, alpha, l, nb, d, &mut aj, &mut ajk);
        }
        // c-part derivatives over the off-diagonal inputs
        let mut dc = vec![T::zero(); l];
        let mut d2c = vec![T::zero(); l * l];
        for (i, &ci) in comp.c_coeffs.iter().enumerate() {
            if ci != T::zero() {
                scatter_derivatives(&base.phi, i, ci, l, 1, 0, &mut dc, &mut d2c);
            }
        }
        let dot = crate::linalg::dot::<T>;
        let c = dot(&comp.c_coeffs, &base.phi.val);

        let u = &base.u_last;
        let h = dot(&a0, &u.val);
        check_exponent(comp.index, h)?;
        let eh = h.exp();

        let mut v = vec![T::zero(); nb];
        let mut mm = vec![T::zero(); nb * nb];
        let mut nn = vec![T::zero(); nb * nb * nb];
        for q in 0..base.weights.len() {
            let un = base.u_node(q, nb);
            let hq = dot(&a0, un);
            check_exponent(comp.index, hq)?;
            let we = base.weights[q] * hq.exp();
            for d in 0..nb {
                let wd = we * un[d];
                v[d] = v[d] + wd;
                for e in d..nb {
                    let wde = wd * un[e];
                    mm[d * nb + e] = mm[d * nb + e] + wde;
                    for f in e..nb {
                        nn[(d * nb + e) * nb + f] = nn[(d * nb + e) * nb + f] + wde * un[f];
                    }
                }
            }
        }
        for d in 0..nb {
            for e in d..nb {
                mm[e * nb + d] = mm[d * nb + e];
                for f in e..nb {
                    let val = nn[(d * nb + e) * nb + f];
                    for (x, y, z) in [(d, f, e), (e, d, f), (e, f, d), (f, d, e), (f, e, d)] {
                        nn[(x * nb + y) * nb + z] = val;
                    }
                }
            }
        }
        let mut maj = vec![T::zero(); l * nb];
        for j in 0..l {
            for d in 0..nb {
                maj[j * nb + d] = dot(&mm[d * nb..(d + 1) * nb], &aj[j * nb..(j + 1) * nb]);
            }
        }

        let s = c + v[0];
        let mut ds = vec![T::zero(); a_dim];
        let mut d2s = vec![T::zero(); a_dim * a_dim];
        let mut dh = vec![T::zero(); a_dim];
        let mut d2h = vec![T::zero(); a_dim * a_dim];
        for j in 0..l {
            ds[j] = dc[j] + dot(&aj[j * nb..(j + 1) * nb], &v);
            dh[j] = dot(&aj[j * nb..(j + 1) * nb], &u.val);
        }
        ds[l] = eh;
        dh[l] = dot(&a0, &u.d1);
        for j in 0..l {
            for k in j..l {
                let cjk = d2c[j * l + k];
                let ajk_s = &ajk[(j * l + k) * nb..(j * l + k + 1) * nb];
                let val = cjk + dot(ajk_s, &v) + dot(&aj[j * nb..(j + 1) * nb], &maj[k * nb..(k + 1) * nb]);
                d2s[j * a_dim + k] = val;
                d2s[k * a_dim + j] = val;
                let hv = dot(ajk_s, &u.val);
                d2h[j * a_dim + k] = hv;
                d2h[k * a_dim + j] = hv;
            }
            let hjl = dot(&aj[j * nb..(j + 1) * nb], &u.d1);
            d2h[j * a_dim + l] = hjl;
            d2h[l * a_dim + j] = hjl;
            let sjl = dh[j] * eh;
            d2s[j * a_dim + l] = sjl;
            d2s[l * a_dim + j] = sjl;
        }
        d2h[l * a_dim + l] = dot(&a0, &u.d2);
        d2s[l * a_dim + l] = dh[l] * eh;

        Ok(Self {
            dim: a_dim,
            s,
            eh,
            ds,
            d2s,
            dh,
            d2h,
            base,
            aj,
            ajk,
            v,
            mm,
            nn,
            maj,
        })
    }

    /// This component's contribution to `∂_jk log S^♯η` (local indices).
    #[inline]
    pub fn log_hessian_entry(&self, j: usize, k: usize) -> T {
        let a = self.dim;
        -(self.ds[j] * self.ds[k] + self.s * self.d2s[j * a + k]) + self.d2h[j * a + k]
    }

    /// Adds `weight * ∇_α (log_hessian_entry(j, k))` into `out` (`[c; h]` layout),
    /// for local `j < k`.
    #[cfg(test)]
    pub fn accumulate_pair_gradient(&self, comp: &MapComponent<T>, j: usize, k: usize, weight: T, out: &mut [T]) {
        debug_assert!(j < k && k < self.dim);
        if weight == T::zero() {
            return;
        }
        let lay = comp.layout();
        let l = self.dim - 1;
        let nb = lay.nb();
        let nc = lay.n_c();
        let a = self.dim;
        let base = &self.base;
        let (s, sj, sk, sjk) = (self.s, self.ds[j], self.ds[k], self.d2s[j * a + k]);
        let dot = crate::linalg::dot::<T>;

        // c block: S, S_j, S_k, S_jk are linear in c; h_jk does not depend on c
        for i in 0..nc {
            let g_s = base.phi.val[i];
            let g_sj = base.phi.grad_of(i, j);
            let (g_sk, g_sjk) = if k < l {
                (base.phi.grad_of(i, k), base.phi.hess_of(i, j, k))
            } else {
                (T::zero(), T::zero())
            };
            let g = -(g_sj * sk + sj * g_sk + g_s * sjk + s * g_sjk);
            out[i] = out[i] + weight * g;
        }

        // h block
        let u = &base.u_last;
        let mut t3 = vec![T::zero(); nb];
        let mut majk = vec![T::zero(); nb];
        if k < l {
            // M A^{jk} and N : A^j A^k
            let ajk = self.ajk_row(comp, j, k);
            for d in 0..nb {
                majk[d] = dot(&self.mm[d * nb..(d + 1) * nb], &ajk);
                let mut acc = T::zero();
                for e in 0..nb {
                    let aje = self.aj[j * nb + e];
                    if aje == T::zero() {
                        continue;
                    }
                    for f in 0..nb {
                        acc = acc + self.nn[(d * nb + e) * nb + f] * aje * self.aj[k * nb + f];
                    }
                }
                t3[d] = acc;
            }
        }
        for m in 0..lay.n_h() {
            let pm = lay.h_prefix[m];
            let d = lay.h_last[m];
            let p = base.p.val[pm];
            let pj = base.p.grad_of(pm, j);
            let g_s = p * self.v[d];
            let g_sj = pj * self.v[d] + p * self.maj[j * nb + d];
            let (g_sk, g_sjk, g_hjk) = if k < l {
                let pk = base.p.grad_of(pm, k);
                let pjk = base.p.hess_of(pm, j, k);
                (
                    pk * self.v[d] + p * self.maj[k * nb + d],
                    pjk * self.v[d] + pj * self.maj[k * nb + d] + pk * self.maj[j * nb + d] + p * (majk[d] + t3[d]),
                    pjk * u.val[d],
                )
            } else {
                (
                    p * u.val[d] * self.eh,
                    (pj + self.dh[j] * p) * u.val[d] * self.eh,
                    pj * u.d1[d],
                )
            };
            let g = -(g_sj * sk + sj * g_sk + g_s * sjk + s * g_sjk) + g_hjk;
            out[nc + m] = out[nc + m] + weight * g;
        }
    }

    #[cfg(test)]
    fn ajk_row(&self, comp: &MapComponent<T>, j: usize, k: usize) -> Vec<T> {
        let nb = comp.layout().nb();
        let l = self.dim - 1;
        self.ajk[(j * l + k) * nb..(j * l + k + 1) * nb].to_vec()
    }

    /// Adds `weights[slot] * ∇_α (log_hessian_entry(j, k))` into
    /// `out[slot * n_coefficients..]` for every local pair `j < k`, where
    /// `slot = k (k - 1) / 2 + j`.
    pub fn accumulate_pair_gradients(&self, comp: &MapComponent<T>, weights: &[T], out: &mut [T]) {
        let a = self.dim;
        let l = a - 1;
        let n_pairs = a * l / 2;
        debug_assert_eq!(weights.len(), n_pairs);
        if weights.iter().all(|w| *w == T::zero()) {
            return;
        }
        let lay = comp.layout();
        let nb = lay.nb();
        let nc = lay.n_c();
        let nco = nc + lay.n_h();
        let base = &self.base;
        let u = &base.u_last;
        let s = self.s;
        let slot = |j: usize, k: usize| k * (k - 1) / 2 + j;
        let dot = crate::linalg::dot::<T>;

        // per-pair coefficients of P_m, ∂_j P_m and ∂_k P_m in the h block
        let mut dcoef = vec![T::zero(); n_pairs * nb];
        let mut ecoef = vec![T::zero(); n_pairs * nb];
        let mut fcoef = vec![T::zero(); n_pairs * nb];
        let mut sjk = vec![T::zero(); n_pairs];
        for k in 1..a {
            for j in 0..k {
                let q = slot(j, k);
                let (sj, sk) = (self.ds[j], self.ds[k]);
                sjk[q] = self.d2s[j * a + k];
                if weights[q] == T::zero() {
                    continue;
                }
                let dq = &mut dcoef[q * nb..(q + 1) * nb];
                let eq = &mut ecoef[q * nb..(q + 1) * nb];
                if k < l {
                    let ajk = &self.ajk[(j * l + k) * nb..(j * l + k + 1) * nb];
                    let fq = &mut fcoef[q * nb..(q + 1) * nb];
                    for d in 0..nb {
                        let majk = dot(&self.mm[d * nb..(d + 1) * nb], ajk);
                        let mut t3 = T::zero();
                        for e in 0..nb {
                            let aje = self.aj[j * nb + e];
                            if aje == T::zero() {
                                continue;
                            }
                            let row = &self.nn[(d * nb + e) * nb..(d * nb + e + 1) * nb];
                            t3 = t3 + aje * dot(row, &self.aj[k * nb..(k + 1) * nb]);
                        }
                        let (mjd, mkd) = (self.maj[j * nb + d], self.maj[k * nb + d]);
                        dq[d] = -(mjd * sk + sj * mkd + self.v[d] * sjk[q] + s * (majk + t3));
                        eq[d] = -(self.v[d] * sk + s * mkd);
                        fq[d] = -(sj * self.v[d] + s * mjd);
                    }
                } else {
                    for d in 0..nb {
                        let mjd = self.maj[j * nb + d];
                        let ue = u.val[d] * self.eh;
                        dq[d] = -(mjd * sk + sj * ue + self.v[d] * sjk[q] + s * self.dh[j] * ue);
                        eq[d] = -(self.v[d] * sk + s * ue) + u.d1[d];
                    }
                }
            }
        }
        let gcoef: Vec<T> = (0..nb).map(|d| u.val[d] - s * self.v[d]).collect();

        // c block
        for i in 0..nc {
            let g_s = base.phi.val[i];
            for q in 0..n_pairs {
                let o = &mut out[q * nco + i];
                *o = *o - weights[q] * g_s * sjk[q];
            }
            let sup = base.phi.support(i);
            let g = base.phi.grads(i);
            for (ia, &v) in sup.iter().enumerate() {
                for k in v + 1..a {
                    let q = slot(v, k);
                    let o = &mut out[q * nco + i];
                    *o = *o - weights[q] * g[ia] * self.ds[k];
                }
                for j in 0..v {
                    let q = slot(j, v);
                    let o = &mut out[q * nco + i];
                    *o = *o - weights[q] * self.ds[j] * g[ia];
                }
            }
            let hb = base.phi.hess_block(i);
            let ns = sup.len();
            for (ia, &va) in sup.iter().enumerate() {
                for (ib, &vb) in sup.iter().enumerate().skip(ia + 1) {
                    let q = slot(va, vb);
                    let o = &mut out[q * nco + i];
                    *o = *o - weights[q] * s * hb[ia * ns + ib];
                }
            }
        }

        // h block
        for m in 0..lay.n_h() {
            let pm = lay.h_prefix[m];
            let d = lay.h_last[m];
            let col = nc + m;
            let pv = base.p.val[pm];
            if pv != T::zero() {
                for q in 0..n_pairs {
                    let o = &mut out[q * nco + col];
                    *o = *o + weights[q] * pv * dcoef[q * nb + d];
                }
            }
            let sup = base.p.support(pm);
            let g = base.p.grads(pm);
            for (ia, &v) in sup.iter().enumerate() {
                for k in v + 1..a {
                    let q = slot(v, k);
                    let o = &mut out[q * nco + col];
                    *o = *o + weights[q] * g[ia] * ecoef[q * nb + d];
                }
                for j in 0..v {
                    let q = slot(j, v);
                    let o = &mut out[q * nco + col];
                    *o = *o + weights[q] * g[ia] * fcoef[q * nb + d];
                }
            }
            let hb = base.p.hess_block(pm);
            let ns = sup.len();
            for (ia, &va) in sup.iter().enumerate() {
                for (ib, &vb) in sup.iter().enumerate().skip(ia + 1) {
                    let q = slot(va, vb);
                    let o = &mut out[q * nco + col];
                    *o = *o + weights[q] * hb[ia * ns + ib] * gcoef[d];
                }
            }
        }
    }
}

/// Monotone lower-triangular map `S: R^p -> R^p` pushing the data to `N(0, I)`.
#[derive(Debug, Clone)]
pub struct TriangularMap<T> {
    dimension: usize,
    components: Vec<MapComponent<T>>,
    pattern: SparsityPattern,
}

impl<T: Real> TriangularMap<T> {
    /// Map with the given sparsity and all coefficients zero (the identity).
    pub fn identity(pattern: SparsityPattern, beta: usize, quadrature_order: usize) -> Result<Self> {
        pattern.validate()?;
        let components = (0..pattern.dimension)
            .map(|k| MapComponent::identity(k, pattern.active_inputs(k), beta, quadrature_order))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dimension: pattern.dimension,
            components,
            pattern,
        })
    }

    /// Assembles a map from components, checking consistency with the pattern.
    pub fn from_components(pattern: SparsityPattern, components: Vec<MapComponent<T>>) -> Result<Self> {
        pattern.validate()?;
        if components.len() != pattern.dimension {
            return Err(SingError::InvalidInput("component count differs from dimension".into()));
        }
        for (k, comp) in components.iter().enumerate() {
            if comp.index != k || comp.active_inputs != pattern.active_inputs(k) {
                return Err(SingError::InvalidInput(format!(
                    "component {k} inconsistent with the sparsity pattern"
                )));
            }
        }
        Ok(Self {
            dimension: pattern.dimension,
            components,
            pattern,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn components(&self) -> &[MapComponent<T>] {
        &self.components
    }

    pub fn component(&self, k: usize) -> &MapComponent<T> {
        &self.components[k]
    }

    pub(crate) fn component_mut(&mut self, k: usize) -> &mut MapComponent<T> {
        &mut self.components[k]
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    pub fn n_coefficients(&self) -> usize {
        self.components.iter().map(MapComponent::n_coefficients).sum()
    }

    /// Start of each component's block in the stacked coefficient vector.
    pub fn coefficient_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.dimension + 1);
        let mut acc = 0;
        off.push(0);
        for c in &self.components {
            acc += c.n_coefficients();
            off.push(acc);
        }
        off
    }

    pub fn flat_coefficients(&self) -> Vec<T> {
        self.components.iter().flat_map(|c| c.flat_coefficients()).collect()
    }

    pub fn set_flat_coefficients(&mut self, alpha: &[T]) -> Result<()> {
        let off = self.coefficient_offsets();
        if alpha.len() != off[self.dimension] {
            return Err(SingError::InvalidInput("coefficient vector length".into()));
        }
        for (k, comp) in self.components.iter_mut().enumerate() {
            comp.set_flat_coefficients(&alpha[off[k]..off[k + 1]])?;
        }
        Ok(())
    }

    pub fn eval(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_len(x)?;
        self.components.iter().map(|c| c.eval(x)).collect()
    }

    /// Solves `S(x) = y` component by component (bracketing, bisection, Newton polish).
    pub fn invert(&self, y: &[T]) -> Result<Vec<T>> {
        self.check_len(y)?;
        let mut x = vec![T::zero(); self.dimension];
        for (k, comp) in self.components.iter().enumerate() {
            x[k] = invert_component(comp, &mut x, y[k])?;
        }
        Ok(x)
    }

    /// `log S^♯η(x) = Σ_k [-½ S^k(x)² + h_k(x)] - (p/2) log 2π`.
    pub fn pullback_logdensity(&self, x: &[T]) -> Result<T> {
        self.check_len(x)?;
        let mut acc = T::zero();
        for comp in &self.components {
            let z = comp.gather(x);
            let base = PointBase::new(&comp.layout, &z, 0);
            let vj = comp.value_jet(&base)?;
            acc = acc - vj.s * vj.s / T::lit(2.0) + vj.h;
        }
        let half_log_2pi = (T::lit(2.0) * T::PI()).ln() / T::lit(2.0);
        Ok(acc - T::from_usize_lossy(self.dimension) * half_log_2pi)
    }

    /// Gradient of `log S^♯η` at `x`.
    pub fn logpullback_gradient(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_len(x)?;
        let mut g = vec![T::zero(); self.dimension];
        for comp in &self.components {
            let jet = comp.jet(&comp.gather(x))?;
            for (lj, &gj) in comp.active_inputs().iter().enumerate() {
                g[gj] = g[gj] - jet.s * jet.ds[lj] + jet.dh[lj];
            }
        }
        Ok(g)
    }

    /// Full Hessian of `log S^♯η` at `x`, symmetric by construction.
    pub fn logpullback_hessian(&self, x: &[T]) -> Result<Matrix<T>> {
        self.check_len(x)?;
        let p = self.dimension;
        let mut h = Matrix::zeros(p, p);
        for comp in &self.components {
            let jet = comp.jet(&comp.gather(x))?;
            let act = comp.active_inputs();
            for (lj, &gj) in act.iter().enumerate() {
                for (lk, &gk) in act.iter().enumerate().skip(lj) {
                    let v = jet.log_hessian_entry(lj, lk);
                    h[(gj, gk)] = h[(gj, gk)] + v;
                    if gj != gk {
                        h[(gk, gj)] = h[(gk, gj)] + v;
                    }
                }
            }
        }
        Ok(h)
    }

    /// `∂_jk log S^♯η(x)`.
    pub fn mixed_partial_logpullback(&self, x: &[T], j: usize, k: usize) -> Result<T> {
        if j >= self.dimension || k >= self.dimension {
            return Err(SingError::InvalidInput(format!("index ({j}, {k}) out of range")));
        }
        let (lo, hi) = if j <= k { (j, k) } else { (k, j) };
        let mut acc = T::zero();
        for comp in &self.components[hi..] {
            let act = comp.active_inputs();
            let (Ok(lj), Ok(lk)) = (act.binary_search(&lo), act.binary_search(&hi)) else {
                continue;
            };
            let jet = comp.jet(&comp.gather(x))?;
            acc = acc + jet.log_hessian_entry(lj, lk);
        }
        Ok(acc)
    }

    fn check_len(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dimension {
            return Err(SingError::InvalidInput(format!(
                "point has length {}, map dimension is {}",
                x.len(),
                self.dimension
            )));
        }
        Ok(())
    }
}

fn invert_component<T: Real>(comp: &MapComponent<T>, x: &mut [T], target: T) -> Result<T> {
    let k = comp.index();
    let eval_at = |t: T, x: &mut [T]| -> Result<T> {
        x[k] = t;
        comp.eval(x)
    };
    let limit = T::lit(1e6);
    let mut lo = -T::one();
    let mut hi = T::one();
    let mut f_lo = eval_at(lo, x)?;
    let mut f_hi = eval_at(hi, x)?;
    while f_lo > target {
        if lo < -limit {
            return Err(SingError::InversionDivergence { component: k });
        }
        hi = lo;
        f_hi = f_lo;
        lo = lo * T::lit(2.0);
        f_lo = eval_at(lo, x)?;
    }
    while f_hi < target {
        if hi > limit {
            return Err(SingError::InversionDivergence { component: k });
        }
        lo = hi;
        f_lo = f_hi;
        hi = hi * T::lit(2.0);
        f_hi = eval_at(hi, x)?;
    }
    let _ = (f_lo, f_hi);
    let width = T::lit(1e-6);
    while hi - lo > width {
        let mid = (lo + hi) / T::lit(2.0);
        if eval_at(mid, x)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tol = T::lit(1e-10).max(T::epsilon() * T::lit(16.0) * (T::one() + target.abs()));
    let mut t = (lo + hi) / T::lit(2.0);
    for _ in 0..50 {
        let f = eval_at(t, x)? - target;
        if f.abs() <= tol {
            break;
        }
        let d = comp.diag_deriv(x)?;
        let mut next = t - f / d;
        if !(next > lo && next < hi) {
            next = (lo + hi) / T::lit(2.0);
        }
        if f < T::zero() {
            lo = t;
        } else {
            hi = t;
        }
        t = next;
    }
    x[k] = t;
    Ok(t)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentDocument<T> {
    pub k: usize,
    pub active_inputs: Vec<usize>,
    pub beta: usize,
    pub c_coeffs: Vec<T>,
    pub h_coeffs: Vec<T>,
    pub quadrature_order: usize,
}

/// JSON form of a map: `{dimension, permutation, components: [...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapDocument<T> {
    pub dimension: usize,
    pub permutation: Vec<usize>,
    pub components: Vec<ComponentDocument<T>>,
}

impl<T: Real> TriangularMap<T> {
    pub fn to_document(&self) -> MapDocument<T> {
        MapDocument {
            dimension: self.dimension,
            permutation: self.pattern.permutation.clone(),
            components: self
                .components
                .iter()
                .map(|c| ComponentDocument {
                    k: c.index,
                    active_inputs: c.active_inputs.clone(),
                    beta: c.beta,
                    c_coeffs: c.c_coeffs.clone(),
                    h_coeffs: c.h_coeffs.clone(),
                    quadrature_order: c.quadrature_order,
                })
                .collect(),
        }
    }

    pub fn from_document(doc: MapDocument<T>) -> Result<Self> {
        let p = doc.dimension;
        if doc.components.len() != p {
            return Err(SingError::InvalidInput("component count differs from dimension".into()));
        }
        let mut inactive = BTreeSet::new();
        let mut components = Vec::with_capacity(p);
        for (k, cd) in doc.components.into_iter().enumerate() {
            if cd.k != k {
                return Err(SingError::InvalidInput(format!("component {k} has index {}", cd.k)));
            }
            for j in 0..k {
                if !cd.active_inputs.contains(&j) {
                    inactive.insert((j, k));
                }
            }
            components.push(
                MapComponent::identity(k, cd.active_inputs, cd.beta, cd.quadrature_order)?
                    .with_coefficients(cd.c_coeffs, cd.h_coeffs)?,
            );
        }
        let pattern = SparsityPattern::new(p, inactive, doc.permutation)?;
        Self::from_components(pattern, components)
    }
}

impl<T: Real + Serialize> TriangularMap<T> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }
}

impl<T: Real + for<'de> Deserialize<'de>> TriangularMap<T> {
    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }
}
