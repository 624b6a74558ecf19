//! Hermite polynomial and Hermite function bases with total-order multi-index sets.
//!
//! Two univariate families are used by the map components:
//!
//! * [`BasisFamily::Polynomial`]: probabilists' Hermite polynomials `He_d`.
//! * [`BasisFamily::FunctionWithConstant`]: the constant `1` at degree 0, then the
//!   normalized Hermite functions `psi_{d-1}` at degree `d >= 1`.
//!
//! Multivariate elements are tensor products over a total-order multi-index set.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Probabilists' Hermite polynomial `He_n(x)` by the three-term recurrence.
pub fn hermite_poly<T: Real>(degree: usize, x: T) -> T {
    let mut prev = T::one();
    if degree == 0 {
        return prev;
    }
    let mut cur = x;
    for n in 1..degree {
        let next = x * cur - T::from_usize_lossy(n) * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// `d/dx He_n(x) = n He_{n-1}(x)`.
pub fn hermite_poly_d1<T: Real>(degree: usize, x: T) -> T {
    if degree == 0 {
        T::zero()
    } else {
        T::from_usize_lossy(degree) * hermite_poly(degree - 1, x)
    }
}

/// `d²/dx² He_n(x) = n (n-1) He_{n-2}(x)`.
pub fn hermite_poly_d2<T: Real>(degree: usize, x: T) -> T {
    if degree < 2 {
        T::zero()
    } else {
        T::from_usize_lossy(degree * (degree - 1)) * hermite_poly(degree - 2, x)
    }
}

/// Normalized Hermite function `psi_n(x) = (2^n n! sqrt(pi))^{-1/2} H_n(x) exp(-x²/2)`.
pub fn hermite_func<T: Real>(degree: usize, x: T) -> T {
    let (vals, _, _) = hermite_funcs_upto(degree, x);
    vals[degree]
}

pub fn hermite_func_d1<T: Real>(degree: usize, x: T) -> T {
    let (_, d1, _) = hermite_funcs_upto(degree, x);
    d1[degree]
}

pub fn hermite_func_d2<T: Real>(degree: usize, x: T) -> T {
    let (_, _, d2) = hermite_funcs_upto(degree, x);
    d2[degree]
}

/// `psi_0..=psi_n` and their first two derivatives, using the stable orthonormal
/// recurrence (no factorials), so large `|x|` underflows cleanly to zero.
fn hermite_funcs_upto<T: Real>(n: usize, x: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let two = T::lit(2.0);
    let mut v = Vec::with_capacity(n + 2);
    v.push(T::lit(std::f64::consts::PI.powf(-0.25)) * (-x * x / two).exp());
    v.push(T::SQRT_2() * x * v[0]);
    for k in 1..=n {
        let kf = T::from_usize_lossy(k);
        let next = (two / (kf + T::one())).sqrt() * x * v[k] - (kf / (kf + T::one())).sqrt() * v[k - 1];
        v.push(next);
    }
    let mut d1 = Vec::with_capacity(n + 1);
    let mut d2 = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let kf = T::from_usize_lossy(k);
        // psi_k' = sqrt(k/2) psi_{k-1} - sqrt((k+1)/2) psi_{k+1}
        let lower = if k == 0 { T::zero() } else { (kf / two).sqrt() * v[k - 1] };
        d1.push(lower - ((kf + T::one()) / two).sqrt() * v[k + 1]);
        // psi_k'' = (x² - 2k - 1) psi_k
        d2.push((x * x - two * kf - T::one()) * v[k]);
    }
    v.truncate(n + 1);
    (v, d1, d2)
}

/// Univariate family used along one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisFamily {
    Polynomial,
    FunctionWithConstant,
}

/// Values and first/second derivatives of degrees `0..=max_degree` at one point.
#[derive(Debug, Clone)]
pub struct UnivariateTable<T> {
    pub val: Vec<T>,
    pub d1: Vec<T>,
    pub d2: Vec<T>,
}

impl<T: Real> UnivariateTable<T> {
    pub fn new(family: BasisFamily, max_degree: usize, x: T) -> Self {
        match family {
            BasisFamily::Polynomial => {
                let mut val = Vec::with_capacity(max_degree + 1);
                val.push(T::one());
                if max_degree >= 1 {
                    val.push(x);
                }
                for n in 1..max_degree {
                    let next = x * val[n] - T::from_usize_lossy(n) * val[n - 1];
                    val.push(next);
                }
                let d1 = (0..=max_degree)
                    .map(|n| if n == 0 { T::zero() } else { T::from_usize_lossy(n) * val[n - 1] })
                    .collect();
                let d2 = (0..=max_degree)
                    .map(|n| {
                        if n < 2 {
                            T::zero()
                        } else {
                            T::from_usize_lossy(n * (n - 1)) * val[n - 2]
                        }
                    })
                    .collect();
                Self { val, d1, d2 }
            }
            BasisFamily::FunctionWithConstant => {
                let mut val = vec![T::one()];
                let mut d1 = vec![T::zero()];
                let mut d2 = vec![T::zero()];
                if max_degree >= 1 {
                    let (v, a, b) = hermite_funcs_upto(max_degree - 1, x);
                    val.extend(v);
                    d1.extend(a);
                    d2.extend(b);
                }
                Self { val, d1, d2 }
            }
        }
    }

    pub fn max_degree(&self) -> usize {
        self.val.len() - 1
    }
}

/// Per-variable degrees of one tensor-product basis element.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MultiIndex {
    pub degrees: Vec<usize>,
}

impl MultiIndex {
    pub fn new(degrees: Vec<usize>) -> Self {
        Self { degrees }
    }

    pub fn total_degree(&self) -> usize {
        self.degrees.iter().sum()
    }

    pub fn dimension(&self) -> usize {
        self.degrees.len()
    }

    /// `(coordinate, degree)` for the nonzero entries.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.degrees
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0)
            .map(|(i, &d)| (i, d))
    }
}

/// All multi-indices of total degree `<= max_degree`, graded, and within a grade
/// ordered by descending first coordinate, then recursively by the rest.
pub fn multiindex_set(dimension: usize, max_degree: usize) -> Vec<MultiIndex> {
    let mut out = Vec::new();
    let mut buf = vec![0; dimension];
    for total in 0..=max_degree {
        if dimension == 0 {
            if total == 0 {
                out.push(MultiIndex::new(Vec::new()));
            }
            continue;
        }
        fill_grade(&mut buf, 0, total, &mut out);
    }
    out
}

fn fill_grade(buf: &mut [usize], pos: usize, remaining: usize, out: &mut Vec<MultiIndex>) {
    if pos + 1 == buf.len() {
        buf[pos] = remaining;
        out.push(MultiIndex::new(buf.to_vec()));
        return;
    }
    for d in (0..=remaining).rev() {
        buf[pos] = d;
        fill_grade(buf, pos + 1, remaining - d, out);
    }
    buf[pos] = 0;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub dimension: usize,
    pub max_degree: usize,
    pub family: BasisFamily,
}

impl BasisSpec {
    pub fn new(dimension: usize, max_degree: usize, family: BasisFamily) -> Self {
        assert!(max_degree >= 1, "max degree must be at least 1");
        Self {
            dimension,
            max_degree,
            family,
        }
    }

    pub fn multi_indices(&self) -> Vec<MultiIndex> {
        multiindex_set(self.dimension, self.max_degree)
    }

    pub fn size(&self) -> usize {
        binomial(self.dimension + self.max_degree, self.max_degree)
    }

    fn tables<T: Real>(&self, point: &[T]) -> Vec<UnivariateTable<T>> {
        assert_eq!(point.len(), self.dimension, "point dimension");
        point
            .iter()
            .map(|&x| UnivariateTable::new(self.family, self.max_degree, x))
            .collect()
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n.saturating_sub(k));
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Basis values `prod_i b_{m_i}(x_i)` in multi-index order.
pub fn eval_basis<T: Real>(spec: &BasisSpec, point: &[T]) -> Vec<T> {
    let tables = spec.tables(point);
    spec.multi_indices()
        .iter()
        .map(|m| m.support().fold(T::one(), |acc, (i, d)| acc * tables[i].val[d]))
        .collect()
}

/// Partial derivative of every basis element with respect to coordinate `coord`.
pub fn eval_basis_partial<T: Real>(spec: &BasisSpec, point: &[T], coord: usize) -> Vec<T> {
    eval_basis_mixed_impl(spec, point, &[coord])
}

/// Second partial derivative with respect to `(a, b)`; `a == b` gives the pure second derivative.
pub fn eval_basis_mixed<T: Real>(spec: &BasisSpec, point: &[T], a: usize, b: usize) -> Vec<T> {
    eval_basis_mixed_impl(spec, point, &[a, b])
}

fn eval_basis_mixed_impl<T: Real>(spec: &BasisSpec, point: &[T], coords: &[usize]) -> Vec<T> {
    let tables = spec.tables(point);
    spec.multi_indices()
        .iter()
        .map(|m| {
            (0..spec.dimension).fold(T::one(), |acc, i| {
                let order = coords.iter().filter(|&&c| c == i).count();
                let t = &tables[i];
                let d = m.degrees[i];
                acc * match order {
                    0 => t.val[d],
                    1 => t.d1[d],
                    _ => t.d2[d],
                }
            })
        })
        .collect()
}

/// Tensor-product values with gradients and Hessians stored per element over
/// its support only.
#[derive(Debug, Clone)]
pub struct TensorValues<T> {
    pub dim: usize,
    pub val: Vec<T>,
    /// Element `e` depends on `vars[start[e]..start[e + 1]]`; `grad` is aligned with `vars`.
    start: Vec<usize>,
    vars: Vec<usize>,
    grad: Vec<T>,
    /// Element `e` owns an `s × s` block at `hstart[e]`, `s` its support size.
    hstart: Vec<usize>,
    hess: Vec<T>,
}

impl<T: Real> TensorValues<T> {
    /// Coordinates element `e` depends on (those with positive degree), ascending.
    #[inline]
    pub fn support(&self, e: usize) -> &[usize] {
        &self.vars[self.start[e]..self.start[e + 1]]
    }

    /// First partials of element `e` along [`Self::support`].
    #[inline]
    pub fn grads(&self, e: usize) -> &[T] {
        &self.grad[self.start[e]..self.start[e + 1]]
    }

    /// Row-major block of second partials of element `e` over its support.
    #[inline]
    pub fn hess_block(&self, e: usize) -> &[T] {
        let s = self.start[e + 1] - self.start[e];
        &self.hess[self.hstart[e]..self.hstart[e] + s * s]
    }

    #[inline]
    fn position(&self, e: usize, j: usize) -> Option<usize> {
        self.support(e).iter().position(|&v| v == j)
    }

    pub fn grad_of(&self, elem: usize, j: usize) -> T {
        match self.position(elem, j) {
            Some(a) if !self.grad.is_empty() => self.grad[self.start[elem] + a],
            _ => T::zero(),
        }
    }

    pub fn hess_of(&self, elem: usize, j: usize, k: usize) -> T {
        if self.hess.is_empty() {
            return T::zero();
        }
        match (self.position(elem, j), self.position(elem, k)) {
            (Some(a), Some(b)) => {
                let s = self.start[elem + 1] - self.start[elem];
                self.hess[self.hstart[elem] + a * s + b]
            }
            _ => T::zero(),
        }
    }
}

/// Evaluates products over `set` using per-coordinate tables, up to derivative `order` (0, 1 or 2).
pub fn tensor_values<T: Real>(
    set: &[MultiIndex],
    tables: &[UnivariateTable<T>],
    order: usize,
) -> TensorValues<T> {
    let dim = tables.len();
    let len = set.len();
    let mut val = Vec::with_capacity(len);
    let mut start = Vec::with_capacity(len + 1);
    let mut vars = Vec::new();
    let mut grad = Vec::new();
    let mut hstart = Vec::with_capacity(len);
    let mut hess = Vec::new();
    let mut supp: Vec<(usize, usize)> = Vec::with_capacity(4);
    start.push(0);
    for m in set {
        supp.clear();
        supp.extend(m.support());
        let v = supp.iter().fold(T::one(), |acc, &(i, d)| acc * tables[i].val[d]);
        val.push(v);
        vars.extend(supp.iter().map(|&(i, _)| i));
        start.push(vars.len());
        hstart.push(hess.len());
        if order == 0 {
            continue;
        }
        let rest_without = |skip: &[usize]| {
            supp.iter()
                .enumerate()
                .filter(|(c, _)| !skip.contains(c))
                .fold(T::one(), |acc, (_, &(i, d))| acc * tables[i].val[d])
        };
        for (a, &(j, dj)) in supp.iter().enumerate() {
            grad.push(rest_without(&[a]) * tables[j].d1[dj]);
        }
        if order >= 2 {
            let s = supp.len();
            let base = hess.len();
            hess.resize(base + s * s, T::zero());
            for (a, &(j, dj)) in supp.iter().enumerate() {
                hess[base + a * s + a] = rest_without(&[a]) * tables[j].d2[dj];
                for (b, &(k, dk)) in supp.iter().enumerate().skip(a + 1) {
                    let h = rest_without(&[a, b]) * tables[j].d1[dj] * tables[k].d1[dk];
                    hess[base + a * s + b] = h;
                    hess[base + b * s + a] = h;
                }
            }
        }
    }
    TensorValues {
        dim,
        val,
        start,
        vars,
        grad,
        hstart,
        hess,
    }
}

/// Values only of degrees `0..=max_degree` at `x`, written to `out`.
pub fn univariate_values_into<T: Real>(family: BasisFamily, max_degree: usize, x: T, out: &mut [T]) {
    debug_assert_eq!(out.len(), max_degree + 1);
    out[0] = T::one();
    match family {
        BasisFamily::Polynomial => {
            if max_degree >= 1 {
                out[1] = x;
            }
            for n in 1..max_degree {
                out[n + 1] = x * out[n] - T::from_usize_lossy(n) * out[n - 1];
            }
        }
        BasisFamily::FunctionWithConstant => {
            if max_degree >= 1 {
                let two = T::lit(2.0);
                out[1] = T::lit(std::f64::consts::PI.powf(-0.25)) * (-x * x / two).exp();
            }
            if max_degree >= 2 {
                out[2] = T::SQRT_2() * x * out[1];
            }
            for k in 1..max_degree.saturating_sub(1) {
                let kf = T::from_usize_lossy(k);
                let next = (T::lit(2.0) / (kf + T::one())).sqrt() * x * out[k + 1]
                    - (kf / (kf + T::one())).sqrt() * out[k];
                out[k + 2] = next;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: explicit closed forms of He_0..He_5.
    fn he_closed(n: usize, x: f64) -> f64 {
        match n {
            0 => 1.0,
            1 => x,
            2 => x * x - 1.0,
            3 => x.powi(3) - 3.0 * x,
            4 => x.powi(4) - 6.0 * x * x + 3.0,
            5 => x.powi(5) - 10.0 * x.powi(3) + 15.0 * x,
            _ => unreachable!(),
        }
    }

    #[test]
    fn hermite_poly_examples() {
        assert_eq!(hermite_poly(0, 3.7f64), 1.0);
        assert_eq!(hermite_poly(2, 1.0f64), 0.0);
        // He_3(2) = 8 - 6
        assert!((hermite_poly(3, 2.0f64) - he_closed(3, 2.0)).abs() < 1e-14);
        assert!((hermite_poly(3, 2.0f64) - 2.0).abs() < 1e-14);
        for n in 0..=5 {
            for i in -8..=8 {
                let x = i as f64 * 0.5;
                assert!((hermite_poly(n, x) - he_closed(n, x)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn hermite_poly_recurrence_grid() {
        for n in 1..=10 {
            for i in 0..=80 {
                let x = -4.0 + 0.1 * i as f64;
                let lhs = hermite_poly(n + 1, x);
                let rhs = x * hermite_poly(n, x) - n as f64 * hermite_poly(n - 1, x);
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn hermite_func_examples() {
        let pi_m14 = std::f64::consts::PI.powf(-0.25);
        assert!((hermite_func(0, 0.0f64) - pi_m14).abs() < 1e-15);
        // psi_1(x) = (2 sqrt(pi))^{-1/2} 2x e^{-x²/2}
        let x = 0.5f64;
        let oracle = (2.0 * std::f64::consts::PI.sqrt()).powf(-0.5) * 2.0 * x * (-x * x / 2.0).exp();
        assert!((hermite_func(1, x) - oracle).abs() < 1e-15);
        for n in 0..8 {
            assert!(hermite_func(n, 1e3f64).abs() < 1e-12);
            assert!(hermite_func(n, -1e3f64).abs() < 1e-12);
        }
    }

    #[test]
    fn hermite_functions_are_orthonormal() {
        let q = crate::quadrature::GaussLegendre::<f64>::new(200);
        for a in 0..5 {
            for b in 0..5 {
                let ip = q.integrate(-15.0, 15.0, |x| hermite_func(a, x) * hermite_func(b, x));
                let e = if a == b { 1.0 } else { 0.0 };
                assert!((ip - e).abs() < 1e-10, "<{a},{b}> = {ip}");
            }
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-5;
        for n in 0..=8 {
            for i in 0..=40 {
                let x = -4.0 + 0.2 * i as f64;
                let fd1 = (hermite_poly(n, x + h) - hermite_poly(n, x - h)) / (2.0 * h);
                let an1 = hermite_poly_d1(n, x);
                assert!((fd1 - an1).abs() <= 1e-6 * an1.abs().max(1.0), "He' n={n} x={x}");
                let fd2 = (hermite_poly_d1(n, x + h) - hermite_poly_d1(n, x - h)) / (2.0 * h);
                let an2 = hermite_poly_d2(n, x);
                assert!((fd2 - an2).abs() <= 1e-6 * an2.abs().max(1.0), "He'' n={n} x={x}");

                let gd1 = (hermite_func(n, x + h) - hermite_func(n, x - h)) / (2.0 * h);
                let bn1 = hermite_func_d1(n, x);
                assert!((gd1 - bn1).abs() <= 1e-6 * bn1.abs().max(1.0), "psi' n={n} x={x}");
                let gd2 = (hermite_func_d1(n, x + h) - hermite_func_d1(n, x - h)) / (2.0 * h);
                let bn2 = hermite_func_d2(n, x);
                assert!((gd2 - bn2).abs() <= 1e-6 * bn2.abs().max(1.0), "psi'' n={n} x={x}");
            }
        }
    }

    #[test]
    fn multiindex_examples() {
        let s = multiindex_set(1, 2);
        let d: Vec<_> = s.iter().map(|m| m.degrees.clone()).collect();
        assert_eq!(d, vec![vec![0], vec![1], vec![2]]);
        let s = multiindex_set(2, 1);
        let d: Vec<_> = s.iter().map(|m| m.degrees.clone()).collect();
        assert_eq!(d, vec![vec![0, 0], vec![1, 0], vec![0, 1]]);
        assert_eq!(multiindex_set(0, 3).len(), 1);
    }

    #[test]
    fn multiindex_count_matches_enumeration() {
        for dim in 0..=5 {
            for beta in 1..=4 {
                // brute-force enumeration of the box {0..=beta}^dim
                let mut count = 0usize;
                let total = (beta + 1usize).pow(dim as u32);
                for code in 0..total {
                    let mut c = code;
                    let mut s = 0;
                    for _ in 0..dim {
                        s += c % (beta + 1);
                        c /= beta + 1;
                    }
                    if s <= beta {
                        count += 1;
                    }
                }
                let set = multiindex_set(dim, beta);
                assert_eq!(set.len(), count);
                assert_eq!(set.len(), binomial(dim + beta, beta));
                assert!(set.windows(2).all(|w| w[0].total_degree() <= w[1].total_degree()));
                let mut uniq = set.clone();
                uniq.sort();
                uniq.dedup();
                assert_eq!(uniq.len(), set.len());
            }
        }
        assert_eq!(multiindex_set(3, 2).len(), 10);
        assert_eq!(multiindex_set(3, 2), multiindex_set(3, 2));
    }

    #[test]
    fn linear_polynomial_basis() {
        let spec = BasisSpec::new(2, 1, BasisFamily::Polynomial);
        assert_eq!(eval_basis(&spec, &[0.3, -1.2]), vec![1.0, 0.3, -1.2]);
        assert_eq!(eval_basis_partial(&spec, &[0.3, -1.2], 0), vec![0.0, 1.0, 0.0]);
        for (a, b) in [(0, 0), (0, 1), (1, 1)] {
            assert!(eval_basis_mixed(&spec, &[0.3, -1.2], a, b).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn function_basis_has_constant_first() {
        let spec = BasisSpec::new(2, 2, BasisFamily::FunctionWithConstant);
        let v: Vec<f64> = eval_basis(&spec, &[0.4, -0.7]);
        assert_eq!(v.len(), 6);
        assert_eq!(v[0], 1.0);
        assert!((v[1] - hermite_func(0, 0.4)).abs() < 1e-15);
        assert!((v[4] - hermite_func(0, 0.4) * hermite_func(0, -0.7)).abs() < 1e-15);
    }

    #[test]
    fn tensor_values_agree_with_elementwise_eval() {
        for family in [BasisFamily::Polynomial, BasisFamily::FunctionWithConstant] {
            let spec = BasisSpec::new(3, 3, family);
            let x = [0.3f64, -0.8, 1.1];
            let tables: Vec<_> = x.iter().map(|&v| UnivariateTable::new(family, 3, v)).collect();
            let set = spec.multi_indices();
            let tv = tensor_values(&set, &tables, 2);
            let v = eval_basis(&spec, &x);
            for e in 0..set.len() {
                assert!((tv.val[e] - v[e]).abs() < 1e-14);
            }
            for j in 0..3 {
                let g = eval_basis_partial(&spec, &x, j);
                for e in 0..set.len() {
                    assert!((tv.grad_of(e, j) - g[e]).abs() < 1e-13);
                }
                for k in 0..3 {
                    let h = eval_basis_mixed(&spec, &x, j, k);
                    for e in 0..set.len() {
                        assert!((tv.hess_of(e, j, k) - h[e]).abs() < 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn value_only_tables_match_full_tables() {
        for family in [BasisFamily::Polynomial, BasisFamily::FunctionWithConstant] {
            for deg in 0..6 {
                for &x in &[-3.1f64, -0.4, 0.0, 0.9, 2.5] {
                    let full = UnivariateTable::new(family, deg, x);
                    let mut out = vec![0.0; deg + 1];
                    univariate_values_into(family, deg, x, &mut out);
                    for (a, b) in out.iter().zip(&full.val) {
                        assert!((a - b).abs() < 1e-14, "{family:?} {deg} {x}");
                    }
                }
            }
        }
    }

    #[test]
    fn sparse_tensor_support_lists_positive_degrees() {
        let set = multiindex_set(3, 2);
        let tables: Vec<_> = [0.2f64, -0.5, 1.3].iter().map(|&v| UnivariateTable::new(BasisFamily::Polynomial, 2, v)).collect();
        let tv = tensor_values(&set, &tables, 2);
        for (e, m) in set.iter().enumerate() {
            let want: Vec<usize> = m.support().map(|(i, _)| i).collect();
            assert_eq!(tv.support(e), want.as_slice());
            assert_eq!(tv.grads(e).len(), want.len());
            assert_eq!(tv.hess_block(e).len(), want.len() * want.len());
        }
    }
}
