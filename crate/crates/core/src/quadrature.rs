//! Gauss-Legendre rules on `[-1, 1]`.

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> GaussLegendre<T> {
    /// Rule of the given order (exact for polynomials of degree `2 * order - 1`).
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be positive");
        let (nodes, weights) = legendre_rule_f64(order);
        Self {
            nodes: nodes.into_iter().map(T::lit).collect(),
            weights: weights.into_iter().map(T::lit).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Integral of `f` over `[a, b]` (either orientation).
    pub fn integrate<F: FnMut(T) -> T>(&self, a: T, b: T, mut f: F) -> T {
        let half = (b - a) / T::lit(2.0);
        let mid = (a + b) / T::lit(2.0);
        self.nodes
            .iter()
            .zip(&self.weights)
            .fold(T::zero(), |acc, (&x, &w)| acc + w * f(mid + half * x))
            * half
    }
}

/// Nodes ascending, computed by Newton iteration on `P_n` from the Chebyshev-like
/// initial guesses.
fn legendre_rule_f64(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_and_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_two() {
        for n in 1..=40 {
            let q = GaussLegendre::<f64>::new(n);
            let s: f64 = q.weights.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "order {n}: {s}");
        }
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        for n in 1..=12 {
            let q = GaussLegendre::<f64>::new(n);
            for deg in 0..(2 * n) {
                let got = q.integrate(0.0, 1.5, |x| x.powi(deg as i32));
                let want = 1.5f64.powi(deg as i32 + 1) / (deg as f64 + 1.0);
                assert!((got - want).abs() < 1e-12 * want.max(1.0), "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn reversed_interval_negates() {
        let q = GaussLegendre::<f64>::new(8);
        let a = q.integrate(0.0, -2.0, |x| x.exp());
        assert!((a - ((-2.0f64).exp() - 1.0)).abs() < 1e-12);
    }
}
