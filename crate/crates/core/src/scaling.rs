//! Sample-size estimate for recovering the graph in one pass of the loop.
//!
//! `φ1(δ) = P(|Z| ≤ δ)` for standard normal `Z` and `φ2` is the half-normal CDF;
//! both equal `erf(δ/√2)`. Their inverses are computed by root finding on
//! `erfc`, which keeps precision when the target is close to one.

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};

use crate::error::{Result, SingError};
use crate::linalg::Matrix;
use crate::precision::PrecisionEstimate;
use crate::scalar::Real;

/// Two-sided standard-normal probability `P(|Z| ≤ δ)`.
pub fn phi1(delta: f64) -> f64 {
    erf(delta / std::f64::consts::SQRT_2)
}

/// Half-normal CDF with unit scale.
pub fn phi2(delta: f64) -> f64 {
    erf(delta / std::f64::consts::SQRT_2)
}

/// Solves `erf(δ/√2) = z` for `δ ≥ 0`, `z ∈ [0, 1)`.
fn erf_half_inverse(z: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&z) {
        return Err(SingError::InvalidInput(format!(
            "probability {z} is outside [0, 1); the threshold would be infinite"
        )));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    let tail = 1.0 - z;
    // residual in the complementary form, decreasing in δ
    let f = |d: f64| erfc(d / std::f64::consts::SQRT_2) - tail;
    let mut hi = 1.0;
    while f(hi) > 0.0 {
        hi *= 2.0;
        if hi > 64.0 {
            return Err(SingError::InvalidInput(format!("probability {z} is too close to one")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    let mut d = 0.5 * (lo + hi);
    // Newton polish on the erfc residual: d/dδ erfc(δ/√2) = -√(2/π) e^{-δ²/2}
    for _ in 0..3 {
        let slope = -(2.0 / std::f64::consts::PI).sqrt() * (-0.5 * d * d).exp();
        if slope == 0.0 {
            break;
        }
        let step = f(d) / slope;
        if !step.is_finite() {
            break;
        }
        d -= step;
    }
    Ok(d)
}

pub fn phi1_inverse(z: f64) -> Result<f64> {
    erf_half_inverse(z)
}

pub fn phi2_inverse(z: f64) -> Result<f64> {
    erf_half_inverse(z)
}

/// `δ* = max(φ1⁻¹(z), φ2⁻¹(z))` with `z = 1 - 2m/(p(p-1))`.
pub fn delta_star(p: usize, m: f64) -> Result<f64> {
    if p < 2 {
        return Err(SingError::InvalidInput("p must be at least 2".into()));
    }
    if !(m > 0.0 && m < 1.0) {
        return Err(SingError::InvalidInput(format!("failure probability {m} is not in (0, 1)")));
    }
    let pairs = (p * (p - 1)) as f64;
    let share = 2.0 * m / pairs;
    if share >= 1.0 {
        return Err(SingError::InvalidInput(format!(
            "2m/(p(p-1)) = {share} is at least one; the threshold would be infinite"
        )));
    }
    let z = 1.0 - share;
    Ok(phi1_inverse(z)?.max(phi2_inverse(z)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NStar {
    pub delta_star: f64,
    pub kappa: f64,
    pub m: f64,
    /// `n*_jk` for every ordered pair, zero on the diagonal.
    pub per_pair: Vec<Vec<f64>>,
    pub n_star: f64,
    pub n_star_ceil: u64,
    pub argmax: (usize, usize),
    pub pseudo_inverse_used: bool,
}

/// `n*_jk = (∇Ω_jk)ᵀ I⁻¹ (∇Ω_jk) (δ*/κ)²` and its maximum over `j ≠ k`. The
/// quadratic forms come from [`PrecisionEstimate::gradient_quadratic`].
pub fn n_star<T: Real>(estimate: &PrecisionEstimate<T>, kappa: f64, m: f64) -> Result<NStar> {
    if !(kappa > 0.0) {
        return Err(SingError::InvalidInput("kappa must be positive".into()));
    }
    let p = estimate.p();
    let ds = delta_star(p, m)?;
    let factor = (ds / kappa).powi(2);
    let per_pair = n_star_pairs(&estimate.gradient_quadratic, factor);
    let mut best = (0.0, (0, 1));
    for j in 0..p {
        for k in 0..p {
            if j != k && per_pair[j][k] > best.0 {
                best = (per_pair[j][k], (j.min(k), j.max(k)));
            }
        }
    }
    Ok(NStar {
        delta_star: ds,
        kappa,
        m,
        per_pair,
        n_star: best.0,
        n_star_ceil: best.0.ceil() as u64,
        argmax: best.1,
        pseudo_inverse_used: estimate.pseudo_inverse_used,
    })
}

fn n_star_pairs<T: Real>(quadratic: &Matrix<T>, factor: f64) -> Vec<Vec<f64>> {
    let p = quadratic.rows();
    (0..p)
        .map(|j| {
            (0..p)
                .map(|k| {
                    if j == k {
                        0.0
                    } else {
                        quadratic[(j, k)].to_f64_lossy().max(0.0) * factor
                    }
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::function::erf::erf_inv;

    #[test]
    fn inverse_round_trip() {
        for z in [0.5, 0.9, 0.99, 0.999] {
            for (f, finv) in [(phi1 as fn(f64) -> f64, phi1_inverse as fn(f64) -> Result<f64>), (phi2, phi2_inverse)] {
                let d = finv(z).unwrap();
                assert!((f(d) - z).abs() < 1e-10, "z {z}");
            }
        }
    }

    #[test]
    fn median_threshold() {
        // p = 2, m = 1/2 gives z = 1/2, the normal quartile
        let d = delta_star(2, 0.5).unwrap();
        assert!((d - 0.674_489_750_196_081_7).abs() < 1e-10);
        assert!((phi1_inverse(0.5).unwrap() - phi2_inverse(0.5).unwrap()).abs() == 0.0);
    }

    #[test]
    fn matches_quantile_oracle() {
        let z = 1.0 - 0.2 / 90.0;
        let want = std::f64::consts::SQRT_2 * erf_inv(z);
        let got = delta_star(10, 0.1).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn monotone_in_m_and_p() {
        let mut prev = f64::INFINITY;
        for m in [0.01, 0.05, 0.1, 0.3, 0.6, 0.9] {
            let d = delta_star(8, m).unwrap();
            assert!(d < prev);
            prev = d;
        }
        let mut prev = 0.0;
        for p in [2, 3, 5, 10, 50, 200] {
            let d = delta_star(p, 0.1).unwrap();
            assert!(d > prev);
            prev = d;
        }
    }

    #[test]
    fn rejects_infinite_threshold() {
        assert!(delta_star(2, 1.0).is_err());
        assert!(delta_star(1, 0.1).is_err());
        assert!(erf_half_inverse(1.0).is_err());
    }
}
