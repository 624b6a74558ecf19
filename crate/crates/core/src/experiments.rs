//! Replicated fits on Gaussian lattice data comparing `Ω̂` variance and bias
//! across map sparsity levels and sample sizes.

use serde::{Deserialize, Serialize};

use crate::datagen::{gen_gaussian, grid_precision, precision_support, GRID_GAMMA};
use crate::error::{Result, SingError};
use crate::estimate::{fit_map, FitOptions};
use crate::graphops::{induced_graph, sparsity_pattern, OrderingHeuristic};
use crate::linalg::{cholesky, cholesky_solve, Matrix};
use crate::map::SparsityPattern;
use crate::precision::omega_hat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternLevel {
    /// Full lower-triangular map.
    Dense,
    /// Induced graph of the true lattice under the chosen ordering.
    Exact,
    /// Each component depends on its own variable only.
    Diagonal,
}

impl std::fmt::Display for PatternLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dense => "dense",
            Self::Exact => "exact",
            Self::Diagonal => "diagonal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceStudyConfig {
    pub side: usize,
    pub gamma: f64,
    pub ns: Vec<usize>,
    pub patterns: Vec<PatternLevel>,
    pub replicates: usize,
    pub beta: usize,
    pub ordering: OrderingHeuristic,
    pub seed: u64,
}

impl Default for VarianceStudyConfig {
    fn default() -> Self {
        Self {
            side: 4,
            gamma: GRID_GAMMA,
            ns: vec![500, 1000, 2000, 4000],
            patterns: vec![PatternLevel::Dense, PatternLevel::Exact, PatternLevel::Diagonal],
            replicates: 30,
            beta: 2,
            ordering: OrderingHeuristic::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub pattern: PatternLevel,
    pub n: usize,
    /// Mean squared Frobenius distance of the replicates from their mean.
    pub variance: f64,
    /// Frobenius distance of the replicate mean from `|Θ|` on the standardized scale.
    pub bias: f64,
    pub n_coefficients: usize,
}

/// `|Θ|` of the standardized variables: `D Θ D` with `D = diag(Σ)^{1/2}`.
pub fn standardized_abs_precision(theta: &Matrix<f64>) -> Result<Matrix<f64>> {
    let p = theta.rows();
    let l = cholesky(theta).ok_or(SingError::NotPositiveDefinite)?;
    let sd: Vec<f64> = (0..p)
        .map(|j| {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            cholesky_solve(&l, &e)[j].sqrt()
        })
        .collect();
    let mut out = Matrix::zeros(p, p);
    for j in 0..p {
        for k in 0..p {
            out[(j, k)] = (theta[(j, k)] * sd[j] * sd[k]).abs();
        }
    }
    Ok(out)
}

fn pattern_for(level: PatternLevel, theta: &Matrix<f64>, ordering: OrderingHeuristic) -> SparsityPattern {
    let p = theta.rows();
    match level {
        PatternLevel::Dense => SparsityPattern::dense(p),
        PatternLevel::Diagonal => SparsityPattern::diagonal(p),
        PatternLevel::Exact => {
            let truth = precision_support(theta);
            let ord = ordering.order(&truth);
            sparsity_pattern(&induced_graph(&truth, &ord), &ord)
        }
    }
}

fn frobenius_sq(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// One row per `(pattern, n)` in the order patterns-major. Replicate `r` at
/// sample size index `i` uses seed `seed + 1000 i + r`, shared across patterns.
pub fn variance_bias_study(cfg: &VarianceStudyConfig) -> Result<Vec<VarianceRow>> {
    if cfg.replicates < 2 {
        return Err(SingError::InvalidInput("at least two replicates are required".into()));
    }
    let theta = grid_precision(cfg.side, cfg.gamma)?;
    let truth = standardized_abs_precision(&theta)?;
    let p = theta.rows();
    let options = FitOptions::with_beta(cfg.beta);
    let mut estimates: Vec<Vec<Vec<Matrix<f64>>>> = vec![vec![Vec::new(); cfg.ns.len()]; cfg.patterns.len()];
    let patterns: Vec<SparsityPattern> = cfg.patterns.iter().map(|&l| pattern_for(l, &theta, cfg.ordering)).collect();
    let mut n_coefficients = vec![0; cfg.patterns.len()];
    for (i, &n) in cfg.ns.iter().enumerate() {
        for r in 0..cfg.replicates {
            let seed = cfg.seed + 1000 * i as u64 + r as u64;
            let data = gen_gaussian(&theta, n, seed)?.samples.standardize();
            for (a, pattern) in patterns.iter().enumerate() {
                let fit = fit_map(&data, pattern, &options)
                    .map_err(|e| e.context(format!("{} pattern, n = {n}, replicate {r}", cfg.patterns[a])))?;
                n_coefficients[a] = fit.map.n_coefficients();
                estimates[a][i].push(omega_hat(&fit.map, &data)?);
            }
        }
    }
    let mut rows = Vec::new();
    for (a, &level) in cfg.patterns.iter().enumerate() {
        for (i, &n) in cfg.ns.iter().enumerate() {
            let reps = &estimates[a][i];
            let mut mean = Matrix::zeros(p, p);
            for m in reps {
                for (acc, v) in mean.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *acc += v / reps.len() as f64;
                }
            }
            let variance = reps.iter().map(|m| frobenius_sq(m, &mean)).sum::<f64>() / (reps.len() - 1) as f64;
            rows.push(VarianceRow {
                pattern: level,
                n,
                variance,
                bias: frobenius_sq(&mean, &truth).sqrt(),
                n_coefficients: n_coefficients[a],
            });
        }
    }
    Ok(rows)
}

/// Long-format CSV: `pattern,n,variance,bias,n_coefficients`.
pub fn variance_rows_csv(rows: &[VarianceRow]) -> String {
    let mut out = String::from("pattern,n,variance,bias,n_coefficients\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.pattern, r.n, r.variance, r.bias, r.n_coefficients));
    }
    out
}
