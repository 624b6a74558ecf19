//! Reproducible synthetic data sets with known conditional-independence graphs.
//!
//! All generators draw from a ChaCha20 stream seeded with `seed_from_u64`, and
//! standard normals come from `rand_distr::StandardNormal`. Samples are drawn
//! row by row in column order, so equal `(kind, n, seed)` give identical data.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SingError};
use crate::graphops::Graph;
use crate::linalg::{cholesky, solve_lower_transpose, Matrix};
use crate::samples::SampleSet;

/// Lattice coupling used by [`grid_precision`] when none is given.
pub const GRID_GAMMA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorKind {
    ModifiedRademacher { r: usize },
    StochasticVolatility {
        t: usize,
        /// Holds the persistence fixed instead of drawing it; drops the `phi` column.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixed_phi: Option<f64>,
    },
    Gaussian { precision: Vec<Vec<f64>> },
    GaussianGrid { side: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub kind: GeneratorKind,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub samples: SampleSet<f64>,
    pub truth: Graph,
}

impl GeneratorSpec {
    pub fn generate(&self) -> Result<Generated> {
        match &self.kind {
            GeneratorKind::ModifiedRademacher { r } => gen_modified_rademacher(*r, self.n, self.seed),
            GeneratorKind::StochasticVolatility { t, fixed_phi: None } => {
                gen_stochastic_volatility(*t, self.n, self.seed)
            }
            GeneratorKind::StochasticVolatility { t, fixed_phi: Some(phi) } => {
                gen_stochastic_volatility_fixed_phi(*t, *phi, self.n, self.seed)
            }
            GeneratorKind::Gaussian { precision } => {
                gen_gaussian(&Matrix::from_rows(precision), self.n, self.seed)
            }
            GeneratorKind::GaussianGrid { side } => {
                gen_gaussian(&grid_precision(*side, GRID_GAMMA)?, self.n, self.seed)
            }
        }
    }
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Pairs `(X_i, Y_i = W_i X_i)` with `X_i, W_i` independent standard normals.
/// Columns are `X1, Y1, ..., Xr, Yr`; the truth is `r` disjoint edges.
pub fn gen_modified_rademacher(r: usize, n: usize, seed: u64) -> Result<Generated> {
    if r < 1 {
        return Err(SingError::InvalidInput("r must be at least 1".into()));
    }
    let mut g = rng(seed);
    let mut data = Vec::with_capacity(n * 2 * r);
    for _ in 0..n {
        for _ in 0..r {
            let x = normal(&mut g);
            let w = normal(&mut g);
            data.push(x);
            data.push(w * x);
        }
    }
    let names = (1..=r).flat_map(|i| [format!("X{i}"), format!("Y{i}")]).collect();
    let samples = SampleSet::with_names(n, 2 * r, data, names)?;
    let truth = Graph::from_edges(2 * r, (0..r).map(|i| (2 * i, 2 * i + 1)))?;
    Ok(Generated { samples, truth })
}

/// Edges of the volatility model over columns `mu, phi, Z1..ZT`: the chain,
/// both hyperparameters to every state, and `mu`-`phi`.
pub fn stochastic_volatility_truth(t: usize) -> Graph {
    let mut g = Graph::empty(t + 2);
    g.add_edge(0, 1);
    for i in 0..t {
        g.add_edge(0, 2 + i);
        g.add_edge(1, 2 + i);
        if i + 1 < t {
            g.add_edge(2 + i, 3 + i);
        }
    }
    g
}

fn logistic_persistence(phi_star: f64) -> f64 {
    2.0 / (1.0 + (-phi_star).exp()) - 1.0
}

fn ar_path(g: &mut ChaCha20Rng, mu: f64, phi: f64, t: usize, out: &mut Vec<f64>) -> Result<()> {
    if phi * phi >= 1.0 {
        return Err(SingError::InvalidInput(format!("persistence {phi} is not in (-1, 1)")));
    }
    let mut z = mu + normal(g) / (1.0 - phi * phi).sqrt();
    for _ in 0..t {
        z = mu + phi * (z - mu) + normal(g);
        out.push(z);
    }
    Ok(())
}

/// Joint prior draws of the log-volatility model: `mu ~ N(0,1)`,
/// `phi = 2 sigmoid(phi*) - 1` with `phi* ~ N(3,1)`, a stationary start `Z0`
/// that is not emitted, and `Z_{t+1} = mu + phi (Z_t - mu) + eps_t`.
pub fn gen_stochastic_volatility(t: usize, n: usize, seed: u64) -> Result<Generated> {
    if t < 2 {
        return Err(SingError::InvalidInput("T must be at least 2".into()));
    }
    let mut g = rng(seed);
    let mut data = Vec::with_capacity(n * (t + 2));
    for _ in 0..n {
        let mu = normal(&mut g);
        let phi = logistic_persistence(3.0 + normal(&mut g));
        data.push(mu);
        data.push(phi);
        ar_path(&mut g, mu, phi, t, &mut data)?;
    }
    let names = ["mu".to_string(), "phi".to_string()]
        .into_iter()
        .chain((1..=t).map(|i| format!("Z{i}")))
        .collect();
    let samples = SampleSet::with_names(n, t + 2, data, names)?;
    Ok(Generated {
        samples,
        truth: stochastic_volatility_truth(t),
    })
}

/// Same model with `phi` fixed. Columns are `mu, Z1..ZT`; with `phi = 0` the
/// states are independent given `mu`.
pub fn gen_stochastic_volatility_fixed_phi(t: usize, phi: f64, n: usize, seed: u64) -> Result<Generated> {
    if t < 2 {
        return Err(SingError::InvalidInput("T must be at least 2".into()));
    }
    let mut g = rng(seed);
    let mut data = Vec::with_capacity(n * (t + 1));
    for _ in 0..n {
        let mu = normal(&mut g);
        data.push(mu);
        ar_path(&mut g, mu, phi, t, &mut data)?;
    }
    let names = std::iter::once("mu".to_string())
        .chain((1..=t).map(|i| format!("Z{i}")))
        .collect();
    let samples = SampleSet::with_names(n, t + 1, data, names)?;
    let mut truth = Graph::empty(t + 1);
    for i in 0..t {
        if phi != 1.0 {
            truth.add_edge(0, 1 + i);
        }
        if phi != 0.0 && i + 1 < t {
            truth.add_edge(1 + i, 2 + i);
        }
    }
    Ok(Generated { samples, truth })
}

/// Off-diagonal support of a precision matrix.
pub fn precision_support(theta: &Matrix<f64>) -> Graph {
    let p = theta.rows();
    let mut g = Graph::empty(p);
    for j in 0..p {
        for k in j + 1..p {
            if theta[(j, k)] != 0.0 {
                g.add_edge(j, k);
            }
        }
    }
    g
}

/// Draws `N(0, Θ^{-1})` as `x = L^{-T} z` where `Θ = L L^T`.
pub fn gen_gaussian(theta: &Matrix<f64>, n: usize, seed: u64) -> Result<Generated> {
    let p = theta.rows();
    if p == 0 || theta.cols() != p || !theta.is_symmetric(0.0) {
        return Err(SingError::InvalidInput("precision must be square and symmetric".into()));
    }
    let l = cholesky(theta).ok_or(SingError::NotPositiveDefinite)?;
    let mut g = rng(seed);
    let mut data = Vec::with_capacity(n * p);
    let mut z = vec![0.0; p];
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = normal(&mut g);
        }
        data.extend(solve_lower_transpose(&l, &z));
    }
    let samples = SampleSet::new(n, p, data)?;
    Ok(Generated {
        samples,
        truth: precision_support(theta),
    })
}

/// `I + γ L` for the `side × side` lattice with Laplacian `L`; nodes are
/// numbered row by row.
pub fn grid_precision(side: usize, gamma: f64) -> Result<Matrix<f64>> {
    if side < 2 {
        return Err(SingError::InvalidInput("grid side must be at least 2".into()));
    }
    if !(gamma >= 0.0) {
        return Err(SingError::InvalidInput("grid coupling must be non-negative".into()));
    }
    let p = side * side;
    let mut theta = Matrix::identity(p);
    let mut link = |a: usize, b: usize| {
        theta[(a, b)] -= gamma;
        theta[(b, a)] -= gamma;
        theta[(a, a)] += gamma;
        theta[(b, b)] += gamma;
    };
    for r in 0..side {
        for c in 0..side {
            let v = r * side + c;
            if c + 1 < side {
                link(v, v + 1);
            }
            if r + 1 < side {
                link(v, v + side);
            }
        }
    }
    Ok(theta)
}
