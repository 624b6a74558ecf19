//! The structure-learning loop: fit a sparse map, estimate the generalized
//! precision, threshold, reorder and refit until the edge count stops
//! decreasing.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SingError};
use crate::estimate::{fit_map, ComponentDiagnostics, FitOptions};
use crate::graphops::{induced_graph, sparsity_pattern, Graph, OrderingHeuristic};
use crate::linalg::Matrix;
use crate::map::{SparsityPattern, DEFAULT_QUADRATURE_ORDER};
use crate::precision::{estimate_precision, threshold};
use crate::samples::SampleSet;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingConfig {
    pub beta: usize,
    pub delta: f64,
    pub ordering: OrderingHeuristic,
    pub quadrature_order: usize,
    pub max_iterations: usize,
    /// Recorded with the run; the loop itself draws no random numbers.
    pub seed: u64,
}

impl Default for SingConfig {
    fn default() -> Self {
        Self {
            beta: 2,
            delta: 2.0,
            ordering: OrderingHeuristic::default(),
            quadrature_order: DEFAULT_QUADRATURE_ORDER,
            max_iterations: 20,
            seed: 0,
        }
    }
}

impl SingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 1 {
            return Err(SingError::InvalidInput("beta must be at least 1".into()));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(SingError::InvalidInput("delta must be positive and finite".into()));
        }
        if self.max_iterations < 1 {
            return Err(SingError::InvalidInput("max_iterations must be at least 1".into()));
        }
        if self.quadrature_order < 1 {
            return Err(SingError::InvalidInput("quadrature order must be at least 1".into()));
        }
        Ok(())
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            beta: self.beta,
            quadrature_order: self.quadrature_order,
            ..FitOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Edge count equal to the previous iteration's.
    Stable,
    /// Edge count grew; the previous, sparser edge set is returned.
    Increased,
    MaxIterations,
}

/// State of one pass of the loop. Matrices and edges are in original labels.
#[derive(Debug, Clone)]
pub struct IterationRecord<T> {
    pub iteration: usize,
    /// Map ordering used for this fit.
    pub permutation: Vec<usize>,
    /// Inactive pairs of the fitted pattern, in map positions.
    pub pattern: SparsityPattern,
    pub omega: Matrix<T>,
    pub rho: Matrix<T>,
    pub edges: Graph,
    pub diagnostics: Vec<ComponentDiagnostics>,
    pub pseudo_inverse_used: bool,
    pub wall_time_s: f64,
}

impl<T: Real> IterationRecord<T> {
    pub fn n_edges(&self) -> usize {
        self.edges.n_edges()
    }

    /// SHA-256 over the little-endian `f64` bytes of `Ω̂`, row-major.
    pub fn omega_checksum(&self) -> String {
        matrix_checksum(&self.omega)
    }
}

#[derive(Debug, Clone)]
pub struct SingTrace<T> {
    pub p: usize,
    /// `p(p-1)/2`, the edge count the loop starts from.
    pub initial_edges: usize,
    pub iterations: Vec<IterationRecord<T>>,
    pub stop: StopReason,
}

impl<T> SingTrace<T> {
    pub fn max_iterations_reached(&self) -> bool {
        self.stop == StopReason::MaxIterations
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SingOutput<T> {
    /// Recovered graph in original labels.
    pub graph: Graph,
    pub trace: SingTrace<T>,
}

/// One JSON-lines trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub iteration: usize,
    pub permutation: Vec<usize>,
    pub pattern_size: usize,
    pub n_edges: usize,
    pub edges: Vec<(usize, usize)>,
    pub omega_sha256: String,
    pub pseudo_inverse_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

pub(crate) fn matrix_checksum<T: Real>(m: &Matrix<T>) -> String {
    let mut hasher = Sha256::new();
    for v in m.as_slice() {
        hasher.update(v.to_f64_lossy().to_le_bytes());
    }
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl<T: Real> SingTrace<T> {
    pub fn lines(&self, with_timing: bool) -> Vec<TraceLine> {
        self.iterations
            .iter()
            .map(|r| TraceLine {
                iteration: r.iteration,
                permutation: r.permutation.clone(),
                pattern_size: r.pattern.len(),
                n_edges: r.n_edges(),
                edges: r.edges.edges.iter().copied().collect(),
                omega_sha256: r.omega_checksum(),
                pseudo_inverse_used: r.pseudo_inverse_used,
                wall_time_s: with_timing.then_some(r.wall_time_s),
            })
            .collect()
    }

    /// JSON lines, one per iteration. Timing is the only nondeterministic
    /// field; leave it out to compare runs byte for byte.
    pub fn to_jsonl(&self, with_timing: bool) -> String {
        let mut out = String::new();
        for line in self.lines(with_timing) {
            out.push_str(&serde_json::to_string(&line).expect("trace line serializes"));
            out.push('\n');
        }
        out
    }
}

/// Runs the loop from a dense pattern under the identity ordering.
pub fn run_sing<T: Real>(samples: &SampleSet<T>, config: &SingConfig) -> Result<SingOutput<T>> {
    run_sing_from(samples, config, SparsityPattern::dense(samples.p()))
}

/// Runs the loop from a given starting pattern (with its permutation).
/// Samples are standardized first unless they already carry a record.
pub fn run_sing_from<T: Real>(
    samples: &SampleSet<T>,
    config: &SingConfig,
    start: SparsityPattern,
) -> Result<SingOutput<T>> {
    config.validate()?;
    let p = samples.p();
    if p < 2 {
        return Err(SingError::InvalidInput("at least two variables are required".into()));
    }
    start.validate()?;
    if start.dimension != p {
        return Err(SingError::InvalidInput(format!(
            "starting pattern has dimension {}, samples have {p}",
            start.dimension
        )));
    }
    let data = if samples.is_standardized() {
        samples.clone()
    } else {
        samples.standardize()
    };
    let options = config.fit_options();
    let delta = T::lit(config.delta);

    let initial_edges = p * (p - 1) / 2;
    let mut previous = Graph::complete(p);
    let mut pattern = start;
    let mut iterations = Vec::new();
    for l in 1..=config.max_iterations {
        let started = Instant::now();
        let ctx = |e: SingError| e.context(format!("iteration {l}"));
        let fit = fit_map(&data, &pattern, &options).map_err(ctx)?;
        let est = estimate_precision(&fit.map, &data, &fit.information_blocks()).map_err(ctx)?;
        let edges = threshold(&est, delta);
        let n_edges = edges.n_edges();
        iterations.push(IterationRecord {
            iteration: l,
            permutation: pattern.permutation.clone(),
            pattern: pattern.clone(),
            omega: est.omega,
            rho: est.rho,
            edges: edges.clone(),
            diagnostics: fit.diagnostics(),
            pseudo_inverse_used: est.pseudo_inverse_used,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        let trace = |iterations, stop| SingTrace {
            p,
            initial_edges,
            iterations,
            stop,
        };
        if n_edges > previous.n_edges() {
            return Ok(SingOutput {
                graph: previous,
                trace: trace(iterations, StopReason::Increased),
            });
        }
        if n_edges == previous.n_edges() {
            return Ok(SingOutput {
                graph: edges,
                trace: trace(iterations, StopReason::Stable),
            });
        }
        if l == config.max_iterations {
            return Ok(SingOutput {
                graph: edges,
                trace: trace(iterations, StopReason::MaxIterations),
            });
        }
        let ordering = config.ordering.order(&edges);
        let induced = induced_graph(&edges, &ordering);
        pattern = sparsity_pattern(&induced, &ordering);
        previous = edges;
    }
    unreachable!("the loop returns on its last iteration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn independent_normals(n: usize, p: usize, seed: u64) -> SampleSet<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = (0..n * p).map(|_| StandardNormal.sample(&mut rng)).collect();
        SampleSet::new(n, p, data).unwrap()
    }

    #[test]
    fn independent_pair_gives_empty_graph() {
        let s = independent_normals(1000, 2, 11);
        for beta in 1..=2 {
            let cfg = SingConfig {
                beta,
                ..SingConfig::default()
            };
            let out = run_sing(&s, &cfg).unwrap();
            assert_eq!(out.graph.n_edges(), 0);
            assert!((1..=2).contains(&out.trace.len()));
        }
    }

    #[test]
    fn edge_counts_strictly_decrease_until_last() {
        let s = independent_normals(600, 4, 5);
        let out = run_sing(&s, &SingConfig::default()).unwrap();
        let counts: Vec<usize> = out.trace.iterations.iter().map(|r| r.n_edges()).collect();
        let mut prev = out.trace.initial_edges;
        for &c in &counts[..counts.len() - 1] {
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn config_validation() {
        let s = independent_normals(50, 2, 1);
        for cfg in [
            SingConfig { beta: 0, ..SingConfig::default() },
            SingConfig { delta: 0.0, ..SingConfig::default() },
            SingConfig { max_iterations: 0, ..SingConfig::default() },
        ] {
            assert!(matches!(run_sing(&s, &cfg), Err(SingError::InvalidInput(_))));
        }
        let one = independent_normals(50, 1, 1);
        assert!(run_sing(&one, &SingConfig::default()).is_err());
    }

    #[test]
    fn max_iterations_flag() {
        let s = independent_normals(400, 3, 9);
        let cfg = SingConfig {
            max_iterations: 1,
            delta: 1e-9,
            ..SingConfig::default()
        };
        let out = run_sing(&s, &cfg).unwrap();
        assert_eq!(out.trace.len(), 1);
        // a tiny threshold keeps every edge, so the count is stable, not capped
        assert_eq!(out.trace.stop, StopReason::Stable);
        let cfg = SingConfig {
            max_iterations: 1,
            ..SingConfig::default()
        };
        let out = run_sing(&s, &cfg).unwrap();
        if out.trace.iterations[0].n_edges() < 3 {
            assert!(out.trace.max_iterations_reached());
        }
    }

    #[test]
    fn trace_jsonl_without_timing_is_reproducible() {
        let s = independent_normals(300, 3, 2);
        let a = run_sing(&s, &SingConfig::default()).unwrap();
        let b = run_sing(&s, &SingConfig::default()).unwrap();
        assert_eq!(a.trace.to_jsonl(false), b.trace.to_jsonl(false));
        let line: TraceLine = serde_json::from_str(a.trace.to_jsonl(true).lines().next().unwrap()).unwrap();
        assert!(line.wall_time_s.is_some());
        assert_eq!(line.omega_sha256.len(), 64);
    }
}
