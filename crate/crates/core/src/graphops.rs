//! Undirected graphs, elimination orderings and the induced (filled) graph that
//! fixes a map's sparsity pattern.
//!
//! Labels are 0-based. An [`Ordering`] places original label `perm[pos]` at map
//! position `pos`; elimination for the induced graph runs from the last position
//! down to the first.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SingError};
use crate::map::{validate_permutation, SparsityPattern};

/// Undirected simple graph on `0..p`; edges stored as `(j, k)` with `j < k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Graph {
    pub p: usize,
    pub edges: BTreeSet<(usize, usize)>,
}

/// Thresholded estimate of the conditional-independence graph.
pub type Adjacency = Graph;

impl Graph {
    pub fn empty(p: usize) -> Self {
        Self {
            p,
            edges: BTreeSet::new(),
        }
    }

    pub fn complete(p: usize) -> Self {
        let mut g = Self::empty(p);
        for k in 0..p {
            for j in 0..k {
                g.edges.insert((j, k));
            }
        }
        g
    }

    pub fn from_edges(p: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut g = Self::empty(p);
        for (a, b) in edges {
            if a == b || a >= p || b >= p {
                return Err(SingError::InvalidInput(format!("invalid edge ({a}, {b}) for p = {p}")));
            }
            g.add_edge(a, b);
        }
        Ok(g)
    }

    /// Inserts `{a, b}`; self-loops are ignored.
    pub fn add_edge(&mut self, a: usize, b: usize) {
        debug_assert!(a < self.p && b < self.p);
        if a != b {
            self.edges.insert((a.min(b), a.max(b)));
        }
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == v {
                    Some(b)
                } else if b == v {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out
    }

    fn adjacency_lists(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.p];
        for &(a, b) in &self.edges {
            adj[a].insert(b);
            adj[b].insert(a);
        }
        adj
    }

    /// Dense 0/1 adjacency matrix.
    pub fn to_matrix(&self) -> Vec<Vec<u8>> {
        let mut m = vec![vec![0u8; self.p]; self.p];
        for &(a, b) in &self.edges {
            m[a][b] = 1;
            m[b][a] = 1;
        }
        m
    }

    pub fn from_matrix(m: &[Vec<u8>]) -> Result<Self> {
        let p = m.len();
        let mut g = Self::empty(p);
        for (i, row) in m.iter().enumerate() {
            if row.len() != p {
                return Err(SingError::InvalidInput("adjacency matrix is not square".into()));
            }
            for (j, &v) in row.iter().enumerate() {
                if v > 1 || v != m[j][i] {
                    return Err(SingError::InvalidInput("adjacency matrix must be symmetric 0/1".into()));
                }
                if v == 1 {
                    if i == j {
                        return Err(SingError::InvalidInput("self-loop in adjacency matrix".into()));
                    }
                    g.add_edge(i, j);
                }
            }
        }
        Ok(g)
    }
}

/// JSON edge list with optional variable names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub p: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub names: Vec<String>,
    pub n_edges: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Graph {
    pub fn to_document(&self, names: &[String]) -> GraphDocument {
        GraphDocument {
            p: self.p,
            names: names.to_vec(),
            n_edges: self.n_edges(),
            edges: self.edges.iter().copied().collect(),
        }
    }

    pub fn from_document(doc: &GraphDocument) -> Result<Self> {
        Self::from_edges(doc.p, doc.edges.iter().copied())
    }

    pub fn to_json(&self, names: &[String]) -> String {
        serde_json::to_string_pretty(&self.to_document(names)).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(s)?)
    }

    /// 0/1 adjacency matrix as CSV with a header row of names.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = names.join(",");
        out.push('\n');
        for row in self.to_matrix() {
            let cells: Vec<String> = row.iter().map(u8::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Bijection from map positions to original labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ordering {
    perm: Vec<usize>,
}

impl Ordering {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        validate_permutation(&perm, perm.len())?;
        Ok(Self { perm })
    }

    pub fn identity(p: usize) -> Self {
        Self {
            perm: (0..p).collect(),
        }
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.perm
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// `pos[label]`, the inverse permutation.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.perm.len()];
        for (i, &v) in self.perm.iter().enumerate() {
            pos[v] = i;
        }
        pos
    }

    pub fn inverse(&self) -> Self {
        Self {
            perm: self.positions(),
        }
    }

    pub fn reversed(&self) -> Self {
        Self {
            perm: self.perm.iter().rev().copied().collect(),
        }
    }

    /// `self` applied after `inner`: position `i` maps to `inner[self[i]]`.
    pub fn compose(&self, inner: &Ordering) -> Self {
        Self {
            perm: self.perm.iter().map(|&i| inner.perm[i]).collect(),
        }
    }
}

/// Relabels `g` into map positions: edge `{a, b}` becomes `{pos[a], pos[b]}`.
pub fn permute_graph(g: &Graph, ordering: &Ordering) -> Graph {
    let pos = ordering.positions();
    let mut out = Graph::empty(g.p);
    for &(a, b) in &g.edges {
        out.add_edge(pos[a], pos[b]);
    }
    out
}

/// Inverse of [`permute_graph`]: positions back to original labels.
pub fn unpermute_graph(g: &Graph, ordering: &Ordering) -> Graph {
    let mut out = Graph::empty(g.p);
    for &(a, b) in &g.edges {
        out.add_edge(ordering.perm[a], ordering.perm[b]);
    }
    out
}

/// Graph after symbolic elimination of positions `p-1, ..., 0`: each eliminated
/// node's remaining (lower) neighbours are joined into a clique. Returned in map
/// positions, containing the original edges plus fill.
pub fn induced_graph(g: &Graph, ordering: &Ordering) -> Graph {
    let relabeled = permute_graph(g, ordering);
    let mut adj = relabeled.adjacency_lists();
    let mut out = relabeled;
    for m in (0..g.p).rev() {
        let lower: Vec<usize> = adj[m].iter().copied().filter(|&v| v < m).collect();
        for (i, &a) in lower.iter().enumerate() {
            for &b in &lower[i + 1..] {
                if out.edges.insert((a, b)) {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
        }
    }
    out
}

/// Number of fill edges created by `induced_graph(g, ordering)`.
pub fn fill_in(g: &Graph, ordering: &Ordering) -> usize {
    induced_graph(g, ordering).n_edges() - g.n_edges()
}

/// Fill created when eliminating nodes in `sequence` order (first element first).
pub fn elimination_fill(g: &Graph, sequence: &Ordering) -> usize {
    fill_in(g, &sequence.reversed())
}

/// Inactive pairs `(j, k)`, `j < k`, are the non-edges of the induced graph.
pub fn sparsity_pattern(induced: &Graph, ordering: &Ordering) -> SparsityPattern {
    let p = induced.p;
    let inactive = (0..p)
        .flat_map(|k| (0..k).map(move |j| (j, k)))
        .filter(|&(j, k)| !induced.has_edge(j, k))
        .collect();
    SparsityPattern {
        dimension: p,
        inactive_pairs: inactive,
        permutation: ordering.as_slice().to_vec(),
    }
}

#[derive(Clone, Copy)]
enum Greedy {
    Degree,
    Fill,
}

/// Greedy elimination sequence; ties go to the lowest label.
fn greedy_sequence(g: &Graph, rule: Greedy) -> Vec<usize> {
    let mut adj = g.adjacency_lists();
    let mut alive = vec![true; g.p];
    let mut seq = Vec::with_capacity(g.p);
    for _ in 0..g.p {
        let mut best: Option<(usize, usize)> = None;
        for v in (0..g.p).filter(|&v| alive[v]) {
            let score = match rule {
                Greedy::Degree => adj[v].len(),
                Greedy::Fill => {
                    let nb: Vec<usize> = adj[v].iter().copied().collect();
                    let mut missing = 0;
                    for (i, &a) in nb.iter().enumerate() {
                        missing += nb[i + 1..].iter().filter(|&&b| !adj[a].contains(&b)).count();
                    }
                    missing
                }
            };
            if best.is_none_or(|(s, _)| score < s) {
                best = Some((score, v));
            }
        }
        let (_, v) = best.expect("a live vertex remains");
        let nb: Vec<usize> = adj[v].iter().copied().collect();
        for (i, &a) in nb.iter().enumerate() {
            for &b in &nb[i + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        for &a in &nb {
            adj[a].remove(&v);
        }
        adj[v].clear();
        alive[v] = false;
        seq.push(v);
    }
    seq
}

/// Greedy minimum-degree elimination order (first eliminated first).
pub fn order_min_degree(g: &Graph) -> Ordering {
    Ordering {
        perm: greedy_sequence(g, Greedy::Degree),
    }
}

/// Greedy minimum-fill elimination order (first eliminated first).
pub fn order_min_fill(g: &Graph) -> Ordering {
    Ordering {
        perm: greedy_sequence(g, Greedy::Fill),
    }
}

/// Reverse of the minimum-degree elimination order. Used as a map ordering,
/// the top-down elimination in [`induced_graph`] then follows the min-degree
/// sequence.
pub fn order_reverse_cholesky(g: &Graph) -> Ordering {
    order_min_degree(g).reversed()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingHeuristic {
    MinDegree,
    MinFill,
    #[default]
    ReverseCholesky,
    Identity,
}

impl OrderingHeuristic {
    pub fn order(self, g: &Graph) -> Ordering {
        match self {
            OrderingHeuristic::MinDegree => order_min_degree(g),
            OrderingHeuristic::MinFill => order_min_fill(g),
            OrderingHeuristic::ReverseCholesky => order_reverse_cholesky(g),
            OrderingHeuristic::Identity => Ordering::identity(g.p),
        }
    }
}

impl std::str::FromStr for OrderingHeuristic {
    type Err = SingError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min-degree" => Ok(Self::MinDegree),
            "min-fill" => Ok(Self::MinFill),
            "reverse-cholesky" => Ok(Self::ReverseCholesky),
            "identity" => Ok(Self::Identity),
            other => Err(SingError::InvalidInput(format!("unknown ordering '{other}'"))),
        }
    }
}

impl std::fmt::Display for OrderingHeuristic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MinDegree => "min-degree",
            Self::MinFill => "min-fill",
            Self::ReverseCholesky => "reverse-cholesky",
            Self::Identity => "identity",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig_graph() -> Graph {
        Graph::from_edges(5, [(0, 1), (0, 2), (1, 2), (2, 3), (3, 4)]).unwrap()
    }

    #[test]
    fn five_node_graph_pattern() {
        let g = fig_graph();
        let id = Ordering::identity(5);
        let ind = induced_graph(&g, &id);
        assert_eq!(ind, g);
        let pat = sparsity_pattern(&ind, &id);
        let want: BTreeSet<_> = [(0, 3), (1, 3), (0, 4), (1, 4), (2, 4)].into_iter().collect();
        assert_eq!(pat.inactive_pairs, want);
    }

    #[test]
    fn complete_and_empty_patterns() {
        let c = Graph::complete(5);
        let ord = Ordering::new(vec![3, 1, 4, 0, 2]).unwrap();
        let ind = induced_graph(&c, &ord);
        assert_eq!(ind.n_edges(), 10);
        assert!(sparsity_pattern(&ind, &ord).is_empty());
        let e = Graph::empty(4);
        let pat = sparsity_pattern(&induced_graph(&e, &Ordering::identity(4)), &Ordering::identity(4));
        assert_eq!(pat.len(), 6);
    }

    #[test]
    fn star_graph_fill_depends_on_center_position() {
        let star = Graph::from_edges(5, [(0, 1), (0, 2), (0, 3), (0, 4)]).unwrap();
        // center at position 0: eliminated last, no fill
        assert_eq!(fill_in(&star, &Ordering::identity(5)), 0);
        // center at the last position: eliminated first, leaves become a clique
        let ord = Ordering::new(vec![1, 2, 3, 4, 0]).unwrap();
        let ind = induced_graph(&star, &ord);
        for a in 0..4 {
            for b in a + 1..4 {
                assert!(ind.has_edge(a, b));
            }
        }
        assert_eq!(fill_in(&star, &ord), 6);
    }

    #[test]
    fn heuristics_basic() {
        assert_eq!(order_min_degree(&Graph::empty(4)), Ordering::identity(4));
        assert_eq!(order_min_fill(&Graph::empty(4)), Ordering::identity(4));
        let path = Graph::from_edges(6, (0..5).map(|i| (i, i + 1))).unwrap();
        assert_eq!(elimination_fill(&path, &order_min_degree(&path)), 0);
        assert_eq!(fill_in(&path, &order_reverse_cholesky(&path)), 0);
    }

    #[test]
    fn round_trip_permutation() {
        let g = fig_graph();
        let ord = Ordering::new(vec![4, 2, 0, 3, 1]).unwrap();
        assert_eq!(unpermute_graph(&permute_graph(&g, &ord), &ord), g);
        assert_eq!(permute_graph(&g, &Ordering::identity(5)), g);
        assert_eq!(ord.compose(&ord.inverse()), Ordering::identity(5));
    }

    #[test]
    fn matrix_round_trip() {
        let g = fig_graph();
        assert_eq!(Graph::from_matrix(&g.to_matrix()).unwrap(), g);
        assert!(Graph::from_matrix(&[vec![1]]).is_err());
    }

    #[test]
    fn json_and_csv_export() {
        let g = fig_graph();
        let names: Vec<String> = (0..5).map(|i| format!("v{i}")).collect();
        assert_eq!(Graph::from_json(&g.to_json(&names)).unwrap(), g);
        let csv = g.to_csv(&names);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "v0,v1,v2,v3,v4");
        assert_eq!(lines[1], "0,1,1,0,0");
        assert_eq!(lines.len(), 6);
    }

    #[test]
    fn parse_heuristic() {
        for h in [
            OrderingHeuristic::MinDegree,
            OrderingHeuristic::MinFill,
            OrderingHeuristic::ReverseCholesky,
            OrderingHeuristic::Identity,
        ] {
            assert_eq!(h.to_string().parse::<OrderingHeuristic>().unwrap(), h);
        }
        assert!("amd".parse::<OrderingHeuristic>().is_err());
    }
}
