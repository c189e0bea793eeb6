//! Traffic graph representation and the structural signals derived from it:
//! in/out-degrees and the all-pairs hop distance matrix.
//!
//! Undirected graphs are stored as symmetric directed edge sets so that degree
//! counting and breadth-first search share one code path.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Hop distance reported for node pairs with no connecting path.
pub const UNREACHABLE: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatioTemporalGraph {
    num_nodes: usize,
    directed: bool,
    /// Sorted, deduplicated directed edges (both orientations for undirected graphs).
    edges: Vec<(usize, usize)>,
    out_adj: Vec<Vec<usize>>,
}

impl SpatioTemporalGraph {
    /// Builds a graph from an edge list.
    ///
    /// For undirected graphs every listed pair `(u, v)` denotes the edge
    /// `{u, v}`; listing both `(u, v)` and `(v, u)` is a duplicate.
    pub fn new(num_nodes: usize, edges: &[(usize, usize)], directed: bool) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Graph("graph must have at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for (idx, &(u, v)) in edges.iter().enumerate() {
            check_edge(num_nodes, directed, &set, u, v).map_err(|m| {
                Error::Graph(format!("edge #{idx} ({u}, {v}): {m}"))
            })?;
            set.insert((u, v));
            if !directed {
                set.insert((v, u));
            }
        }
        Ok(Self::from_edge_set(num_nodes, directed, set))
    }

    fn from_edge_set(num_nodes: usize, directed: bool, set: BTreeSet<(usize, usize)>) -> Self {
        let edges: Vec<_> = set.into_iter().collect();
        let mut out_adj = vec![Vec::new(); num_nodes];
        for &(u, v) in &edges {
            out_adj[u].push(v);
        }
        Self {
            num_nodes,
            directed,
            edges,
            out_adj,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    /// Directed edge set; undirected edges appear in both orientations.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Edges as they would be written to an edge-list file: every directed
    /// edge, or one `u < v` pair per undirected edge.
    pub fn canonical_edges(&self) -> Vec<(usize, usize)> {
        if self.directed {
            self.edges.clone()
        } else {
            self.edges.iter().copied().filter(|&(u, v)| u < v).collect()
        }
    }

    pub fn out_neighbors(&self, v: usize) -> &[usize] {
        &self.out_adj[v]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u, v)).is_ok()
    }

    /// Returns a copy with one extra edge (both orientations if undirected).
    pub fn with_edge(&self, u: usize, v: usize) -> Result<Self> {
        let mut set: BTreeSet<_> = self.edges.iter().copied().collect();
        check_edge(self.num_nodes, self.directed, &set, u, v).map_err(Error::Graph)?;
        set.insert((u, v));
        if !self.directed {
            set.insert((v, u));
        }
        Ok(Self::from_edge_set(self.num_nodes, self.directed, set))
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.num_nodes)?;
        let set = self
            .edges
            .iter()
            .map(|&(u, v)| (perm[u], perm[v]))
            .collect();
        Ok(Self::from_edge_set(self.num_nodes, self.directed, set))
    }

    /// In- and out-degree of every node.
    pub fn degrees(&self) -> (Vec<usize>, Vec<usize>) {
        let mut indeg = vec![0; self.num_nodes];
        let mut outdeg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            outdeg[u] += 1;
            indeg[v] += 1;
        }
        (indeg, outdeg)
    }

    /// All-pairs shortest hop distances, one breadth-first search per source.
    pub fn shortest_path_matrix(&self) -> SpdMatrix {
        let n = self.num_nodes;
        let mut values = vec![UNREACHABLE; n * n];
        let mut queue = VecDeque::with_capacity(n);
        for src in 0..n {
            let row = &mut values[src * n..(src + 1) * n];
            row[src] = 0;
            queue.clear();
            queue.push_back(src);
            while let Some(u) = queue.pop_front() {
                let next = row[u] + 1;
                for &v in &self.out_adj[u] {
                    if row[v] == UNREACHABLE {
                        row[v] = next;
                        queue.push_back(v);
                    }
                }
            }
        }
        SpdMatrix::from_values(n, values)
    }

    /// Parses the edge-list text format. `origin` names the source in errors.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));

        let (hline, header) = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "missing header \"<N> <directed|undirected>\""))?;
        let mut parts = header.split_whitespace();
        let num_nodes: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(origin, hline, format!("malformed header {header:?}")))?;
        let directed = match parts.next() {
            Some("directed") => true,
            Some("undirected") => false,
            _ => {
                return Err(Error::parse(
                    origin,
                    hline,
                    format!("malformed header {header:?}: expected \"<N> <directed|undirected>\""),
                ))
            }
        };
        if parts.next().is_some() || num_nodes == 0 {
            return Err(Error::parse(origin, hline, format!("malformed header {header:?}")));
        }

        let mut set = BTreeSet::new();
        for (lineno, line) in lines {
            let mut fields = line.split(' ');
            let (u, v) = match (fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), None) => match (a.parse::<usize>(), b.parse::<usize>()) {
                    (Ok(u), Ok(v)) => (u, v),
                    _ => return Err(Error::parse(origin, lineno, format!("malformed edge {line:?}"))),
                },
                _ => return Err(Error::parse(origin, lineno, format!("malformed edge {line:?}"))),
            };
            check_edge(num_nodes, directed, &set, u, v)
                .map_err(|m| Error::parse(origin, lineno, m))?;
            set.insert((u, v));
            if !directed {
                set.insert((v, u));
            }
        }
        Ok(Self::from_edge_set(num_nodes, directed, set))
    }

    /// Canonical edge-list text: header, then edges sorted lexicographically.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        let kind = if self.directed { "directed" } else { "undirected" };
        let _ = writeln!(out, "{} {kind}", self.num_nodes);
        for (u, v) in self.canonical_edges() {
            let _ = writeln!(out, "{u} {v}");
        }
        out
    }
}

fn check_edge(
    n: usize,
    directed: bool,
    set: &BTreeSet<(usize, usize)>,
    u: usize,
    v: usize,
) -> std::result::Result<(), String> {
    if u >= n || v >= n {
        return Err(format!("node index out of range ({u} {v}) for N={n}"));
    }
    if u == v {
        return Err(format!("self-loop on node {u}"));
    }
    if set.contains(&(u, v)) || (!directed && set.contains(&(v, u))) {
        return Err(format!("duplicate edge ({u} {v})"));
    }
    Ok(())
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::shape(format!("permutation of length {} for {n} nodes", perm.len())));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::shape("not a permutation"));
        }
    }
    Ok(())
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<SpatioTemporalGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SpatioTemporalGraph::parse(&text, &path.display().to_string())
}

pub fn save_graph(path: impl AsRef<Path>, graph: &SpatioTemporalGraph) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, graph.to_edge_list()).map_err(|e| Error::io(path, e))
}

/// Shortest hop distances between every ordered node pair, row = source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpdMatrix {
    n: usize,
    values: Vec<i64>,
    max_observed: i64,
}

impl SpdMatrix {
    pub(crate) fn from_values(n: usize, values: Vec<i64>) -> Self {
        let max_observed = values.iter().copied().max().unwrap_or(0).max(0);
        Self {
            n,
            values,
            max_observed,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.values[i * self.n + j]
    }

    /// Row-major values; [`UNREACHABLE`] marks missing paths.
    pub fn values(&self) -> &[i64] {
        &self.values
    }

    /// Largest finite distance.
    pub fn max_observed(&self) -> i64 {
        self.max_observed
    }
}
