//! Graph construction over token sequences.
//!
//! Two constructions are supported: one node per distinct token, or one node
//! per position. In both, two nodes are adjacent when they fall inside a
//! common contiguous span of `window` tokens. Self-loops are never added.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;
use crate::tokenizer::TokenSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    #[serde(alias = "unit", alias = "unique_token")]
    Unique,
    #[serde(alias = "idx")]
    Index,
}

impl std::str::FromStr for Construction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unique" | "unit" | "unique_token" => Ok(Construction::Unique),
            "index" | "idx" => Ok(Construction::Index),
            _ => Err(Error::InvalidArgument(format!(
                "unknown construction {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Construction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Construction::Unique => "unique",
            Construction::Index => "index",
        })
    }
}

/// Unweighted undirected graph with token ids attached to nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGraph {
    /// Row-major `m x m` adjacency with entries 0/1.
    adjacency: Vec<u8>,
    node_token_ids: Vec<usize>,
    construction: Construction,
}

impl CodeGraph {
    /// Builds a graph from an explicit edge list. Self-loops are rejected.
    pub fn from_edges(
        node_token_ids: Vec<usize>,
        edges: &[(usize, usize)],
        construction: Construction,
    ) -> Result<Self> {
        let m = node_token_ids.len();
        let mut g = CodeGraph {
            adjacency: vec![0; m * m],
            node_token_ids,
            construction,
        };
        for &(v, u) in edges {
            if v >= m || u >= m {
                return Err(Error::InvalidArgument(format!(
                    "edge ({v},{u}) out of range for {m} nodes"
                )));
            }
            if v == u {
                return Err(Error::InvalidArgument(format!("self-loop on node {v}")));
            }
            g.link(v, u);
        }
        Ok(g)
    }

    fn empty(node_token_ids: Vec<usize>, construction: Construction) -> Self {
        let m = node_token_ids.len();
        CodeGraph {
            adjacency: vec![0; m * m],
            node_token_ids,
            construction,
        }
    }

    fn link(&mut self, v: usize, u: usize) {
        let m = self.num_nodes();
        self.adjacency[v * m + u] = 1;
        self.adjacency[u * m + v] = 1;
    }

    pub fn num_nodes(&self) -> usize {
        self.node_token_ids.len()
    }

    pub fn node_token_ids(&self) -> &[usize] {
        &self.node_token_ids
    }

    pub fn construction(&self) -> Construction {
        self.construction
    }

    pub fn has_edge(&self, v: usize, u: usize) -> bool {
        self.adjacency[v * self.num_nodes() + u] != 0
    }

    pub fn degree(&self, v: usize) -> usize {
        let m = self.num_nodes();
        self.adjacency[v * m..(v + 1) * m]
            .iter()
            .map(|&a| a as usize)
            .sum()
    }

    /// Undirected edges as `(v, u)` with `v < u`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let m = self.num_nodes();
        let mut out = Vec::new();
        for v in 0..m {
            for u in v + 1..m {
                if self.has_edge(v, u) {
                    out.push((v, u));
                }
            }
        }
        out
    }

    /// Relabels nodes so that old node `v` becomes node `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let m = self.num_nodes();
        check_permutation(perm, m)?;
        let mut ids = vec![0; m];
        for (v, &p) in perm.iter().enumerate() {
            ids[p] = self.node_token_ids[v];
        }
        let mut g = CodeGraph::empty(ids, self.construction);
        for (v, u) in self.edges() {
            g.link(perm[v], perm[u]);
        }
        Ok(g)
    }

    /// Dense `m x m` adjacency as reals.
    pub fn adjacency_matrix(&self) -> Matrix {
        let m = self.num_nodes();
        Matrix::from_vec(m, m, self.adjacency.iter().map(|&a| a as f64).collect())
            .expect("square adjacency")
    }
}

pub(crate) fn check_permutation(perm: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    if perm.len() != m {
        return Err(Error::InvalidArgument(format!(
            "permutation of length {} for {m} nodes",
            perm.len()
        )));
    }
    for &p in perm {
        if p >= m || seen[p] {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        seen[p] = true;
    }
    Ok(())
}

fn check_window(window: usize) -> Result<()> {
    if window < 2 {
        return Err(Error::InvalidArgument(format!(
            "window must be at least 2, got {window}"
        )));
    }
    Ok(())
}

/// One node per distinct token id, in first-occurrence order.
pub fn build_unique_token_graph(seq: &TokenSequence, window: usize) -> Result<CodeGraph> {
    check_window(window)?;
    let ids = seq.ids();
    let mut node_of: HashMap<usize, usize> = HashMap::new();
    let mut nodes = Vec::new();
    let positions: Vec<usize> = ids
        .iter()
        .map(|&t| {
            *node_of.entry(t).or_insert_with(|| {
                nodes.push(t);
                nodes.len() - 1
            })
        })
        .collect();
    let mut g = CodeGraph::empty(nodes, Construction::Unique);
    // every pair of positions closer than `window` shares some span
    for i in 0..positions.len() {
        for j in i + 1..positions.len().min(i + window) {
            let (a, b) = (positions[i], positions[j]);
            if a != b {
                g.link(a, b);
            }
        }
    }
    Ok(g)
}

/// One node per position; `i` and `j` are adjacent iff `0 < |i - j| < window`.
pub fn build_index_graph(seq: &TokenSequence, window: usize) -> Result<CodeGraph> {
    check_window(window)?;
    let ids = seq.ids().to_vec();
    let l = ids.len();
    let mut g = CodeGraph::empty(ids, Construction::Index);
    for i in 0..l {
        for j in i + 1..l.min(i + window) {
            g.link(i, j);
        }
    }
    Ok(g)
}

pub fn build_graph(
    seq: &TokenSequence,
    window: usize,
    construction: Construction,
) -> Result<CodeGraph> {
    match construction {
        Construction::Unique => build_unique_token_graph(seq, window),
        Construction::Index => build_index_graph(seq, window),
    }
}

/// `D^{-1/2} A D^{-1/2}` with zero rows and columns for isolated nodes.
pub fn normalize_adjacency(g: &CodeGraph) -> Matrix {
    let m = g.num_nodes();
    let inv_sqrt: Vec<f64> = (0..m)
        .map(|v| match g.degree(v) {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    let mut out = Matrix::zeros(m, m);
    for v in 0..m {
        for u in 0..m {
            if g.has_edge(v, u) {
                out.set(v, u, inv_sqrt[v] * inv_sqrt[u]);
            }
        }
    }
    out
}

/// JSON line emitted by graph export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub m: usize,
    pub edges: Vec<[usize; 2]>,
    pub node_token_ids: Vec<usize>,
    pub construction: Construction,
}

impl From<&CodeGraph> for GraphRecord {
    fn from(g: &CodeGraph) -> Self {
        GraphRecord {
            m: g.num_nodes(),
            edges: g.edges().into_iter().map(|(v, u)| [v, u]).collect(),
            node_token_ids: g.node_token_ids.clone(),
            construction: g.construction,
        }
    }
}

impl TryFrom<&GraphRecord> for CodeGraph {
    type Error = Error;

    fn try_from(r: &GraphRecord) -> Result<Self> {
        if r.m != r.node_token_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "m = {} but {} node ids",
                r.m,
                r.node_token_ids.len()
            )));
        }
        let edges: Vec<(usize, usize)> = r.edges.iter().map(|e| (e[0], e[1])).collect();
        CodeGraph::from_edges(r.node_token_ids.clone(), &edges, r.construction)
    }
}
