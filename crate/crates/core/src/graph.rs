//! Immutable undirected spatial graph, per-node fields, and Moran's I.

use std::collections::{HashMap, HashSet};
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// A per-node real vector aligned to a [`SpatialGraph`]'s node order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeField(Vec<f64>);

impl NodeField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("node field entry {i}")));
        }
        Ok(NodeField(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for NodeField {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// 4-neighbour lattice.
    Rook,
    /// 8-neighbour lattice.
    Queen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGraph {
    node_ids: Vec<String>,
    index: HashMap<String, usize>,
    /// Each unordered pair once, as `(lo, hi)` with `lo < hi`, sorted.
    edges: Vec<(u32, u32)>,
    coords: Option<Vec<[f64; 2]>>,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
}

impl SpatialGraph {
    /// Builds a graph from node identifiers and an edge list over those
    /// identifiers. Self-loops and repeated pairs (in either direction) are
    /// dropped; node order follows `node_ids`.
    pub fn build<S: AsRef<str>>(
        node_ids: Vec<String>,
        edges: &[(S, S)],
        coords: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(node_ids.len());
        for (i, id) in node_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateNode(id.clone()));
            }
        }
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::UnknownNode(id.to_string()))
        };
        let mut pairs = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            pairs.push((lookup(a.as_ref())?, lookup(b.as_ref())?));
        }
        Self::assemble(node_ids, index, pairs, coords)
    }

    /// Builds a graph over nodes `0..n` named by their index.
    pub fn from_index_edges(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        coords: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let node_ids: Vec<String> = (0..n).map(|i| i.to_string()).collect();
        let index = node_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        let mut pairs = Vec::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::UnknownNode(a.max(b).to_string()));
            }
            pairs.push((a, b));
        }
        Self::assemble(node_ids, index, pairs, coords)
    }

    /// Regular lattice with `rows * cols` nodes in row-major order and
    /// coordinates `(col, row)`.
    pub fn grid(rows: usize, cols: usize, connectivity: Connectivity) -> Self {
        let id = |r: usize, c: usize| r * cols + c;
        let mut edges = Vec::with_capacity(rows * cols * 4);
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    edges.push((id(r, c), id(r, c + 1)));
                }
                if r + 1 < rows {
                    edges.push((id(r, c), id(r + 1, c)));
                    if connectivity == Connectivity::Queen {
                        if c + 1 < cols {
                            edges.push((id(r, c), id(r + 1, c + 1)));
                        }
                        if c > 0 {
                            edges.push((id(r, c), id(r + 1, c - 1)));
                        }
                    }
                }
            }
        }
        let coords = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| [c as f64, r as f64]))
            .collect();
        Self::from_index_edges(rows * cols, edges, Some(coords)).expect("lattice edges are valid")
    }

    fn assemble(
        node_ids: Vec<String>,
        index: HashMap<String, usize>,
        pairs: Vec<(usize, usize)>,
        coords: Option<Vec<[f64; 2]>>,
    ) -> Result<Self> {
        let n = node_ids.len();
        if let Some(c) = &coords {
            check_len(n, c.len())?;
            if c.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("coordinates".into()));
            }
        }
        let mut edges: Vec<(u32, u32)> = pairs
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b) as u32, a.max(b) as u32))
            .collect();
        edges.sort_unstable();
        edges.dedup();

        let mut degree = vec![0usize; n];
        for &(a, b) in &edges {
            degree[a as usize] += 1;
            degree[b as usize] += 1;
        }
        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + degree[i];
        }
        let mut fill = offsets.clone();
        let mut neighbors = vec![0u32; offsets[n]];
        for &(a, b) in &edges {
            neighbors[fill[a as usize]] = b;
            fill[a as usize] += 1;
            neighbors[fill[b as usize]] = a;
            fill[b as usize] += 1;
        }
        for i in 0..n {
            neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Ok(SpatialGraph {
            node_ids,
            index,
            edges,
            coords,
            offsets,
            neighbors,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Unordered edges, each stored once as `(lo, hi)`.
    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn coords(&self) -> Option<&[[f64; 2]]> {
        self.coords.as_deref()
    }

    pub fn with_coords(mut self, coords: Vec<[f64; 2]>) -> Result<Self> {
        check_len(self.n_nodes(), coords.len())?;
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n_nodes()).map(|i| self.degree(i)).collect()
    }

    pub fn is_isolated(&self, i: usize) -> bool {
        self.degree(i) == 0
    }

    /// Subgraph induced by `keep` (node order preserved).
    pub fn induced(&self, keep: &[usize]) -> Result<SpatialGraph> {
        let set: HashSet<usize> = keep.iter().copied().collect();
        let ids: Vec<String> = keep.iter().map(|&i| self.node_ids[i].clone()).collect();
        let edges: Vec<(&str, &str)> = self
            .edges
            .iter()
            .filter(|(a, b)| set.contains(&(*a as usize)) && set.contains(&(*b as usize)))
            .map(|&(a, b)| {
                (
                    self.node_ids[a as usize].as_str(),
                    self.node_ids[b as usize].as_str(),
                )
            })
            .collect();
        let coords = self
            .coords
            .as_ref()
            .map(|c| keep.iter().map(|&i| c[i]).collect());
        SpatialGraph::build(ids, &edges, coords)
    }
}

/// Mean of `field` over each node's neighbours; `None` for isolated nodes.
pub fn neighbor_means(graph: &SpatialGraph, field: &[f64]) -> Result<Vec<Option<f64>>> {
    check_len(graph.n_nodes(), field.len())?;
    Ok((0..graph.n_nodes())
        .map(|i| {
            let nb = graph.neighbors(i);
            if nb.is_empty() {
                None
            } else {
                Some(nb.iter().map(|&j| field[j as usize]).sum::<f64>() / nb.len() as f64)
            }
        })
        .collect())
}

/// Global Moran's I with binary adjacency weights (both directions of every
/// edge counted in `S0`). Isolated nodes contribute to the mean and the
/// variance but have no weight terms.
pub fn morans_i(graph: &SpatialGraph, field: &[f64]) -> Result<f64> {
    check_len(graph.n_nodes(), field.len())?;
    if graph.n_edges() == 0 {
        return Err(Error::Edgeless);
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let denom: f64 = field.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom <= 0.0 {
        return Err(Error::ZeroVariance("field"));
    }
    let cross: f64 = graph
        .edges()
        .iter()
        .map(|&(a, b)| (field[a as usize] - mean) * (field[b as usize] - mean))
        .sum();
    let s0 = 2.0 * graph.n_edges() as f64;
    Ok(n / s0 * (2.0 * cross) / denom)
}
