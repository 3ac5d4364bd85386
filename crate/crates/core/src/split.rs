//! Spatially buffered train/validation split.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitParams {
    /// Fraction of nodes drawn as validation seeds.
    pub alpha: f64,
    /// BFS levels grown around the seeds to form the validation set.
    pub levels: usize,
    /// BFS levels grown around the validation set and left out of training.
    pub buffer: usize,
    /// Supplied by the caller, never read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams {
            alpha: 0.02,
            levels: 1,
            buffer: 1,
            seed: 0,
        }
    }
}

impl SplitParams {
    pub fn with_seed(seed: u64) -> Self {
        SplitParams {
            seed,
            ..Self::default()
        }
    }

    pub fn n_seeds(&self, n: usize) -> Result<usize> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "split alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        let k = (self.alpha * n as f64).ceil() as usize;
        if k == 0 {
            return Err(Error::InvalidParameter("split selects no seed nodes".into()));
        }
        Ok(k.min(n))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainValSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub buffer: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Buffer,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Buffer => "buffer",
        }
    }
}

impl TrainValSplit {
    pub fn n_nodes(&self) -> usize {
        self.train.len() + self.val.len() + self.buffer.len()
    }

    /// Role of every node, in graph order.
    pub fn roles(&self) -> Vec<Role> {
        let mut roles = vec![Role::Train; self.n_nodes()];
        for &i in &self.val {
            roles[i] = Role::Val;
        }
        for &i in &self.buffer {
            roles[i] = Role::Buffer;
        }
        roles
    }

    pub fn train_fraction(&self) -> f64 {
        self.train.len() as f64 / self.n_nodes() as f64
    }

    pub fn val_fraction(&self) -> f64 {
        self.val.len() as f64 / self.n_nodes() as f64
    }
}

/// Grows `member` by `levels` BFS rings.
fn expand(graph: &SpatialGraph, member: &mut [bool], frontier: &[usize], levels: usize) {
    let mut current = frontier.to_vec();
    for _ in 0..levels {
        let mut next = Vec::new();
        for &v in &current {
            for &u in graph.neighbors(v) {
                let u = u as usize;
                if !member[u] {
                    member[u] = true;
                    next.push(u);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        current = next;
    }
}

/// Seeds are sampled without replacement, the validation set is their
/// `levels`-ring neighbourhood, the buffer is a further `buffer` rings, and
/// everything else trains.
pub fn spatial_split(graph: &SpatialGraph, params: &SplitParams) -> Result<TrainValSplit> {
    let n = graph.n_nodes();
    if n == 0 {
        return Err(Error::InvalidParameter("cannot split an empty graph".into()));
    }
    let k = params.n_seeds(n)?;
    let mut stream = rng::stream(params.seed, "split");
    let seeds = index::sample(&mut stream, n, k).into_vec();
    split_from_seeds(graph, &seeds, params.levels, params.buffer)
}

/// Same as [`spatial_split`] but with the seed nodes given explicitly.
pub fn split_from_seeds(
    graph: &SpatialGraph,
    seeds: &[usize],
    levels: usize,
    buffer: usize,
) -> Result<TrainValSplit> {
    let n = graph.n_nodes();
    let mut in_val = vec![false; n];
    for &s in seeds {
        if s >= n {
            return Err(Error::UnknownNode(s.to_string()));
        }
        in_val[s] = true;
    }
    let mut unique: Vec<usize> = seeds.to_vec();
    unique.sort_unstable();
    unique.dedup();
    expand(graph, &mut in_val, &unique, levels);
    let val: Vec<usize> = (0..n).filter(|&i| in_val[i]).collect();
    let mut blocked = in_val.clone();
    expand(graph, &mut blocked, &val, buffer);
    let train: Vec<usize> = (0..n).filter(|&i| !blocked[i]).collect();
    let buffer: Vec<usize> = (0..n).filter(|&i| blocked[i] && !in_val[i]).collect();
    if train.is_empty() {
        return Err(Error::InvalidParameter(
            "split left no training nodes; lower alpha, levels or buffer".into(),
        ));
    }
    Ok(TrainValSplit { train, val, buffer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Connectivity;
    use proptest::prelude::*;

    fn path(n: usize) -> SpatialGraph {
        SpatialGraph::from_index_edges(n, (0..n - 1).map(|i| (i, i + 1)), None).unwrap()
    }

    fn cut_is_empty(g: &SpatialGraph, s: &TrainValSplit) -> bool {
        let roles = s.roles();
        g.edges().iter().all(|&(a, b)| {
            let (ra, rb) = (roles[a as usize], roles[b as usize]);
            !matches!((ra, rb), (Role::Train, Role::Val) | (Role::Val, Role::Train))
        })
    }

    #[test]
    fn path_seed_at_fifty() {
        let s = split_from_seeds(&path(100), &[50], 1, 1).unwrap();
        assert_eq!(s.val, vec![49, 50, 51]);
        assert_eq!(s.buffer, vec![48, 52]);
        assert_eq!(s.train.len(), 95);
    }

    #[test]
    fn no_expansion_keeps_seeds() {
        let g = SpatialGraph::grid(20, 20, Connectivity::Rook);
        let p = SplitParams {
            alpha: 0.05,
            levels: 0,
            buffer: 0,
            seed: 3,
        };
        let s = spatial_split(&g, &p).unwrap();
        assert_eq!(s.val.len(), 20);
        assert!(s.buffer.is_empty());
        assert_eq!(s.train.len(), 380);
    }

    #[test]
    fn invalid_alpha() {
        let g = path(10);
        for alpha in [0.0, 1.0, 1.5, -0.1, f64::NAN] {
            let p = SplitParams { alpha, ..SplitParams::default() };
            assert!(spatial_split(&g, &p).is_err(), "{alpha}");
        }
    }

    #[test]
    fn dense_graph_leaves_no_training() {
        let n = 20;
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        let g = SpatialGraph::from_index_edges(n, edges, None).unwrap();
        assert!(spatial_split(&g, &SplitParams::default()).is_err());
    }

    #[test]
    fn deterministic() {
        let g = SpatialGraph::grid(30, 30, Connectivity::Queen);
        let p = SplitParams::with_seed(17);
        assert_eq!(spatial_split(&g, &p).unwrap(), spatial_split(&g, &p).unwrap());
        assert_ne!(
            spatial_split(&g, &p).unwrap(),
            spatial_split(&g, &SplitParams::with_seed(18)).unwrap()
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn partition_and_cut(rows in 3usize..25, cols in 3usize..25, seed in 0u64..1000,
                             levels in 0usize..3, buffer in 1usize..3, queen in any::<bool>()) {
            let c = if queen { Connectivity::Queen } else { Connectivity::Rook };
            let g = SpatialGraph::grid(rows, cols, c);
            let p = SplitParams { alpha: 0.03, levels, buffer, seed };
            if let Ok(s) = spatial_split(&g, &p) {
                prop_assert_eq!(s.n_nodes(), g.n_nodes());
                let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.buffer).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..g.n_nodes()).collect::<Vec<_>>());
                prop_assert!(cut_is_empty(&g, &s));
            }
        }

        #[test]
        fn monotone_in_levels_and_buffer(seed in 0u64..1000, levels in 0usize..3, buffer in 0usize..3) {
            let g = SpatialGraph::grid(30, 30, Connectivity::Rook);
            let base = SplitParams { alpha: 0.01, levels, buffer, seed };
            let s = spatial_split(&g, &base).unwrap();
            let more_l = spatial_split(&g, &SplitParams { levels: levels + 1, ..base }).unwrap();
            let more_b = spatial_split(&g, &SplitParams { buffer: buffer + 1, ..base }).unwrap();
            prop_assert!(s.val.iter().all(|v| more_l.val.contains(v)));
            prop_assert!(more_b.train.iter().all(|v| s.train.contains(v)));
        }
    }
}
