//! Fill-reducing ordering by nested dissection with BFS level-set
//! separators.
//!
//! Each part is split at a middle level of a breadth-first level structure
//! rooted at a pseudo-peripheral node; the two halves are ordered first
//! and the separator last. Spatial contiguity graphs are close to planar,
//! where this gives near-optimal fill.

const LEAF_SIZE: usize = 64;
const DEAD: u32 = u32::MAX;

/// Symmetric adjacency in CSR form (no self-loops).
pub struct Adjacency<'a> {
    pub offsets: &'a [usize],
    pub neighbors: &'a [u32],
}

impl Adjacency<'_> {
    fn n(&self) -> usize {
        self.offsets.len() - 1
    }

    fn of(&self, v: u32) -> &[u32] {
        let v = v as usize;
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }
}

struct Scratch {
    label: Vec<u32>,
    seen: Vec<u32>,
    stamp: u32,
    next_label: u32,
}

impl Scratch {
    fn fresh_stamp(&mut self) -> u32 {
        self.stamp += 1;
        self.stamp
    }

    fn fresh_label(&mut self) -> u32 {
        self.next_label += 1;
        self.next_label
    }

    /// BFS restricted to nodes carrying `label`; returns the level sets.
    fn levels(&mut self, adj: &Adjacency, root: u32, label: u32) -> Vec<Vec<u32>> {
        let stamp = self.fresh_stamp();
        self.seen[root as usize] = stamp;
        let mut levels = vec![vec![root]];
        loop {
            let mut next = Vec::new();
            for &v in levels.last().expect("nonempty") {
                for &u in adj.of(v) {
                    let ui = u as usize;
                    if self.label[ui] == label && self.seen[ui] != stamp {
                        self.seen[ui] = stamp;
                        next.push(u);
                    }
                }
            }
            if next.is_empty() {
                return levels;
            }
            levels.push(next);
        }
    }

    fn degree_in(&self, adj: &Adjacency, v: u32, label: u32) -> usize {
        adj.of(v)
            .iter()
            .filter(|&&u| self.label[u as usize] == label)
            .count()
    }
}

/// Returns `perm` with `perm[k]` = the node eliminated `k`-th.
pub fn nested_dissection(adj: &Adjacency) -> Vec<usize> {
    let n = adj.n();
    let mut perm = vec![usize::MAX; n];
    let mut sc = Scratch {
        label: vec![0; n],
        seen: vec![0; n],
        stamp: 0,
        next_label: 0,
    };
    let mut stack: Vec<(u32, Vec<u32>, usize)> = vec![(0, (0..n as u32).collect(), 0)];

    while let Some((label, nodes, start)) = stack.pop() {
        if nodes.len() <= LEAF_SIZE {
            place(&mut perm, &nodes, start);
            continue;
        }

        // connected components get ordered independently
        let first = sc.levels(adj, nodes[0], label);
        let reached: usize = first.iter().map(Vec::len).sum();
        if reached < nodes.len() {
            let mut offset = start;
            let mut comp: Vec<u32> = first.concat();
            let mut cursor = 0;
            loop {
                // relabelled nodes drop out of `label`, so anything still
                // carrying it has not been reached yet
                let l = sc.fresh_label();
                for &v in &comp {
                    sc.label[v as usize] = l;
                }
                let len = comp.len();
                stack.push((l, comp, offset));
                offset += len;
                while cursor < nodes.len() && sc.label[nodes[cursor] as usize] != label {
                    cursor += 1;
                }
                if cursor == nodes.len() {
                    break;
                }
                comp = sc.levels(adj, nodes[cursor], label).concat();
            }
            continue;
        }

        // pseudo-peripheral root
        let mut levels = first;
        for _ in 0..4 {
            let last = levels.last().expect("nonempty");
            let cand = *last
                .iter()
                .min_by_key(|&&v| (sc.degree_in(adj, v, label), v))
                .expect("nonempty");
            let lv = sc.levels(adj, cand, label);
            if lv.len() > levels.len() {
                levels = lv;
            } else {
                break;
            }
        }
        let h = levels.len();
        if h < 3 {
            place(&mut perm, &nodes, start);
            continue;
        }

        let total = nodes.len();
        let sizes: Vec<usize> = levels.iter().map(Vec::len).collect();
        let mut below = vec![0usize; h + 1];
        for i in 0..h {
            below[i + 1] = below[i] + sizes[i];
        }
        let mid = (1..h - 1)
            .find(|&m| below[m + 1] * 2 >= total)
            .unwrap_or(h - 2);
        let lo = mid.saturating_sub(3).max(1);
        let hi = (mid + 3).min(h - 2);
        let sep_level = (lo..=hi)
            .filter(|&m| {
                let (b, a) = (below[m], total - below[m + 1]);
                b.min(a) * 4 >= total
            })
            .min_by_key(|&m| (sizes[m], m.abs_diff(mid)))
            .unwrap_or(mid);

        let mut part_a: Vec<u32> = levels[..sep_level].concat();
        let part_b: Vec<u32> = levels[sep_level + 1..].concat();
        let lb = sc.fresh_label();
        for &v in &part_b {
            sc.label[v as usize] = lb;
        }
        // separator nodes not touching B are not needed to separate
        let mut sep = Vec::with_capacity(sizes[sep_level]);
        for &v in &levels[sep_level] {
            if adj.of(v).iter().any(|&u| sc.label[u as usize] == lb) {
                sep.push(v);
            } else {
                part_a.push(v);
            }
        }
        let la = sc.fresh_label();
        for &v in &part_a {
            sc.label[v as usize] = la;
        }
        for &v in &sep {
            sc.label[v as usize] = DEAD;
        }
        place(&mut perm, &sep, start + part_a.len() + part_b.len());
        let b_start = start + part_a.len();
        stack.push((lb, part_b, b_start));
        stack.push((la, part_a, start));
    }
    debug_assert!(perm.iter().all(|&p| p != usize::MAX));
    perm
}

fn place(perm: &mut [usize], nodes: &[u32], start: usize) {
    for (k, &v) in nodes.iter().enumerate() {
        perm[start + k] = v as usize;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Connectivity, SpatialGraph};

    fn csr(g: &SpatialGraph) -> (Vec<usize>, Vec<u32>) {
        let mut offsets = vec![0];
        let mut nb = Vec::new();
        for i in 0..g.n_nodes() {
            nb.extend_from_slice(g.neighbors(i));
            offsets.push(nb.len());
        }
        (offsets, nb)
    }

    fn assert_permutation(p: &[usize]) {
        let mut seen = vec![false; p.len()];
        for &v in p {
            assert!(!seen[v], "node {v} placed twice");
            seen[v] = true;
        }
    }

    #[test]
    fn grid_ordering_is_a_permutation() {
        let g = SpatialGraph::grid(40, 37, Connectivity::Rook);
        let (o, nb) = csr(&g);
        let p = nested_dissection(&Adjacency { offsets: &o, neighbors: &nb });
        assert_eq!(p.len(), g.n_nodes());
        assert_permutation(&p);
    }

    #[test]
    fn disconnected_and_isolated_nodes() {
        let mut edges: Vec<(usize, usize)> = (0..99).map(|i| (i, i + 1)).collect();
        edges.extend((150..249).map(|i| (i, i + 1)));
        let g = SpatialGraph::from_index_edges(300, edges, None).unwrap();
        let (o, nb) = csr(&g);
        let p = nested_dissection(&Adjacency { offsets: &o, neighbors: &nb });
        assert_permutation(&p);
    }

    #[test]
    fn star_graph() {
        let g = SpatialGraph::from_index_edges(500, (1..500).map(|i| (0, i)), None).unwrap();
        let (o, nb) = csr(&g);
        let p = nested_dissection(&Adjacency { offsets: &o, neighbors: &nb });
        assert_permutation(&p);
        // the hub separates everything and must come last
        assert_eq!(*p.last().unwrap(), 0);
    }
}
