//! Gradient-boosted regression trees on quantile-binned features.

use rand::seq::index;
use rand_chacha::ChaCha8Rng;

use crate::features::FeatureMatrix;

const MAX_BINS: usize = 64;
const MIN_LEAF: usize = 5;
const L2: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoostingParams {
    pub depth: usize,
    pub rounds: usize,
    pub learning_rate: f64,
    pub subsample: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    Split {
        feature: u32,
        bin: u16,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf(f64),
}

#[derive(Debug, Clone, PartialEq)]
struct Tree(Vec<Node>);

impl Tree {
    fn eval(&self, mut go_left: impl FnMut(u32, u16, f64) -> bool) -> f64 {
        let mut k = 0;
        loop {
            match self.0[k] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    bin,
                    threshold,
                    left,
                    right,
                } => k = if go_left(feature, bin, threshold) { left } else { right } as usize,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostingModel {
    params: BoostingParams,
    base: f64,
    trees: Vec<Tree>,
}

/// Split points such that `x <= cuts[b]` selects bins `0..=b`.
fn bin_cuts(values: &mut [f64]) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let mut uniq: Vec<f64> = values.to_vec();
    uniq.dedup();
    if uniq.len() <= MAX_BINS {
        return uniq.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let mut cuts: Vec<f64> = (1..MAX_BINS)
        .map(|k| values[k * values.len() / MAX_BINS])
        .collect();
    cuts.dedup();
    if cuts.last() == values.last() {
        cuts.pop();
    }
    cuts
}

struct Binned {
    codes: Vec<Vec<u16>>,
    n_bins: Vec<usize>,
}

#[derive(Clone, Copy, Default)]
struct Bucket {
    sum: f64,
    count: usize,
}

fn score(sum: f64, count: usize) -> f64 {
    sum * sum / (count as f64 + L2)
}

/// Grows one depth-limited tree on residuals `grad` over `sample` rows
/// (positions into the binned training table).
fn grow(binned: &Binned, cuts: &[Vec<f64>], grad: &[f64], sample: &[usize], depth: usize, lr: f64) -> Tree {
    let p = binned.codes.len();
    let mut nodes = vec![Node::Leaf(0.0)];
    let mut slot_of: Vec<u32> = vec![0; sample.len()];
    // per active slot: tree node index, sum, count
    let mut active: Vec<(usize, f64, usize)> =
        vec![(0, sample.iter().map(|&r| grad[r]).sum(), sample.len())];
    for _ in 0..depth {
        if active.is_empty() {
            break;
        }
        let stride: usize = binned.n_bins.iter().sum();
        let offsets: Vec<usize> = binned
            .n_bins
            .iter()
            .scan(0, |acc, &b| {
                let o = *acc;
                *acc += b;
                Some(o)
            })
            .collect();
        let mut hist = vec![Bucket::default(); active.len() * stride];
        for (pos, &r) in sample.iter().enumerate() {
            let s = slot_of[pos];
            if s == u32::MAX {
                continue;
            }
            let base = s as usize * stride;
            for f in 0..p {
                let b = &mut hist[base + offsets[f] + binned.codes[f][r] as usize];
                b.sum += grad[r];
                b.count += 1;
            }
        }
        let mut next_active = Vec::new();
        let mut remap = vec![(u32::MAX, u32::MAX); active.len()];
        for (s, &(node, sum, count)) in active.iter().enumerate() {
            let parent = score(sum, count);
            let mut best: Option<(f64, usize, usize, f64, usize)> = None;
            for f in 0..p {
                let h = &hist[s * stride + offsets[f]..s * stride + offsets[f] + binned.n_bins[f]];
                let (mut ls, mut lc) = (0.0, 0usize);
                for (b, bucket) in h.iter().enumerate().take(h.len().saturating_sub(1)) {
                    ls += bucket.sum;
                    lc += bucket.count;
                    let rc = count - lc;
                    if lc < MIN_LEAF || rc < MIN_LEAF {
                        continue;
                    }
                    let gain = score(ls, lc) + score(sum - ls, rc) - parent;
                    if gain > 1e-12 && best.is_none_or(|bst| gain > bst.0) {
                        best = Some((gain, f, b, ls, lc));
                    }
                }
            }
            match best {
                Some((_, f, b, ls, lc)) => {
                    let left = nodes.len();
                    nodes.push(Node::Leaf(0.0));
                    nodes.push(Node::Leaf(0.0));
                    nodes[node] = Node::Split {
                        feature: f as u32,
                        bin: b as u16,
                        threshold: cuts[f][b],
                        left: left as u32,
                        right: left as u32 + 1,
                    };
                    remap[s] = (next_active.len() as u32, next_active.len() as u32 + 1);
                    next_active.push((left, ls, lc));
                    next_active.push((left + 1, sum - ls, count - lc));
                }
                None => nodes[node] = Node::Leaf(lr * sum / (count as f64 + L2)),
            }
        }
        for (pos, &r) in sample.iter().enumerate() {
            let s = slot_of[pos];
            if s == u32::MAX {
                continue;
            }
            let (l, rt) = remap[s as usize];
            slot_of[pos] = if l == u32::MAX {
                u32::MAX
            } else if let Node::Split { feature, bin, .. } = nodes[active[s as usize].0] {
                if binned.codes[feature as usize][r] <= bin { l } else { rt }
            } else {
                unreachable!()
            };
        }
        active = next_active;
    }
    for (node, sum, count) in active {
        nodes[node] = Node::Leaf(lr * sum / (count as f64 + L2));
    }
    Tree(nodes)
}

pub fn fit(
    features: &FeatureMatrix,
    outcome: &[f64],
    train: &[usize],
    params: BoostingParams,
    rng: &mut ChaCha8Rng,
) -> BoostingModel {
    let n = train.len();
    let mut cuts = Vec::with_capacity(features.n_cols());
    let mut codes = Vec::with_capacity(features.n_cols());
    for col in features.columns() {
        let mut vals: Vec<f64> = train.iter().map(|&i| col[i]).collect();
        let c = bin_cuts(&mut vals);
        codes.push(
            train
                .iter()
                .map(|&i| c.partition_point(|&t| t < col[i]) as u16)
                .collect::<Vec<u16>>(),
        );
        cuts.push(c);
    }
    let binned = Binned {
        n_bins: cuts.iter().map(|c| c.len() + 1).collect(),
        codes,
    };
    let y: Vec<f64> = train.iter().map(|&i| outcome[i]).collect();
    let base = y.iter().sum::<f64>() / n as f64;
    let mut pred = vec![base; n];
    let mut grad = vec![0.0; n];
    let take = ((params.subsample * n as f64).ceil() as usize).clamp(1, n);
    let mut trees = Vec::with_capacity(params.rounds);
    for _ in 0..params.rounds {
        for r in 0..n {
            grad[r] = y[r] - pred[r];
        }
        let mut sample = index::sample(rng, n, take).into_vec();
        sample.sort_unstable();
        let tree = grow(&binned, &cuts, &grad, &sample, params.depth, params.learning_rate);
        for r in 0..n {
            pred[r] += tree.eval(|f, b, _| binned.codes[f as usize][r] <= b);
        }
        trees.push(tree);
    }
    BoostingModel {
        params,
        base,
        trees,
    }
}

impl BoostingModel {
    pub fn params(&self) -> BoostingParams {
        self.params
    }

    /// The model after its first `rounds` trees.
    pub fn truncated(&self, rounds: usize) -> BoostingModel {
        BoostingModel {
            params: BoostingParams {
                rounds: rounds.min(self.trees.len()),
                ..self.params
            },
            base: self.base,
            trees: self.trees[..rounds.min(self.trees.len())].to_vec(),
        }
    }

    pub fn predict_row(&self, features: &FeatureMatrix, i: usize) -> f64 {
        let cols = features.columns();
        let mut acc = self.base;
        for t in &self.trees {
            acc += t.eval(|f, _, thr| cols[f as usize][i] <= thr);
        }
        acc
    }

    pub fn predict(&self, features: &FeatureMatrix, rows: &[usize]) -> Vec<f64> {
        rows.iter().map(|&i| self.predict_row(features, i)).collect()
    }

    /// Predictions after each of the given round counts.
    pub fn predict_staged(&self, features: &FeatureMatrix, rows: &[usize], stages: &[usize]) -> Vec<Vec<f64>> {
        let cols = features.columns();
        let mut out = vec![Vec::with_capacity(rows.len()); stages.len()];
        let mut sorted: Vec<(usize, usize)> = stages.iter().copied().enumerate().map(|(k, s)| (s, k)).collect();
        sorted.sort_unstable();
        for &i in rows {
            let mut acc = self.base;
            let mut done = 0;
            for &(stage, k) in &sorted {
                for t in &self.trees[done..stage.min(self.trees.len())] {
                    acc += t.eval(|f, _, thr| cols[f as usize][i] <= thr);
                }
                done = done.max(stage.min(self.trees.len()));
                out[k].push(acc);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn params(depth: usize, rounds: usize) -> BoostingParams {
        BoostingParams {
            depth,
            rounds,
            learning_rate: 0.1,
            subsample: 0.8,
        }
    }

    #[test]
    fn cuts_partition_values() {
        let mut v = vec![3.0, 1.0, 2.0, 2.0];
        assert_eq!(bin_cuts(&mut v), vec![1.5, 2.5]);
        let mut many: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let c = bin_cuts(&mut many);
        assert!(c.len() < MAX_BINS && c.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn fits_step_function() {
        let n = 400;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| if v < 0.3 { 1.0 } else { 4.0 }).collect();
        let f = FeatureMatrix::from_parts(vec![("x".into(), x)], ("a".into(), vec![0.0; n])).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let m = fit(&f, &y, &rows, params(2, 200), &mut rng::stream(0, "t"));
        let mse: f64 = m.predict(&f, &rows).iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n as f64;
        // the step falls inside one quantile bin, which stays mixed
        assert!(mse < 0.03, "{mse}");
    }

    #[test]
    fn staged_matches_truncated() {
        let n = 300;
        let x: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64).collect();
        let a: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| (x[i] / 10.0).sin() + a[i]).collect();
        let f = FeatureMatrix::from_parts(vec![("x".into(), x)], ("a".into(), a)).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let m = fit(&f, &y, &rows, params(3, 50), &mut rng::stream(1, "t"));
        let staged = m.predict_staged(&f, &rows, &[50, 20]);
        assert_eq!(staged[1], m.truncated(20).predict(&f, &rows));
        assert_eq!(staged[0], m.predict(&f, &rows));
        let short = fit(&f, &y, &rows, params(3, 20), &mut rng::stream(1, "t"));
        assert_eq!(short, m.truncated(20));
    }
}
