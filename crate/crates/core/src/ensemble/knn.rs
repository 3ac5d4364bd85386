//! k-nearest-neighbour regression on standardized features.

use rayon::prelude::*;

use super::Scaler;
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    scaler: Scaler,
    dim: usize,
    points: Vec<f64>,
    targets: Vec<f64>,
    k: usize,
}

pub fn fit(features: &FeatureMatrix, outcome: &[f64], train: &[usize], k: usize) -> KnnModel {
    let scaler = Scaler::fit(features, train);
    let dim = features.n_cols();
    let mut points = vec![0.0; train.len() * dim];
    for (r, &i) in train.iter().enumerate() {
        scaler.transform_row(features, i, &mut points[r * dim..(r + 1) * dim]);
    }
    KnnModel {
        scaler,
        dim,
        points,
        targets: train.iter().map(|&i| outcome[i]).collect(),
        k: k.clamp(1, train.len()),
    }
}

impl KnnModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn with_k(&self, k: usize) -> KnnModel {
        KnnModel {
            k: k.clamp(1, self.targets.len()),
            ..self.clone()
        }
    }

    /// Indices of the `k` closest training points, nearest first; ties go
    /// to the lower index.
    fn nearest(&self, z: &[f64], k: usize) -> Vec<usize> {
        let mut d: Vec<(f64, usize)> = self
            .points
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(j, p)| (p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum(), j))
            .collect();
        let k = k.min(d.len());
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < d.len() {
            d.select_nth_unstable_by(k - 1, cmp);
            d.truncate(k);
        }
        d.sort_unstable_by(cmp);
        d.into_iter().map(|(_, j)| j).collect()
    }

    /// Predictions for several neighbour counts from one neighbour search.
    pub fn predict_multi(&self, features: &FeatureMatrix, rows: &[usize], ks: &[usize]) -> Vec<Vec<f64>> {
        let kmax = ks.iter().copied().max().unwrap_or(1).clamp(1, self.targets.len());
        let per_row: Vec<Vec<f64>> = rows
            .par_iter()
            .map(|&i| {
                let mut z = vec![0.0; self.dim];
                self.scaler.transform_row(features, i, &mut z);
                let nn = self.nearest(&z, kmax);
                ks.iter()
                    .map(|&k| {
                        let k = k.clamp(1, kmax);
                        nn[..k].iter().map(|&j| self.targets[j]).sum::<f64>() / k as f64
                    })
                    .collect()
            })
            .collect();
        (0..ks.len())
            .map(|c| per_row.iter().map(|r| r[c]).collect())
            .collect()
    }

    pub fn predict(&self, features: &FeatureMatrix, rows: &[usize]) -> Vec<f64> {
        self.predict_multi(features, rows, &[self.k]).pop().expect("one k")
    }
}
