//! Ridge regression on standardized features with degree-two terms.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::Scaler;
use crate::features::FeatureMatrix;

/// Above this many quadratic terms only squares and treatment products are
/// kept.
const MAX_QUADRATIC_TERMS: usize = 600;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Term {
    Main(usize),
    Product(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    scaler: Scaler,
    terms: Vec<Term>,
    centers: Vec<f64>,
    coef: Vec<f64>,
    intercept: f64,
    penalty: f64,
}

fn build_terms(p: usize, treatment: Option<usize>) -> Vec<Term> {
    let mut terms: Vec<Term> = (0..p).map(Term::Main).collect();
    if p * (p + 1) / 2 <= MAX_QUADRATIC_TERMS {
        for j in 0..p {
            for k in j..p {
                terms.push(Term::Product(j, k));
            }
        }
    } else {
        for j in 0..p {
            terms.push(Term::Product(j, j));
            if let Some(t) = treatment.filter(|&t| t != j) {
                terms.push(Term::Product(j.min(t), j.max(t)));
            }
        }
    }
    terms
}

fn term_value(term: Term, z: &[f64]) -> f64 {
    match term {
        Term::Main(j) => z[j],
        Term::Product(j, k) => z[j] * z[k],
    }
}

/// Fits one model per penalty, sharing a single eigendecomposition. The
/// penalty is multiplied by the training-set size.
pub fn fit_path(
    features: &FeatureMatrix,
    outcome: &[f64],
    train: &[usize],
    penalties: &[f64],
) -> Vec<RidgeModel> {
    let scaler = Scaler::fit(features, train);
    let terms = build_terms(features.n_cols(), features.treatment_index());
    let (n, d) = (train.len(), terms.len());
    let mut z = vec![0.0; features.n_cols()];
    let mut design = DMatrix::<f64>::zeros(n, d);
    for (r, &i) in train.iter().enumerate() {
        scaler.transform_row(features, i, &mut z);
        for (c, &t) in terms.iter().enumerate() {
            design[(r, c)] = term_value(t, &z);
        }
    }
    let centers: Vec<f64> = (0..d).map(|c| design.column(c).mean()).collect();
    for c in 0..d {
        design.column_mut(c).add_scalar_mut(-centers[c]);
    }
    let intercept = train.iter().map(|&i| outcome[i]).sum::<f64>() / n as f64;
    let y = DVector::from_iterator(n, train.iter().map(|&i| outcome[i] - intercept));
    let gram = design.tr_mul(&design);
    let rhs = design.tr_mul(&y);
    let eig = SymmetricEigen::new(gram);
    let proj = eig.eigenvectors.tr_mul(&rhs);

    penalties
        .iter()
        .map(|&penalty| {
            let shrunk = DVector::from_iterator(
                d,
                (0..d).map(|k| proj[k] / (eig.eigenvalues[k].max(0.0) + penalty * n as f64)),
            );
            let coef = &eig.eigenvectors * shrunk;
            RidgeModel {
                scaler: scaler.clone(),
                terms: terms.clone(),
                centers: centers.clone(),
                coef: coef.iter().copied().collect(),
                intercept,
                penalty,
            }
        })
        .collect()
}

impl RidgeModel {
    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn predict_row(&self, features: &FeatureMatrix, i: usize, z: &mut [f64]) -> f64 {
        self.scaler.transform_row(features, i, z);
        self.intercept
            + self
                .terms
                .iter()
                .zip(&self.coef)
                .zip(&self.centers)
                .map(|((&t, &b), &c)| b * (term_value(t, z) - c))
                .sum::<f64>()
    }

    pub fn predict(&self, features: &FeatureMatrix, rows: &[usize]) -> Vec<f64> {
        let mut z = vec![0.0; features.n_cols()];
        rows.iter().map(|&i| self.predict_row(features, i, &mut z)).collect()
    }
}
