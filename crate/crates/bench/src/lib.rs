//! Shared fixtures for the criterion benches.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use spatial_synth::dataset::SpaceDataset;
use spatial_synth::env::TreatmentGrid;
use spatial_synth::features::{ColumnRole, ColumnSpec, FeatureMatrix, TreatmentType};
use spatial_synth::graph::{Connectivity, NodeField, SpatialGraph};

/// Deterministic rough field on the nodes of a lattice with `cols` columns.
pub fn rough_field(n: usize, cols: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            (0.37 * r).sin() + (0.23 * c).cos() + ((i * 7919) % 104729) as f64 / 104729.0 - 0.5
        })
        .collect()
}

/// A continuous-treatment dataset on a `g × g` lattice with two covariates,
/// a confounded treatment and a linear outcome with unit effect.
pub fn lattice_dataset(g: usize) -> SpaceDataset {
    let n = g * g;
    let graph = SpatialGraph::grid(g, g, Connectivity::Rook);
    let x0 = rough_field(n, g);
    let x1: Vec<f64> = (0..n).map(|i| ((i * 31) % 17) as f64 / 17.0).collect();
    let a: Vec<f64> = (0..n).map(|i| 0.8 * x0[i] + x1[i]).collect();
    let y: Vec<f64> = (0..n).map(|i| a[i] + x0[i] - 0.5 * x1[i]).collect();
    let grid: Vec<f64> = (0..21).map(|k| -2.0 + 0.2 * k as f64).collect();
    let cf = DMatrix::from_fn(n, grid.len(), |i, k| y[i] + grid[k] - a[i]);
    let cov = |name: &str| ColumnSpec {
        name: name.into(),
        role: ColumnRole::Covariate,
    };
    SpaceDataset {
        observed_covariates: FeatureMatrix::new(vec![cov("x0"), cov("x1")], vec![x0, x1]).expect("valid columns"),
        treatment: NodeField::new(a).expect("finite"),
        synthetic_outcome: NodeField::new(y).expect("finite"),
        counterfactuals: cf,
        grid: TreatmentGrid::new(grid).expect("increasing"),
        graph,
        treatment_type: TreatmentType::Continuous,
        masked_group_id: None,
        smoothness_score: None,
        confounding_scores: BTreeMap::new(),
    }
}
