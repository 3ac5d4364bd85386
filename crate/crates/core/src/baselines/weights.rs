//! Row-normalized spatial weights.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gmrf::PrecisionMatrix;
use crate::graph::SpatialGraph;
use crate::sparse::SparseCholesky;

/// `W = D⁻¹A`: each non-isolated row averages the node's neighbours, and
/// isolated rows are zero.
#[derive(Debug, Clone, Copy)]
pub struct WeightsMatrixView<'a> {
    graph: &'a SpatialGraph,
}

impl<'a> WeightsMatrixView<'a> {
    pub fn new(graph: &'a SpatialGraph) -> Self {
        WeightsMatrixView { graph }
    }

    pub fn n(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn graph(&self) -> &SpatialGraph {
        self.graph
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n());
        (0..self.n())
            .map(|i| {
                let nb = self.graph.neighbors(i);
                if nb.is_empty() {
                    0.0
                } else {
                    nb.iter().map(|&j| x[j as usize]).sum::<f64>() / nb.len() as f64
                }
            })
            .collect()
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.apply(x.as_slice()))
    }

    /// `W` applied to every column.
    pub fn apply_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = m.column_iter().map(|c| self.apply_vec(&c.into_owned())).collect();
        DMatrix::from_columns(&cols)
    }

    /// `tr(WᵀW) = Σ_i 1/deg(i)` over non-isolated nodes.
    pub fn trace_wtw(&self) -> f64 {
        (0..self.n())
            .filter(|&i| !self.graph.is_isolated(i))
            .map(|i| 1.0 / self.graph.degree(i) as f64)
            .sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let nb = self.graph.neighbors(i);
            for &j in nb {
                m[(i, j as usize)] = 1.0 / nb.len() as f64;
            }
        }
        m
    }

    /// Factorizes `I − ρW` for repeated solves.
    pub fn lag_solver(&self, rho: f64) -> Result<LagSolver> {
        if !(rho.abs() < 1.0) {
            return Err(Error::Divergent(format!("spatial lag parameter {rho} is outside (-1, 1)")));
        }
        let q = PrecisionMatrix::car(self.graph, rho);
        let factor = SparseCholesky::factor(q.matrix())?;
        let scale = (0..self.n()).map(|i| self.graph.degree(i).max(1) as f64).collect();
        Ok(LagSolver { factor, scale })
    }
}

/// Solves `(I − ρW) y = b` through the symmetric system
/// `(D − ρA) y = D b`.
#[derive(Debug, Clone)]
pub struct LagSolver {
    factor: SparseCholesky,
    scale: Vec<f64>,
}

impl LagSolver {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let db: Vec<f64> = b.iter().zip(&self.scale).map(|(v, d)| v * d).collect();
        self.factor.solve(&db)
    }
}
