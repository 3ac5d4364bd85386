//! Sparse symmetric positive-definite factorization.

mod cholesky;
mod ordering;

pub use cholesky::{SparseCholesky, SymmetricMatrix};
pub use ordering::{nested_dissection, Adjacency};
