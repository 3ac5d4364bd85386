//! Least squares on small dense designs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Reciprocal condition below which the normal equations get a tiny ridge.
const RCOND_MIN: f64 = 1e-12;

/// Minimizes `‖y − Dθ‖²/n + Σ_j pen_j θ_j²`. Columns are rescaled to unit
/// root-mean-square internally, which leaves the solution unchanged. A
/// rank-deficient unpenalized design falls back to a tiny ridge.
pub fn penalized_lstsq(design: &DMatrix<f64>, y: &[f64], pen: &[f64]) -> Result<DVector<f64>> {
    let (n, p) = design.shape();
    if y.len() != n || pen.len() != p {
        return Err(Error::LengthMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if n == 0 || p == 0 {
        return Err(Error::InvalidParameter("empty design".into()));
    }
    let scale: Vec<f64> = design
        .column_iter()
        .map(|c| {
            let s = (c.norm_squared() / n as f64).sqrt();
            if s > 0.0 { s } else { 1.0 }
        })
        .collect();
    let mut d = design.clone();
    for (j, s) in scale.iter().enumerate() {
        d.column_mut(j).scale_mut(1.0 / s);
    }
    let yv = DVector::from_column_slice(y);
    let mut gram = d.tr_mul(&d) / n as f64;
    let rhs = d.tr_mul(&yv) / n as f64;
    for j in 0..p {
        gram[(j, j)] += pen[j] / (scale[j] * scale[j]);
    }
    let theta = solve_spd(gram, &rhs)?;
    Ok(DVector::from_fn(p, |j, _| theta[j] / scale[j]))
}

pub fn ols(design: &DMatrix<f64>, y: &[f64]) -> Result<DVector<f64>> {
    penalized_lstsq(design, y, &vec![0.0; design.ncols()])
}

fn solve_spd(gram: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normal equations".into()));
    }
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if max <= 0.0 {
        return Err(Error::Singular("design has no nonzero columns".into()));
    }
    let mut g = gram;
    if min < RCOND_MIN * max {
        log::warn!("rank-deficient design (rcond {:.1e}); adding a small ridge", min / max);
        let p = g.nrows();
        for j in 0..p {
            g[(j, j)] += 1e-8 * max;
        }
    }
    g.cholesky()
        .map(|c| c.solve(rhs))
        .ok_or_else(|| Error::Singular("normal equations".into()))
}

/// Design with an intercept followed by the given columns.
pub fn with_intercept(n: usize, columns: &[&[f64]]) -> DMatrix<f64> {
    DMatrix::from_fn(n, columns.len() + 1, |i, j| if j == 0 { 1.0 } else { columns[j - 1][i] })
}

pub fn predict(design: &DMatrix<f64>, theta: &DVector<f64>) -> Vec<f64> {
    (design * theta).as_slice().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_and_scaling() {
        let x1: Vec<f64> = (0..50).map(|i| i as f64 * 1e3).collect();
        let x2: Vec<f64> = (0..50).map(|i| ((i * 7) % 11) as f64 * 1e-3).collect();
        let y: Vec<f64> = (0..50).map(|i| 2.0 - 3e-3 * x1[i] + 400.0 * x2[i]).collect();
        let d = with_intercept(50, &[&x1, &x2]);
        let t = ols(&d, &y).unwrap();
        assert!((t[0] - 2.0).abs() < 1e-8 && (t[1] + 3e-3).abs() < 1e-12 && (t[2] - 400.0).abs() < 1e-6);
    }

    #[test]
    fn collinear_falls_back() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let d = with_intercept(20, &[&x, &x]);
        let y: Vec<f64> = x.iter().map(|v| 1.0 + v).collect();
        let t = ols(&d, &y).unwrap();
        let fit = predict(&d, &t);
        assert!(fit.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn heavy_penalty_shrinks() {
        let x: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let d = with_intercept(30, &[&x]);
        let t = penalized_lstsq(&d, &y, &[0.0, 1e9]).unwrap();
        assert!(t[1].abs() < 1e-6);
    }
}
