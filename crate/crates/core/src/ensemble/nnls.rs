//! Nonnegative least squares (Lawson and Hanson active-set method).

use nalgebra::{DMatrix, DVector};

/// Minimizes `‖A w − b‖` subject to `w ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let tol = 1e-12 * a.norm().max(1.0) * b.norm().max(1.0);
    let mut w = DVector::zeros(n);
    let mut passive = vec![false; n];
    for _ in 0..(3 * n + 10) {
        let grad = a.tr_mul(&(b - a * &w));
        let candidate = (0..n)
            .filter(|&j| !passive[j] && grad[j] > tol)
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            let s = solve_on(a, b, &passive);
            if (0..n).all(|i| !passive[i] || s[i] > 0.0) {
                w = s;
                break;
            }
            // step back toward the feasible region until a variable hits zero
            let mut alpha = 1.0f64;
            for i in 0..n {
                if passive[i] && s[i] <= 0.0 {
                    alpha = alpha.min(w[i] / (w[i] - s[i]));
                }
            }
            w += (s - &w) * alpha;
            for i in 0..n {
                if passive[i] && w[i] <= tol {
                    passive[i] = false;
                    w[i] = 0.0;
                }
            }
        }
    }
    w
}

/// Unconstrained least squares over the passive columns, zero elsewhere.
fn solve_on(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..a.ncols()).filter(|&j| passive[j]).collect();
    let sub = a.select_columns(&cols);
    let sol = sub
        .clone()
        .svd(true, true)
        .solve(b, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(cols.len()));
    let mut out = DVector::zeros(a.ncols());
    for (k, &j) in cols.iter().enumerate() {
        out[j] = sol[k];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Best feasible unconstrained solution over every column subset.
    fn brute(a: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
        let n = a.ncols();
        let mut best = b.norm_squared();
        for mask in 1u32..(1 << n) {
            let passive: Vec<bool> = (0..n).map(|j| mask >> j & 1 == 1).collect();
            let s = solve_on(a, b, &passive);
            if s.iter().all(|&v| v >= -1e-12) {
                best = best.min((a * s - b).norm_squared());
            }
        }
        best
    }

    #[test]
    fn exact_nonnegative_solution() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 3.0, 5.0]);
        let w = nnls(&a, &b);
        assert!((w[0] - 2.0).abs() < 1e-10 && (w[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn negative_direction_clamped() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let b = DVector::from_vec(vec![-1.0, -2.0]);
        assert_eq!(nnls(&a, &b)[0], 0.0);
    }

    proptest! {
        #[test]
        fn matches_subset_enumeration(
            cols in 1usize..5,
            data in prop::collection::vec(-3.0f64..3.0, 5 * 12 + 12),
        ) {
            let rows = 12;
            let a = DMatrix::from_fn(rows, cols, |i, j| data[i * 5 + j]);
            let b = DVector::from_fn(rows, |i, _| data[60 + i]);
            let w = nnls(&a, &b);
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            let got = (&a * &w - &b).norm_squared();
            let want = brute(&a, &b);
            prop_assert!(got <= want + 1e-8 * (1.0 + want), "{} vs {}", got, want);
        }
    }
}
