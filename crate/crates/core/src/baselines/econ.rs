//! Spatial lag (two-stage least squares) and spatial error (generalized
//! moments) regressions.

use nalgebra::{DMatrix, DVector};

use super::linear::{ols, predict, with_intercept};
use super::weights::WeightsMatrixView;
use super::{plug_in, BaselineFit, Inputs};
use crate::dataset::SpaceDataset;
use crate::error::{Error, Result};

const LAMBDA_BOUND: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct S2slsFit {
    pub fit: BaselineFit,
    pub rho: f64,
    pub tau: f64,
    /// Intercept, lag, treatment, then covariates.
    pub coefficients: Vec<f64>,
    pub n_instruments: usize,
    pub n_parameters: usize,
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

/// `Y = ρWY + τA + Xβ + c + ε` by two-stage least squares. Instruments are
/// the exogenous regressors and their first and second spatial lags.
/// Counterfactuals solve the equilibrium `Y(a) = (I − ρW)⁻¹(c + τa + Xβ)`.
pub fn run_s2sls(dataset: &SpaceDataset) -> Result<S2slsFit> {
    let inp = Inputs::new(dataset);
    let n = inp.n();
    let w = WeightsMatrixView::new(inp.graph);
    let mut exog: Vec<&[f64]> = vec![inp.a];
    exog.extend(&inp.x);

    if inp.graph.n_edges() == 0 {
        let d = with_intercept(n, &exog);
        let theta = ols(&d, inp.y)?;
        let tau = theta[1];
        let base: Vec<f64> = predict(&d, &theta).iter().zip(inp.a).map(|(f, a)| f - tau * a).collect();
        let mut coefficients = vec![theta[0], 0.0];
        coefficients.extend(theta.iter().skip(1));
        return Ok(S2slsFit {
            fit: BaselineFit {
                estimates: plug_in(&base, tau, None, inp.grid, inp.kind),
                diagnostics: [("rho".to_string(), 0.0), ("tau".to_string(), tau)].into(),
                pairs: None,
                matched_ite: None,
            },
            rho: 0.0,
            tau,
            coefficients,
            n_instruments: exog.len() + 1,
            n_parameters: exog.len() + 1,
        });
    }

    let exog_m = DMatrix::from_fn(n, exog.len(), |i, j| exog[j][i]);
    let lag1 = w.apply_columns(&exog_m);
    let lag2 = w.apply_columns(&lag1);
    let (l1, l2) = (columns(&lag1), columns(&lag2));
    let mut inst: Vec<&[f64]> = exog.clone();
    inst.extend(l1.iter().map(Vec::as_slice));
    inst.extend(l2.iter().map(Vec::as_slice));
    let h = with_intercept(n, &inst);

    let wy = w.apply(inp.y);
    let n_parameters = exog.len() + 2;
    if h.ncols() < n_parameters {
        return Err(Error::Singular(format!(
            "{} instruments for {n_parameters} parameters",
            h.ncols()
        )));
    }
    // First stage: only the lagged outcome is endogenous.
    let pi = ols(&h, &wy)?;
    let wy_hat = predict(&h, &pi);
    let mut reg: Vec<&[f64]> = vec![&wy_hat];
    reg.extend(&exog);
    let theta = ols(&with_intercept(n, &reg), inp.y)?;
    let (rho, tau) = (theta[1], theta[2]);
    if !(rho.abs() < 1.0) {
        return Err(Error::Divergent(format!("s2sls lag parameter {rho:.4} is outside (-1, 1)")));
    }

    let lin: Vec<f64> = (0..n)
        .map(|i| theta[0] + inp.x.iter().enumerate().map(|(j, x)| theta[3 + j] * x[i]).sum::<f64>())
        .collect();
    let solver = w.lag_solver(rho)?;
    let base = solver.solve(&lin);
    let dir = solver.solve(&vec![1.0; n]);
    Ok(S2slsFit {
        fit: BaselineFit {
            estimates: plug_in(&base, tau, Some(&dir), inp.grid, inp.kind),
            diagnostics: [("rho".to_string(), rho), ("tau".to_string(), tau)].into(),
            pairs: None,
            matched_ite: None,
        },
        rho,
        tau,
        coefficients: theta.iter().copied().collect(),
        n_instruments: h.ncols(),
        n_parameters,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmErrorFit {
    pub fit: BaselineFit,
    pub lambda: f64,
    pub tau: f64,
    /// Intercept, treatment, then covariates.
    pub coefficients: Vec<f64>,
}

/// Squared residual of the three moment conditions at `lambda`, with the
/// error variance profiled out.
fn moment_objective(g: &[f64; 3], gm: &[[f64; 3]; 3], lambda: f64) -> f64 {
    let v: Vec<f64> = (0..3).map(|r| g[r] - gm[r][0] * lambda - gm[r][1] * lambda * lambda).collect();
    let g3 = [gm[0][2], gm[1][2], gm[2][2]];
    let sigma2 = (v.iter().zip(&g3).map(|(a, b)| a * b).sum::<f64>() / g3.iter().map(|b| b * b).sum::<f64>()).max(0.0);
    v.iter().zip(&g3).map(|(a, b)| (a - b * sigma2).powi(2)).sum()
}

/// Error-lag parameter from OLS residuals via the three moment conditions
/// on `(u, Wu, W²u)`.
pub(crate) fn gm_lambda(w: &WeightsMatrixView, u: &[f64]) -> Result<f64> {
    let n = u.len() as f64;
    let ub = w.apply(u);
    let ubb = w.apply(&ub);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / n;
    let (uu, uub, ubub, ubbub, ubbubb, uubb) = (
        dot(u, u),
        dot(u, &ub),
        dot(&ub, &ub),
        dot(&ubb, &ub),
        dot(&ubb, &ubb),
        dot(u, &ubb),
    );
    if !(uu > 0.0) || !(ubub > 0.0) {
        return Err(Error::Singular("moment system: residuals have no spatial variation".into()));
    }
    let tr = w.trace_wtw() / n;
    let g = [uu, ubub, uub];
    let gm = [
        [2.0 * uub, -ubub, 1.0],
        [2.0 * ubbub, -ubbubb, tr],
        [uubb + ubub, -ubbub, 0.0],
    ];
    let f = |l: f64| moment_objective(&g, &gm, l);
    let steps = 198;
    let h = 2.0 * LAMBDA_BOUND / steps as f64;
    let best = (0..=steps)
        .map(|k| -LAMBDA_BOUND + h * k as f64)
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .expect("nonempty grid");
    // Golden-section refinement around the best grid point.
    let (mut lo, mut hi) = ((best - h).max(-LAMBDA_BOUND), (best + h).min(LAMBDA_BOUND));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let (m1, m2) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
        if f(m1) <= f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let lambda = 0.5 * (lo + hi);
    if !lambda.is_finite() {
        return Err(Error::Singular("moment system".into()));
    }
    Ok(lambda)
}

/// Spatial-error regression: OLS residuals give the error-lag parameter by
/// generalized moments, then feasible GLS on `(I − λW)`-filtered variables.
pub fn run_gmerror(dataset: &SpaceDataset) -> Result<GmErrorFit> {
    run_gmerror_with(dataset, None)
}

/// As [`run_gmerror`], optionally with the error-lag parameter fixed.
pub fn run_gmerror_with(dataset: &SpaceDataset, lambda: Option<f64>) -> Result<GmErrorFit> {
    let inp = Inputs::new(dataset);
    let n = inp.n();
    let w = WeightsMatrixView::new(inp.graph);
    let mut cols: Vec<&[f64]> = vec![inp.a];
    cols.extend(&inp.x);
    let d = with_intercept(n, &cols);
    let theta0 = ols(&d, inp.y)?;
    let lambda = match lambda {
        Some(l) => l,
        None if inp.graph.n_edges() == 0 => 0.0,
        None => {
            let fitted = predict(&d, &theta0);
            let u: Vec<f64> = inp.y.iter().zip(&fitted).map(|(y, f)| y - f).collect();
            gm_lambda(&w, &u)?
        }
    };
    let filter = |v: &[f64]| -> Vec<f64> { v.iter().zip(w.apply(v)).map(|(x, wx)| x - lambda * wx).collect() };
    let d_star = DMatrix::from_columns(
        &d.column_iter()
            .map(|c| DVector::from_vec(filter(c.as_slice())))
            .collect::<Vec<_>>(),
    );
    let theta = ols(&d_star, &filter(inp.y))?;
    let tau = theta[1];
    let base: Vec<f64> = predict(&d, &theta).iter().zip(inp.a).map(|(f, a)| f - tau * a).collect();
    Ok(GmErrorFit {
        fit: BaselineFit {
            estimates: plug_in(&base, tau, None, inp.grid, inp.kind),
            diagnostics: [("lambda_e".to_string(), lambda), ("tau".to_string(), tau)].into(),
            pairs: None,
            matched_ite: None,
        },
        lambda,
        tau,
        coefficients: theta.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::{lattice_dataset, normals};
    use super::*;
    use crate::features::TreatmentType;
    use crate::graph::{Connectivity, SpatialGraph};

    /// Lag-model data on a 30×30 grid: `y = (I − ρW)⁻¹(1 + τa + 0.5x + ε)`.
    pub(crate) fn lag_model(seed: u64, rho: f64, tau: f64) -> SpaceDataset {
        let g = 30;
        let n = g * g;
        let graph = SpatialGraph::grid(g, g, Connectivity::Rook);
        let x = normals(seed, "lag/x", n);
        let a = normals(seed, "lag/a", n);
        let e = normals(seed, "lag/e", n);
        let rhs: Vec<f64> = (0..n).map(|i| 1.0 + tau * a[i] + 0.5 * x[i] + e[i]).collect();
        let y = WeightsMatrixView::new(&graph).lag_solver(rho).unwrap().solve(&rhs);
        lattice_dataset(g, vec![x], a, y, tau, TreatmentType::Continuous)
    }

    /// Error-model data: `y = 1 + τa + 0.5x + (I − λW)⁻¹ε`.
    pub(crate) fn error_model(seed: u64, lambda: f64, tau: f64) -> SpaceDataset {
        let g = 30;
        let n = g * g;
        let graph = SpatialGraph::grid(g, g, Connectivity::Rook);
        let x = normals(seed, "err/x", n);
        let a = normals(seed, "err/a", n);
        let e = normals(seed, "err/e", n);
        let u = WeightsMatrixView::new(&graph).lag_solver(lambda).unwrap().solve(&e);
        let y: Vec<f64> = (0..n).map(|i| 1.0 + tau * a[i] + 0.5 * x[i] + u[i]).collect();
        lattice_dataset(g, vec![x], a, y, tau, TreatmentType::Continuous)
    }

    #[test]
    fn s2sls_recovers_lag_model() {
        let fits: Vec<S2slsFit> = (0..5).map(|s| run_s2sls(&lag_model(s, 0.5, 2.0)).unwrap()).collect();
        let rho = fits.iter().map(|f| f.rho).sum::<f64>() / 5.0;
        let tau = fits.iter().map(|f| f.tau).sum::<f64>() / 5.0;
        assert!((rho - 0.5).abs() < 0.1, "{rho}");
        assert!((tau - 2.0).abs() < 0.2, "{tau}");
        assert!(fits.iter().all(|f| f.n_instruments >= f.n_parameters));
    }

    #[test]
    fn s2sls_edgeless_is_ols() {
        let n = 50;
        let graph = SpatialGraph::from_index_edges(n, std::iter::empty(), None).unwrap();
        let x = normals(0, "x", n);
        let a = normals(0, "a", n);
        let y: Vec<f64> = (0..n).map(|i| a[i] * 1.5 + x[i] + 0.1 * (i as f64).sin()).collect();
        let mut d = lattice_dataset(5, vec![x.clone()], a.clone(), y.clone(), 1.5, TreatmentType::Continuous);
        d.graph = graph;
        d.counterfactuals = DMatrix::zeros(n, d.grid.len());
        let s = run_s2sls(&d).unwrap();
        let o = super::super::run_ols(&d).unwrap();
        assert_eq!(s.fit.estimates, o.estimates);
        assert_eq!(s.rho, 0.0);
    }

    #[test]
    fn gmerror_recovers_lambda() {
        let l: Vec<f64> = (0..5).map(|s| run_gmerror(&error_model(s, 0.6, 1.0)).unwrap().lambda).collect();
        for v in &l {
            assert!(*v > 0.4 && *v < 0.8, "{l:?}");
        }
    }

    #[test]
    fn gmerror_at_zero_matches_ols() {
        let d = error_model(3, 0.0, 1.0);
        let g = run_gmerror_with(&d, Some(0.0)).unwrap();
        let inp = Inputs::new(&d);
        let theta = ols(&with_intercept(inp.n(), &[inp.a, inp.x[0]]), inp.y).unwrap();
        for (a, b) in g.coefficients.iter().zip(theta.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn lag_plug_in_is_consistent() {
        let s = run_s2sls(&lag_model(0, 0.4, 1.0)).unwrap();
        let e = &s.fit.estimates;
        let means = crate::eval::column_means(e.ite.as_ref().unwrap());
        assert_eq!(&means, e.erf.as_ref().unwrap());
    }
}
