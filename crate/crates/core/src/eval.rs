//! Ground-truth effects and normalized error metrics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::SpaceDataset;
use crate::error::{check_len, Error, Result};
use crate::features::TreatmentType;
use crate::stats;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CausalEstimates {
    pub ate: Option<f64>,
    /// One value per grid level.
    pub erf: Option<Vec<f64>>,
    /// One row per node, one column per grid level.
    pub ite: Option<DMatrix<f64>>,
}

impl CausalEstimates {
    pub fn is_empty(&self) -> bool {
        self.ate.is_none() && self.erf.is_none() && self.ite.is_none()
    }

    /// Fills the aggregate estimates implied by an ITE matrix when they are
    /// missing.
    pub fn complete_from_ite(mut self, treatment_type: TreatmentType) -> Self {
        if let Some(ite) = &self.ite {
            if self.erf.is_none() {
                self.erf = Some(column_means(ite));
            }
            if self.ate.is_none() && treatment_type == TreatmentType::Binary && ite.ncols() == 2 {
                self.ate = Some(ate_of(ite));
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pehe: Option<f64>,
    pub sigma_y: f64,
}

pub fn column_means(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.mean()).collect()
}

fn ate_of(m: &DMatrix<f64>) -> f64 {
    stats::mean(&(0..m.nrows()).map(|i| m[(i, 1)] - m[(i, 0)]).collect::<Vec<_>>())
}

/// Mean over nodes of `Ỹ¹ − Ỹ⁰`.
pub fn true_ate(dataset: &SpaceDataset) -> Result<f64> {
    if dataset.treatment_type != TreatmentType::Binary || dataset.counterfactuals.ncols() != 2 {
        return Err(Error::InvalidParameter("the ATE is defined for binary treatments only".into()));
    }
    Ok(ate_of(&dataset.counterfactuals))
}

/// Mean counterfactual outcome at each grid level.
pub fn true_erf(dataset: &SpaceDataset) -> Vec<f64> {
    column_means(&dataset.counterfactuals)
}

pub fn sigma_y(outcome: &[f64]) -> Result<f64> {
    let s = stats::std_dev(outcome);
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::ZeroVariance("synthetic outcome"));
    }
    Ok(s)
}

pub fn bias(estimate: f64, truth: f64, sigma: f64) -> f64 {
    (estimate - truth).abs() / sigma
}

pub fn rmise(estimate: &[f64], truth: &[f64], sigma: f64) -> Result<f64> {
    check_len(truth.len(), estimate.len())?;
    let mse = estimate.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / truth.len() as f64;
    Ok(mse.sqrt() / sigma)
}

pub fn pehe(estimate: &DMatrix<f64>, truth: &DMatrix<f64>, sigma: f64) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::SchemaMismatch(format!(
            "ITE estimate is {:?}, counterfactuals are {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    let mse = (estimate - truth).norm_squared() / truth.len() as f64;
    Ok(mse.sqrt() / sigma)
}

/// Scores whichever estimates are present against the dataset's ground
/// truth, each normalized by the standard deviation of the synthetic
/// outcome.
pub fn eval_report(estimates: &CausalEstimates, dataset: &SpaceDataset) -> Result<EvalReport> {
    if estimates.is_empty() {
        return Err(Error::InvalidParameter("no estimates provided".into()));
    }
    let sigma = sigma_y(&dataset.synthetic_outcome)?;
    let bias = estimates
        .ate
        .map(|ate| {
            if !ate.is_finite() {
                return Err(Error::NonFinite("ATE estimate".into()));
            }
            Ok(bias(ate, true_ate(dataset)?, sigma))
        })
        .transpose()?;
    let rmise = estimates
        .erf
        .as_ref()
        .map(|erf| {
            if erf.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("ERF estimate".into()));
            }
            rmise(erf, &true_erf(dataset), sigma)
        })
        .transpose()?;
    let pehe = estimates
        .ite
        .as_ref()
        .map(|ite| {
            if ite.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("ITE estimate".into()));
            }
            pehe(ite, &dataset.counterfactuals, sigma)
        })
        .transpose()?;
    Ok(EvalReport {
        bias,
        rmise,
        pehe,
        sigma_y: sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::toy_dataset;
    use proptest::prelude::*;

    #[test]
    fn ground_truth_effects() {
        let d = toy_dataset(DMatrix::from_row_slice(3, 2, &[1.0, 3.0, 0.0, 2.0, 5.0, 7.0]), TreatmentType::Binary);
        assert_eq!(true_ate(&d).unwrap(), 2.0);
        let erf = true_erf(&d);
        assert_eq!(erf[1] - erf[0], true_ate(&d).unwrap());
        let c = toy_dataset(DMatrix::from_element(4, 3, 1.5), TreatmentType::Continuous);
        assert_eq!(true_erf(&c), vec![1.5; 3]);
        assert!(true_ate(&c).is_err());
    }

    #[test]
    fn oracle_estimates_score_zero() {
        let m = DMatrix::from_fn(6, 2, |i, j| (i * 3 + j * j) as f64 * 0.7 - 1.0);
        let d = toy_dataset(m.clone(), TreatmentType::Binary);
        let est = CausalEstimates {
            ate: Some(true_ate(&d).unwrap()),
            erf: Some(true_erf(&d)),
            ite: Some(m),
        };
        let r = eval_report(&est, &d).unwrap();
        assert_eq!((r.bias, r.rmise, r.pehe), (Some(0.0), Some(0.0), Some(0.0)));
        assert!(eval_report(&CausalEstimates::default(), &d).is_err());
        let wrong = CausalEstimates {
            ite: Some(DMatrix::zeros(6, 3)),
            ..Default::default()
        };
        assert!(matches!(eval_report(&wrong, &d), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn constant_offset() {
        let m = DMatrix::from_fn(10, 4, |i, j| ((i * 7 + j * 3) % 5) as f64);
        let d = toy_dataset(m, TreatmentType::Continuous);
        let c = -0.37;
        let erf: Vec<f64> = true_erf(&d).iter().map(|v| v + c).collect();
        let r = eval_report(&CausalEstimates { erf: Some(erf), ..Default::default() }, &d).unwrap();
        let sy = stats::std_dev(&d.synthetic_outcome);
        assert!((r.rmise.unwrap() - c.abs() / sy).abs() < 1e-12);
    }

    #[test]
    fn brute_force_toy() {
        // 5 nodes, 3 levels, hand-checked values.
        let truth = DMatrix::from_row_slice(5, 3, &[
            0.0, 1.0, 2.0, //
            1.0, 1.0, 1.0, //
            2.0, 0.0, -1.0, //
            0.5, 0.5, 3.0, //
            -1.0, 2.0, 0.0,
        ]);
        let est = DMatrix::from_row_slice(5, 3, &[
            0.5, 1.0, 2.0, //
            1.0, 0.0, 1.0, //
            2.0, 0.0, -1.0, //
            0.5, 1.5, 3.0, //
            -1.0, 2.0, 2.0,
        ]);
        let d = toy_dataset(truth, TreatmentType::Continuous);
        let sy = stats::std_dev(&d.synthetic_outcome);
        // squared errors: 0.25 + 1 + 1 + 4 = 6.25 over 15 cells
        let want_pehe = (6.25f64 / 15.0).sqrt() / sy;
        // column mean errors: 0.1, 0.0, 0.4
        let want_rmise = ((0.01f64 + 0.16) / 3.0).sqrt() / sy;
        let r = eval_report(
            &CausalEstimates {
                ite: Some(est.clone()),
                erf: Some(column_means(&est)),
                ate: None,
            },
            &d,
        )
        .unwrap();
        assert!((r.pehe.unwrap() - want_pehe).abs() < 1e-14);
        assert!((r.rmise.unwrap() - want_rmise).abs() < 1e-14);
    }

    fn matrix(n: usize, m: usize) -> impl Strategy<Value = DMatrix<f64>> {
        prop::collection::vec(-10.0f64..10.0, n * m).prop_map(move |v| DMatrix::from_vec(n, m, v))
    }

    proptest! {
        #[test]
        fn scale_invariance(truth in matrix(8, 2), est in matrix(8, 2), c in 0.01f64..100.0) {
            let d = toy_dataset(truth.clone(), TreatmentType::Binary);
            prop_assume!(stats::std_dev(&d.synthetic_outcome) > 1e-3);
            let e = CausalEstimates { ate: Some(est[(0, 0)]), erf: Some(column_means(&est)), ite: Some(est.clone()) };
            let r = eval_report(&e, &d).unwrap();
            let ds = toy_dataset(truth * c, TreatmentType::Binary);
            let es = CausalEstimates { ate: Some(est[(0, 0)] * c), erf: Some(column_means(&(&est * c))), ite: Some(est * c) };
            let rs = eval_report(&es, &ds).unwrap();
            prop_assert!((r.bias.unwrap() - rs.bias.unwrap()).abs() < 1e-9);
            prop_assert!((r.rmise.unwrap() - rs.rmise.unwrap()).abs() < 1e-9);
            prop_assert!((r.pehe.unwrap() - rs.pehe.unwrap()).abs() < 1e-9);
        }

        #[test]
        fn nonnegative_and_aggregation_consistent(truth in matrix(6, 3), est in matrix(6, 3)) {
            let d = toy_dataset(truth.clone(), TreatmentType::Continuous);
            prop_assume!(stats::std_dev(&d.synthetic_outcome) > 1e-3);
            let e = CausalEstimates { ite: Some(est), ..Default::default() };
            let r = eval_report(&e.complete_from_ite(TreatmentType::Continuous), &d).unwrap();
            prop_assert!(r.rmise.unwrap() >= 0.0 && r.pehe.unwrap() >= 0.0);
            let oracle = CausalEstimates { ite: Some(truth), ..Default::default() }.complete_from_ite(TreatmentType::Continuous);
            let r0 = eval_report(&oracle, &d).unwrap();
            prop_assert_eq!(r0.pehe, Some(0.0));
            prop_assert_eq!(r0.rmise, Some(0.0));
        }

        #[test]
        fn permutation_invariance(truth in matrix(5, 2), est in matrix(5, 2), k in 0usize..5) {
            let d = toy_dataset(truth.clone(), TreatmentType::Binary);
            prop_assume!(stats::std_dev(&d.synthetic_outcome) > 1e-3);
            let perm: Vec<usize> = (0..5).map(|i| (i + k) % 5).collect();
            let p = |m: &DMatrix<f64>| DMatrix::from_fn(5, 2, |i, j| m[(perm[i], j)]);
            let e = CausalEstimates { ite: Some(est.clone()), ..Default::default() }.complete_from_ite(TreatmentType::Binary);
            let ep = CausalEstimates { ite: Some(p(&est)), ..Default::default() }.complete_from_ite(TreatmentType::Binary);
            let r = eval_report(&e, &d).unwrap();
            let mut dp = d.clone();
            dp.counterfactuals = p(&truth);
            dp.synthetic_outcome = crate::graph::NodeField::new(perm.iter().map(|&i| d.synthetic_outcome[i]).collect()).unwrap();
            let rp = eval_report(&ep, &dp).unwrap();
            prop_assert!((r.pehe.unwrap() - rp.pehe.unwrap()).abs() < 1e-12);
            prop_assert!((r.rmise.unwrap() - rp.rmise.unwrap()).abs() < 1e-12);
            prop_assert!((r.bias.unwrap() - rp.bias.unwrap()).abs() < 1e-12);
        }
    }
}
