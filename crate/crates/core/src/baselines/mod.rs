//! Reference estimators for spatial confounding, run against benchmark
//! datasets.
//!
//! Each estimator returns plug-in estimates of the effects it can address
//! plus a few fitted quantities (lag parameters, effect coefficients, match
//! counts) as diagnostics.

mod dapsm;
mod econ;
pub mod linear;
mod splines;
mod tune;
mod weights;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::SpaceDataset;
use crate::error::{Error, Result};
use crate::eval::{column_means, CausalEstimates};
use crate::features::TreatmentType;
use crate::graph::SpatialGraph;

pub use dapsm::{
    balance, dapsm_match, propensity_scores, run_dapsm, DapsmParams, Matching, MatchResult, PenaltyType,
};
pub use econ::{run_gmerror, run_gmerror_with, run_s2sls, GmErrorFit, S2slsFit};
pub use splines::{kmeans, run_spatial, run_spatialplus, SplineBasis};
pub use tune::{tune, Dist, Hyperparams, SearchSpace, TuneOutcome};
pub use weights::{LagSolver, WeightsMatrixView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ols,
    S2sls,
    Gmerror,
    Spatial,
    Spatialplus,
    Dapsm,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ols,
        Method::S2sls,
        Method::Gmerror,
        Method::Spatial,
        Method::Spatialplus,
        Method::Dapsm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ols => "ols",
            Method::S2sls => "s2sls",
            Method::Gmerror => "gmerror",
            Method::Spatial => "spatial",
            Method::Spatialplus => "spatialplus",
            Method::Dapsm => "dapsm",
        }
    }

    pub fn supports(self, kind: TreatmentType) -> bool {
        self != Method::Dapsm || kind == TreatmentType::Binary
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSpec {
    pub method: Method,
    pub space: SearchSpace,
    /// Number of sampled configurations.
    pub budget: usize,
    pub matching: Matching,
    /// DAPS quantile used as the matching caliper.
    pub caliper_quantile: f64,
    /// Supplied by the caller, never read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec {
            method: Method::Ols,
            space: SearchSpace::default(),
            budget: 16,
            matching: Matching::Greedy,
            caliper_quantile: 0.9,
            seed: 0,
        }
    }
}

impl EstimatorSpec {
    pub fn new(method: Method, seed: u64) -> Self {
        EstimatorSpec {
            method,
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFit {
    pub estimates: CausalEstimates,
    pub diagnostics: BTreeMap<String, f64>,
    /// Matched `(treated, control)` pairs, for matching estimators.
    pub pairs: Option<Vec<(usize, usize)>>,
    /// Outcome difference of each matched treated node, keyed by node.
    /// Unmatched nodes are absent.
    pub matched_ite: Option<BTreeMap<usize, f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub method: Method,
    pub params: Hyperparams,
    pub fit: BaselineFit,
    /// Every configuration tried with its tuning objective.
    pub tuning: Vec<(Hyperparams, f64)>,
}

/// Dataset columns in the shape the estimators use.
pub(crate) struct Inputs<'a> {
    pub x: Vec<&'a [f64]>,
    pub a: &'a [f64],
    pub y: &'a [f64],
    pub graph: &'a SpatialGraph,
    pub grid: &'a [f64],
    pub kind: TreatmentType,
}

impl<'a> Inputs<'a> {
    pub fn new(d: &'a SpaceDataset) -> Self {
        Inputs {
            x: d.observed_covariates.columns().iter().map(Vec::as_slice).collect(),
            a: &d.treatment,
            y: &d.synthetic_outcome,
            graph: &d.graph,
            grid: d.grid.values(),
            kind: d.treatment_type,
        }
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }
}

/// Estimates for `Y_s(a) = base_s + τ·a·dir_s` over the grid.
pub(crate) fn plug_in(base: &[f64], tau: f64, dir: Option<&[f64]>, grid: &[f64], kind: TreatmentType) -> CausalEstimates {
    let n = base.len();
    let ite = DMatrix::from_fn(n, grid.len(), |i, j| base[i] + tau * grid[j] * dir.map_or(1.0, |d| d[i]));
    let erf = column_means(&ite);
    let ate = (kind == TreatmentType::Binary && erf.len() == 2).then(|| erf[1] - erf[0]);
    CausalEstimates {
        ate,
        erf: Some(erf),
        ite: Some(ite),
    }
}

/// Ordinary least squares of the outcome on an intercept, the treatment and
/// the observed covariates.
pub fn run_ols(dataset: &SpaceDataset) -> Result<BaselineFit> {
    let inp = Inputs::new(dataset);
    let mut cols = vec![inp.a];
    cols.extend(&inp.x);
    let d = linear::with_intercept(inp.n(), &cols);
    let theta = linear::ols(&d, inp.y)?;
    let tau = theta[1];
    let fitted = linear::predict(&d, &theta);
    let base: Vec<f64> = fitted.iter().zip(inp.a).map(|(f, a)| f - tau * a).collect();
    Ok(BaselineFit {
        estimates: plug_in(&base, tau, None, inp.grid, inp.kind),
        diagnostics: [("tau".to_string(), tau)].into(),
        pairs: None,
        matched_ite: None,
    })
}

/// Tunes the method's hyperparameters (when it has any) and refits on all
/// nodes.
pub fn run_baseline(spec: &EstimatorSpec, dataset: &SpaceDataset) -> Result<BaselineResult> {
    if !spec.method.supports(dataset.treatment_type) {
        return Err(Error::InvalidParameter(format!(
            "{} is only applicable to binary treatments",
            spec.method
        )));
    }
    let outcome = tune(spec, dataset)?;
    let fit = match (&outcome.params, spec.method) {
        (Hyperparams::None, Method::Ols) => run_ols(dataset)?,
        (Hyperparams::None, Method::S2sls) => run_s2sls(dataset)?.fit,
        (Hyperparams::None, Method::Gmerror) => run_gmerror(dataset)?.fit,
        (Hyperparams::Spatial { lam }, Method::Spatial) => run_spatial(dataset, *lam, spec.seed)?,
        (Hyperparams::SpatialPlus { lam_t, lam_y }, Method::Spatialplus) => {
            run_spatialplus(dataset, *lam_t, *lam_y, spec.seed)?
        }
        (Hyperparams::Dapsm(p), Method::Dapsm) => run_dapsm(dataset, p, spec.matching, spec.caliper_quantile)?,
        (p, m) => unreachable!("tuner returned {p:?} for {m}"),
    };
    Ok(BaselineResult {
        method: spec.method,
        params: outcome.params,
        fit,
        tuning: outcome.evaluated,
    })
}
