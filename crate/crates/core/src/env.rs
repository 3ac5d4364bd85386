//! Semi-synthetic environments: a fitted outcome model, exogenous spatial
//! residuals, and the full counterfactual surface.
//!
//! For every node `s` and treatment level `a` the counterfactual is
//! `Ỹ^a_s = f(X_s, a) + R_s`, where `f` is the ensemble fit to the observed
//! outcome and `R` is a Gaussian Markov random field draw whose spatial
//! autocorrelation and variance match the empirical residuals.

use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collection::{CovariateGroup, DataCollection};
use crate::ensemble::{fit_ensemble, EnsembleModel, EnsembleSpec, ModelSummary};
use crate::error::{check_len, Error, Result};
use crate::features::{FeatureMatrix, TreatmentType};
use crate::gmrf::{calibrate_rho, estimate_rho, sample_residual_field, CalibrationOptions};
use crate::graph::{morans_i, NodeField, SpatialGraph};
use crate::split::{spatial_split, SplitParams, TrainValSplit};
use crate::stats::{self, Histogram};

pub const CONTINUOUS_GRID_SIZE: usize = 100;
pub const HISTOGRAM_BINS: usize = 20;

/// A covariate group: a bare column name, or a single-key table naming a
/// list of columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroupEntry {
    Single(String),
    Named(BTreeMap<String, Vec<String>>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeTransform {
    #[default]
    None,
    Log1p,
}

impl OutcomeTransform {
    pub fn forward(self, y: f64) -> f64 {
        match self {
            OutcomeTransform::None => y,
            OutcomeTransform::Log1p => y.ln_1p(),
        }
    }

    pub fn inverse(self, y: f64) -> f64 {
        match self {
            OutcomeTransform::None => y,
            OutcomeTransform::Log1p => y.exp_m1(),
        }
    }
}

/// How the residual field's spatial parameter is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualRho {
    /// Solve for the precision parameter whose draws reproduce the Moran's I
    /// of the empirical residuals.
    #[default]
    Calibrated,
    /// Use the neighbour-mean correlation of the empirical residuals as is.
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub data_collection: String,
    pub treatment: String,
    pub outcome: String,
    pub covariate_groups: Vec<GroupEntry>,
    pub treatment_type: TreatmentType,
    #[serde(default)]
    pub outcome_transform: OutcomeTransform,
    /// Defaults to 100 for continuous and 2 for binary treatments.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub residual_rho: ResidualRho,
    #[serde(default)]
    pub split: SplitParams,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
}

impl EnvConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn groups(&self) -> Result<Vec<CovariateGroup>> {
        self.covariate_groups
            .iter()
            .map(|g| match g {
                GroupEntry::Single(c) => Ok(CovariateGroup {
                    name: c.clone(),
                    columns: vec![c.clone()],
                }),
                GroupEntry::Named(m) if m.len() == 1 => {
                    let (name, cols) = m.iter().next().expect("one entry");
                    Ok(CovariateGroup {
                        name: name.clone(),
                        columns: cols.clone(),
                    })
                }
                GroupEntry::Named(m) => Err(Error::InvalidConfig(format!(
                    "a named group must have exactly one key, got {:?}",
                    m.keys().collect::<Vec<_>>()
                ))),
            })
            .collect()
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size.unwrap_or(match self.treatment_type {
            TreatmentType::Binary => 2,
            TreatmentType::Continuous => CONTINUOUS_GRID_SIZE,
        })
    }

    pub fn split_params(&self) -> SplitParams {
        SplitParams {
            seed: self.seed,
            ..self.split
        }
    }

    pub fn ensemble_spec(&self) -> EnsembleSpec {
        EnsembleSpec {
            seed: self.seed,
            ..self.ensemble.clone()
        }
    }

    /// Checks the configuration against a collection's columns and returns
    /// the resolved groups.
    pub fn validate(&self, collection: &DataCollection) -> Result<Vec<CovariateGroup>> {
        let groups = self.groups()?;
        if groups.is_empty() {
            return Err(Error::InvalidConfig("at least one covariate group is required".into()));
        }
        if self.treatment == self.outcome {
            return Err(Error::InvalidConfig("treatment and outcome must differ".into()));
        }
        collection.column(&self.treatment)?;
        collection.column(&self.outcome)?;
        let mut names = HashSet::new();
        let mut cols = HashSet::new();
        for g in &groups {
            if !names.insert(g.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate group '{}'", g.name)));
            }
            if g.columns.is_empty() {
                return Err(Error::InvalidConfig(format!("group '{}' is empty", g.name)));
            }
            for c in &g.columns {
                collection.column(c)?;
                if c == &self.treatment || c == &self.outcome {
                    return Err(Error::InvalidConfig(format!(
                        "column '{c}' is both a covariate and the treatment or outcome"
                    )));
                }
                if !cols.insert(c.as_str()) {
                    return Err(Error::InvalidConfig(format!("column '{c}' is in more than one group")));
                }
            }
        }
        match self.treatment_type {
            TreatmentType::Binary if self.grid_size() != 2 => {
                return Err(Error::InvalidConfig("binary treatments use a grid of size 2".into()));
            }
            TreatmentType::Binary => {
                binary_levels(collection.column(&self.treatment)?)?;
            }
            TreatmentType::Continuous if self.grid_size() < 2 => {
                return Err(Error::InvalidConfig("grid size must be at least 2".into()));
            }
            _ => {}
        }
        if self.outcome_transform == OutcomeTransform::Log1p
            && collection.column(&self.outcome)?.iter().any(|&y| y <= -1.0)
        {
            return Err(Error::InvalidConfig("log1p transform needs outcomes above -1".into()));
        }
        Ok(groups)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TreatmentGrid {
    values: Vec<f64>,
}

impl TreatmentGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("grid values must be finite and nonempty".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("grid must be strictly increasing".into()));
        }
        Ok(TreatmentGrid { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the grid value closest to `a` (lower index on ties).
    pub fn nearest(&self, a: f64) -> usize {
        let k = self.values.partition_point(|&v| v < a);
        if k == 0 {
            0
        } else if k == self.values.len() || a - self.values[k - 1] <= self.values[k] - a {
            k - 1
        } else {
            k
        }
    }
}

/// The two observed levels of a binary treatment, low first.
pub fn binary_levels(treatment: &[f64]) -> Result<[f64; 2]> {
    let mut levels: Vec<f64> = treatment.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    match levels[..] {
        [lo, hi] => Ok([lo, hi]),
        _ => Err(Error::InvalidConfig(format!(
            "binary treatment must take exactly two values, found {}",
            levels.len()
        ))),
    }
}

/// Binary treatments get `[0, 1]`. Continuous treatments get `size` equally
/// spaced quantiles between the 1st and 99th percentiles, deduplicated; with
/// fewer than `size` distinct observed values the grid is those values.
pub fn make_treatment_grid(treatment: &[f64], kind: TreatmentType, size: usize) -> Result<TreatmentGrid> {
    if treatment.is_empty() {
        return Err(Error::InvalidParameter("empty treatment".into()));
    }
    match kind {
        TreatmentType::Binary => {
            binary_levels(treatment)?;
            TreatmentGrid::new(vec![0.0, 1.0])
        }
        TreatmentType::Continuous => {
            let mut sorted = treatment.to_vec();
            sorted.sort_by(f64::total_cmp);
            let mut distinct = sorted.clone();
            distinct.dedup();
            if distinct.len() < size {
                log::warn!(
                    "treatment has only {} distinct values; using them as the grid",
                    distinct.len()
                );
                return TreatmentGrid::new(distinct);
            }
            let mut values: Vec<f64> = (0..size)
                .map(|k| {
                    let q = 0.01 + 0.98 * k as f64 / (size - 1).max(1) as f64;
                    stats::quantile_sorted(&sorted, q)
                })
                .collect();
            values.dedup();
            TreatmentGrid::new(values)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmrfRecord {
    /// Neighbour-mean correlation of the empirical residuals.
    pub rho_hat: f64,
    /// Precision parameter used to draw the residual field.
    pub rho: f64,
    pub calibrated: bool,
    /// Realized variance scale of the draw.
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    pub moran_empirical: Option<f64>,
    pub moran_synthetic: Option<f64>,
    pub std_empirical: f64,
    pub std_synthetic: f64,
    pub histogram_empirical: Histogram,
    pub histogram_synthetic: Histogram,
    pub rho_hat: f64,
    pub rho: f64,
    /// Correlation between the synthetic residuals and the treatment.
    pub residual_treatment_correlation: Option<f64>,
    /// Largest distance from an observed treatment to its nearest grid value.
    pub grid_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceEnv {
    pub config: EnvConfig,
    pub graph: SpatialGraph,
    pub groups: Vec<CovariateGroup>,
    /// Covariates in group order, then the treatment (binary levels mapped
    /// to 0 and 1).
    pub features: FeatureMatrix,
    /// Original values of the binary levels mapped to 0 and 1.
    pub binary_levels: Option<[f64; 2]>,
    pub grid: TreatmentGrid,
    pub split: TrainValSplit,
    pub synthetic_outcome: NodeField,
    /// One row per node, one column per grid value.
    pub counterfactuals: DMatrix<f64>,
    /// Empirical residuals `Y − f(X, A)` on the transformed scale.
    pub empirical_residuals: NodeField,
    /// Synthetic residuals on the transformed scale.
    pub residuals: NodeField,
    pub gmrf: GmrfRecord,
    pub diagnostics: ResidualDiagnostics,
    pub model_summary: ModelSummary,
}

impl SpaceEnv {
    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn treatment(&self) -> &[f64] {
        self.features.treatment().expect("env features carry a treatment")
    }

    pub fn group(&self, name: &str) -> Result<&CovariateGroup> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown covariate group '{name}'")))
    }

    pub fn treatment_type(&self) -> TreatmentType {
        self.config.treatment_type
    }
}

/// Builds the model features: covariates in group order plus the treatment.
pub fn env_features(
    collection: &DataCollection,
    config: &EnvConfig,
    groups: &[CovariateGroup],
) -> Result<(FeatureMatrix, Option<[f64; 2]>)> {
    let covs = groups
        .iter()
        .flat_map(|g| g.columns.iter())
        .map(|c| Ok((c.clone(), collection.column(c)?.to_vec())))
        .collect::<Result<Vec<_>>>()?;
    let raw = collection.column(&config.treatment)?;
    let (treatment, levels) = match config.treatment_type {
        TreatmentType::Binary => {
            let lv = binary_levels(raw)?;
            (raw.iter().map(|&a| if a == lv[1] { 1.0 } else { 0.0 }).collect(), Some(lv))
        }
        TreatmentType::Continuous => (raw.to_vec(), None),
    };
    Ok((FeatureMatrix::from_parts(covs, (config.treatment.clone(), treatment))?, levels))
}

/// Plug-in prediction `f(X, a)` for every grid value, one column each.
pub fn counterfactual_predictions(
    model: &EnsembleModel,
    features: &FeatureMatrix,
    grid: &TreatmentGrid,
) -> Result<DMatrix<f64>> {
    let cols = grid
        .values()
        .par_iter()
        .map(|&a| model.predict(&features.with_treatment(a)?))
        .collect::<Result<Vec<NodeField>>>()?;
    Ok(DMatrix::from_fn(features.n_rows(), cols.len(), |i, j| cols[j][i]))
}

/// Fits the outcome model, replaces its residuals with a matched spatial
/// field, and evaluates the counterfactual surface on the treatment grid.
pub fn generate_env(collection: &DataCollection, config: &EnvConfig) -> Result<SpaceEnv> {
    let groups = config.validate(collection)?;
    let graph = collection.graph.clone();
    let (features, binary_levels) = env_features(collection, config, &groups)?;
    let transform = config.outcome_transform;
    let y: Vec<f64> = collection
        .column(&config.outcome)?
        .iter()
        .map(|&v| transform.forward(v))
        .collect();
    let grid = make_treatment_grid(
        features.treatment().expect("treatment present"),
        config.treatment_type,
        config.grid_size(),
    )?;

    let split = spatial_split(&graph, &config.split_params())?;
    let model = fit_ensemble(&features, &y, &split, &config.ensemble_spec())?;
    let fitted = model.predict(&features)?;
    let empirical = model.residuals(&features, &y)?;

    let rho_hat = estimate_rho(&graph, &empirical)?;
    let (rho, calibrated) = match config.residual_rho {
        ResidualRho::Estimated => (rho_hat, false),
        ResidualRho::Calibrated if graph.n_edges() == 0 => (0.0, false),
        ResidualRho::Calibrated => {
            let target = morans_i(&graph, &empirical)?;
            let opts = CalibrationOptions {
                seed: config.seed,
                ..CalibrationOptions::default()
            };
            (calibrate_rho(&graph, target, opts)?, true)
        }
    };
    let drawn = sample_residual_field(&graph, rho, &empirical, config.seed)?;
    let residuals = drawn.field;

    let base = counterfactual_predictions(&model, &features, &grid)?;
    let n = graph.n_nodes();
    let counterfactuals = DMatrix::from_fn(n, grid.len(), |i, j| transform.inverse(base[(i, j)] + residuals[i]));
    let synthetic = NodeField::new((0..n).map(|i| transform.inverse(fitted[i] + residuals[i])).collect())?;
    if counterfactuals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("counterfactual outcomes".into()));
    }

    let mut env = SpaceEnv {
        config: config.clone(),
        graph,
        groups,
        features,
        binary_levels,
        grid,
        split,
        synthetic_outcome: synthetic,
        counterfactuals,
        empirical_residuals: empirical,
        residuals,
        gmrf: GmrfRecord {
            rho_hat,
            rho,
            calibrated,
            lambda: drawn.lambda,
            seed: config.seed,
        },
        diagnostics: placeholder_diagnostics(),
        model_summary: model.summary().cloned().expect("fitted ensembles carry a summary"),
    };
    env.diagnostics = residual_diagnostics(&env)?;
    log::info!(
        "environment: rho_hat {:.3}, rho {:.3}, Moran empirical {:?} synthetic {:?}",
        rho_hat,
        rho,
        env.diagnostics.moran_empirical,
        env.diagnostics.moran_synthetic
    );
    Ok(env)
}

fn placeholder_diagnostics() -> ResidualDiagnostics {
    ResidualDiagnostics {
        moran_empirical: None,
        moran_synthetic: None,
        std_empirical: 0.0,
        std_synthetic: 0.0,
        histogram_empirical: stats::histogram(&[], 0.0, 1.0, 1),
        histogram_synthetic: stats::histogram(&[], 0.0, 1.0, 1),
        rho_hat: 0.0,
        rho: 0.0,
        residual_treatment_correlation: None,
        grid_gap: 0.0,
    }
}

/// Compares the empirical and synthetic residual fields.
pub fn residual_diagnostics(env: &SpaceEnv) -> Result<ResidualDiagnostics> {
    let (emp, syn) = (&env.empirical_residuals, &env.residuals);
    check_len(env.n_nodes(), emp.len())?;
    check_len(env.n_nodes(), syn.len())?;
    let moran = |x: &[f64]| {
        if env.graph.n_edges() == 0 {
            None
        } else {
            morans_i(&env.graph, x).ok()
        }
    };
    let lo = emp.iter().chain(syn.iter()).copied().fold(f64::INFINITY, f64::min);
    let hi = emp.iter().chain(syn.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
    let treatment = env.treatment();
    let grid_gap = treatment
        .iter()
        .map(|&a| (a - env.grid.values()[env.grid.nearest(a)]).abs())
        .fold(0.0, f64::max);
    Ok(ResidualDiagnostics {
        moran_empirical: moran(emp),
        moran_synthetic: moran(syn),
        std_empirical: stats::std_dev(emp),
        std_synthetic: stats::std_dev(syn),
        histogram_empirical: stats::histogram(emp, lo, hi, HISTOGRAM_BINS),
        histogram_synthetic: stats::histogram(syn, lo, hi, HISTOGRAM_BINS),
        rho_hat: env.gmrf.rho_hat,
        rho: env.gmrf.rho,
        residual_treatment_correlation: stats::pearson(syn, treatment),
        grid_gap,
    })
}
