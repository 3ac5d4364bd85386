//! Masked benchmark datasets derived from an environment.
//!
//! Masking removes one covariate group so that, if the group drives both
//! treatment and outcome, the remaining covariates no longer block
//! confounding. Each dataset carries two scores for its masked group: how
//! smooth it is in space and how much the causal estimates move when it is
//! hidden.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{counterfactual_predictions, SpaceEnv, TreatmentGrid};
use crate::error::{Error, Result};
use crate::eval::{self, column_means, CausalEstimates};
use crate::ensemble::{fit_ensemble, EnsembleModel, ModelSummary};
use crate::features::{FeatureMatrix, TreatmentType};
use crate::graph::{morans_i, NodeField, SpatialGraph};
use crate::rng;
use crate::stats;

pub const TREATMENT_NAME: &str = "A";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    Ate,
    Erf,
    Ite,
}

impl Estimand {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimand::Ate => "ate",
            Estimand::Erf => "erf",
            Estimand::Ite => "ite",
        }
    }

    pub fn applies_to(self, kind: TreatmentType) -> bool {
        self != Estimand::Ate || kind == TreatmentType::Binary
    }
}

impl std::str::FromStr for Estimand {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ate" => Ok(Estimand::Ate),
            "erf" => Ok(Estimand::Erf),
            "ite" => Ok(Estimand::Ite),
            _ => Err(Error::InvalidParameter(format!("unknown estimand '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceDataset {
    /// Remaining covariates under anonymized names.
    pub observed_covariates: FeatureMatrix,
    pub treatment: NodeField,
    pub synthetic_outcome: NodeField,
    pub counterfactuals: DMatrix<f64>,
    pub grid: TreatmentGrid,
    pub graph: SpatialGraph,
    pub treatment_type: TreatmentType,
    /// `None` for a dataset with every covariate observed.
    pub masked_group_id: Option<String>,
    pub smoothness_score: Option<f64>,
    pub confounding_scores: BTreeMap<Estimand, f64>,
}

impl SpaceDataset {
    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    /// Observed covariates followed by the treatment column.
    pub fn features(&self) -> FeatureMatrix {
        let covs = self
            .observed_covariates
            .names()
            .map(String::from)
            .zip(self.observed_covariates.columns().iter().cloned())
            .collect();
        FeatureMatrix::from_parts(covs, (TREATMENT_NAME.into(), self.treatment.to_vec()))
            .expect("dataset columns are consistent")
    }

    pub fn sigma_y(&self) -> Result<f64> {
        eval::sigma_y(&self.synthetic_outcome)
    }
}

/// Private map from anonymized column names back to the originals. Kept with
/// the environment, never with the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameMap {
    pub masked_group_id: Option<String>,
    pub masked_group: Option<String>,
    /// `(anonymized, original)` pairs in dataset column order.
    pub columns: Vec<(String, String)>,
}

impl NameMap {
    pub fn original(&self, anonymized: &str) -> Option<&str> {
        self.columns
            .iter()
            .find(|(a, _)| a == anonymized)
            .map(|(_, o)| o.as_str())
    }
}

/// Opaque identifier of a masked group, stable for a given seed.
pub fn masked_group_token(seed: u64, group: &str) -> String {
    rng::stream_key(seed, &format!("mask/{group}"))[..6]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// The fit with every covariate observed, shared by all groups of one
/// environment.
#[derive(Debug, Clone)]
pub struct ScoreBaseline {
    pub model: EnsembleModel,
    pub estimates: CausalEstimates,
}

impl ScoreBaseline {
    pub fn fit(env: &SpaceEnv) -> Result<Self> {
        let (model, estimates) = plug_in_fit(env, &env.features)?;
        Ok(ScoreBaseline { model, estimates })
    }

    pub fn summary(&self) -> Option<&ModelSummary> {
        self.model.summary()
    }
}

fn plug_in_fit(env: &SpaceEnv, features: &FeatureMatrix) -> Result<(EnsembleModel, CausalEstimates)> {
    let model = fit_ensemble(features, &env.synthetic_outcome, &env.split, &env.config.ensemble_spec())?;
    let ite = counterfactual_predictions(&model, features, &env.grid)?;
    let erf = column_means(&ite);
    let ate = (env.treatment_type() == TreatmentType::Binary).then(|| erf[1] - erf[0]);
    Ok((
        model,
        CausalEstimates {
            ate,
            erf: Some(erf),
            ite: Some(ite),
        },
    ))
}

fn discrepancy(full: &CausalEstimates, masked: &CausalEstimates, sigma: f64) -> BTreeMap<Estimand, f64> {
    let mut out = BTreeMap::new();
    if let (Some(a), Some(b)) = (full.ate, masked.ate) {
        out.insert(Estimand::Ate, eval::bias(b, a, sigma));
    }
    if let (Some(a), Some(b)) = (&full.erf, &masked.erf) {
        out.insert(Estimand::Erf, eval::rmise(b, a, sigma).expect("same grid"));
    }
    if let (Some(a), Some(b)) = (&full.ite, &masked.ite) {
        out.insert(Estimand::Ite, eval::pehe(b, a, sigma).expect("same shape"));
    }
    out
}

/// Confounding scores for hiding an arbitrary set of covariate columns, for
/// every estimand that applies to the treatment type. Also returns the
/// masked fit's summary.
pub fn confounding_scores_for_columns(
    env: &SpaceEnv,
    columns: &[&str],
    baseline: &ScoreBaseline,
) -> Result<(BTreeMap<Estimand, f64>, Option<ModelSummary>)> {
    let sigma = eval::sigma_y(&env.synthetic_outcome)?;
    if columns.is_empty() {
        let scores = discrepancy(&baseline.estimates, &baseline.estimates, sigma);
        return Ok((scores, baseline.summary().cloned()));
    }
    let masked = env.features.drop_columns(columns)?;
    if masked.covariate_indices().is_empty() {
        return Err(Error::InvalidParameter("masking would remove every covariate".into()));
    }
    let (model, estimates) = plug_in_fit(env, &masked)?;
    Ok((discrepancy(&baseline.estimates, &estimates, sigma), model.summary().cloned()))
}

/// Normalized change in the plug-in estimate of `estimand` when the group
/// is hidden from the outcome model.
pub fn confounding_score(env: &SpaceEnv, group: &str, estimand: Estimand) -> Result<f64> {
    if !estimand.applies_to(env.treatment_type()) {
        return Err(Error::InvalidParameter(format!(
            "estimand '{}' needs a binary treatment",
            estimand.as_str()
        )));
    }
    let g = env.group(group)?;
    let cols: Vec<&str> = g.columns.iter().map(String::as_str).collect();
    let baseline = ScoreBaseline::fit(env)?;
    let (scores, _) = confounding_scores_for_columns(env, &cols, &baseline)?;
    Ok(scores[&estimand])
}

/// Mean Moran's I over the group's columns, skipping constant ones.
pub fn smoothness_score(env: &SpaceEnv, group: &str) -> Result<f64> {
    let g = env.group(group)?;
    let mut values = Vec::with_capacity(g.columns.len());
    for c in &g.columns {
        match morans_i(&env.graph, env.features.column_by_name(c)?) {
            Ok(v) => values.push(v),
            Err(Error::ZeroVariance(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::ZeroVariance("every column of the group"));
    }
    Ok(stats::mean(&values))
}

fn anonymize(env: &SpaceEnv, covariates: &FeatureMatrix, stream_name: &str) -> Result<(FeatureMatrix, Vec<(String, String)>)> {
    let mut order: Vec<usize> = covariates.covariate_indices();
    order.shuffle(&mut rng::stream(env.config.seed, stream_name));
    let mut columns = Vec::with_capacity(order.len());
    let mut map = Vec::with_capacity(order.len());
    for (k, &j) in order.iter().enumerate() {
        let name = format!("X{}", k + 1);
        map.push((name.clone(), covariates.schema()[j].name.clone()));
        columns.push((name, covariates.column(j).to_vec()));
    }
    let schema = columns
        .iter()
        .map(|(n, _)| crate::features::ColumnSpec {
            name: n.clone(),
            role: crate::features::ColumnRole::Covariate,
        })
        .collect();
    let fm = FeatureMatrix::new(schema, columns.into_iter().map(|(_, c)| c).collect())?;
    Ok((fm, map))
}

fn assemble(
    env: &SpaceEnv,
    observed: FeatureMatrix,
    masked_group_id: Option<String>,
    smoothness_score: Option<f64>,
    confounding_scores: BTreeMap<Estimand, f64>,
) -> Result<SpaceDataset> {
    eval::sigma_y(&env.synthetic_outcome)?;
    Ok(SpaceDataset {
        observed_covariates: observed,
        treatment: NodeField::new(env.treatment().to_vec())?,
        synthetic_outcome: env.synthetic_outcome.clone(),
        counterfactuals: env.counterfactuals.clone(),
        grid: env.grid.clone(),
        graph: env.graph.clone(),
        treatment_type: env.treatment_type(),
        masked_group_id,
        smoothness_score,
        confounding_scores,
    })
}

#[derive(Debug, Clone)]
pub struct MaskedDataset {
    pub dataset: SpaceDataset,
    pub names: NameMap,
    pub scores: ScoreRecord,
    pub masked_summary: Option<ModelSummary>,
}

/// Hides `group`, anonymizes the rest and attaches both scores, reusing the
/// full-covariate fit in `baseline`.
pub fn make_dataset_with(env: &SpaceEnv, group: &str, baseline: &ScoreBaseline) -> Result<MaskedDataset> {
    let g = env.group(group)?.clone();
    let cols: Vec<&str> = g.columns.iter().map(String::as_str).collect();
    let covariates = env.features.drop_columns(&cols)?;
    if covariates.covariate_indices().is_empty() {
        return Err(Error::InvalidParameter(format!(
            "masking '{group}' would remove every covariate"
        )));
    }
    let (observed, map) = anonymize(env, &covariates, &format!("anonymize/{group}"))?;
    let smoothness = smoothness_score(env, group)?;
    let (confounding, masked_summary) = confounding_scores_for_columns(env, &cols, baseline)?;
    let token = masked_group_token(env.config.seed, group);
    let dataset = assemble(env, observed, Some(token.clone()), Some(smoothness), confounding.clone())?;
    Ok(MaskedDataset {
        dataset,
        names: NameMap {
            masked_group_id: Some(token),
            masked_group: Some(group.to_string()),
            columns: map,
        },
        scores: ScoreRecord {
            group: group.to_string(),
            smoothness,
            confounding,
            smoothness_level: None,
            confounding_level: None,
        },
        masked_summary,
    })
}

pub fn make_dataset(env: &SpaceEnv, group: &str) -> Result<MaskedDataset> {
    make_dataset_with(env, group, &ScoreBaseline::fit(env)?)
}

/// A dataset with every covariate observed (no confounding by design),
/// anonymized the same way as masked datasets.
pub fn make_unmasked_dataset(env: &SpaceEnv) -> Result<(SpaceDataset, NameMap)> {
    let covariates = env.features.drop_columns(&[])?;
    let (observed, map) = anonymize(env, &covariates, "anonymize/")?;
    let ds = assemble(env, observed, None, None, BTreeMap::new())?;
    Ok((
        ds,
        NameMap {
            masked_group_id: None,
            masked_group: None,
            columns: map,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub group: String,
    pub smoothness: f64,
    pub confounding: BTreeMap<Estimand, f64>,
    pub smoothness_level: Option<Level>,
    /// Based on the ERF score.
    pub confounding_level: Option<Level>,
}

/// Labels each record `high` when its score is above the median of its
/// siblings and `low` otherwise.
pub fn classify_scores(records: &mut [ScoreRecord]) {
    let level = |v: f64, m: f64| if v > m { Level::High } else { Level::Low };
    let smooth: Vec<f64> = records.iter().map(|r| r.smoothness).collect();
    let conf: Vec<f64> = records
        .iter()
        .filter_map(|r| r.confounding.get(&Estimand::Erf).copied())
        .collect();
    let ms = (!smooth.is_empty()).then(|| stats::median(&smooth));
    let mc = (!conf.is_empty()).then(|| stats::median(&conf));
    for r in records.iter_mut() {
        r.smoothness_level = ms.map(|m| level(r.smoothness, m));
        r.confounding_level = match (mc, r.confounding.get(&Estimand::Erf)) {
            (Some(m), Some(&v)) => Some(level(v, m)),
            _ => None,
        };
    }
}
