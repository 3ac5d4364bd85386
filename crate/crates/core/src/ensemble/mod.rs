//! Validation-weighted ensemble of ridge, boosted-tree and k-NN regressors.
//!
//! Every base model is fit on training rows only. Validation rows choose
//! each family's hyperparameters and the nonnegative blend weights.

mod knn;
mod nnls;
mod ridge;
mod trees;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::features::{ColumnSpec, FeatureMatrix};
use crate::graph::NodeField;
use crate::rng;
use crate::split::TrainValSplit;
use crate::stats;

pub use knn::KnnModel;
pub use nnls::nnls;
pub use ridge::RidgeModel;
pub use trees::{BoostingModel, BoostingParams};

pub const MIN_VALIDATION: usize = 10;

/// Per-column standardization from training rows.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Scaler {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Scaler {
    pub(crate) fn fit(features: &FeatureMatrix, rows: &[usize]) -> Self {
        let (mean, scale) = features
            .columns()
            .iter()
            .map(|c| {
                let v: Vec<f64> = rows.iter().map(|&i| c[i]).collect();
                let s = stats::std_dev(&v);
                (stats::mean(&v), if s > 0.0 { s } else { 1.0 })
            })
            .unzip();
        Scaler { mean, scale }
    }

    pub(crate) fn transform_row(&self, features: &FeatureMatrix, i: usize, out: &mut [f64]) {
        for (j, c) in features.columns().iter().enumerate() {
            out[j] = (c[i] - self.mean[j]) / self.scale[j];
        }
    }
}

/// Search grids for the three base families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSpec {
    pub ridge_penalties: Vec<f64>,
    pub tree_depths: Vec<usize>,
    pub tree_rounds: Vec<usize>,
    pub learning_rate: f64,
    pub subsample: f64,
    pub knn_k: Vec<usize>,
    /// Supplied by the caller, never read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            ridge_penalties: vec![1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2],
            tree_depths: vec![2, 3, 4],
            tree_rounds: vec![100, 300],
            learning_rate: 0.1,
            subsample: 0.8,
            knn_k: vec![5, 15, 50],
            seed: 0,
        }
    }
}

impl EnsembleSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("ensemble: {m}")));
        if self.ridge_penalties.is_empty() || self.ridge_penalties.iter().any(|&p| !(p > 0.0)) {
            return bad("ridge penalties must be nonempty and positive");
        }
        if self.tree_depths.is_empty() || self.tree_depths.contains(&0) {
            return bad("tree depths must be nonempty and positive");
        }
        if self.tree_rounds.is_empty() || self.tree_rounds.contains(&0) {
            return bad("tree rounds must be nonempty and positive");
        }
        if !(self.learning_rate > 0.0) || !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("learning rate must be positive and subsample in (0, 1]");
        }
        if self.knn_k.is_empty() || self.knn_k.contains(&0) {
            return bad("k must be nonempty and positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BaseSpec {
    Ridge { penalty: f64 },
    Boosting { depth: usize, rounds: usize, learning_rate: f64, subsample: f64 },
    Knn { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseModel {
    Ridge(RidgeModel),
    Boosting(BoostingModel),
    Knn(KnnModel),
}

impl BaseModel {
    pub fn predict(&self, features: &FeatureMatrix, rows: &[usize]) -> Vec<f64> {
        match self {
            BaseModel::Ridge(m) => m.predict(features, rows),
            BaseModel::Boosting(m) => m.predict(features, rows),
            BaseModel::Knn(m) => m.predict(features, rows),
        }
    }
}

/// Fits one base model on the `train` rows; other outcome entries are never
/// read.
pub fn fit_base(
    spec: &BaseSpec,
    features: &FeatureMatrix,
    outcome: &[f64],
    train: &[usize],
    seed: u64,
) -> BaseModel {
    match *spec {
        BaseSpec::Ridge { penalty } => BaseModel::Ridge(
            ridge::fit_path(features, outcome, train, &[penalty])
                .pop()
                .expect("one penalty"),
        ),
        BaseSpec::Boosting {
            depth,
            rounds,
            learning_rate,
            subsample,
        } => BaseModel::Boosting(trees::fit(
            features,
            outcome,
            train,
            BoostingParams {
                depth,
                rounds,
                learning_rate,
                subsample,
            },
            &mut rng::stream(seed, "ensemble"),
        )),
        BaseSpec::Knn { k } => BaseModel::Knn(knn::fit(features, outcome, train, k)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub spec: BaseSpec,
    pub validation_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSummary {
    pub chosen: BaseSpec,
    pub validation_mse: f64,
    pub weight: f64,
    pub grid: Vec<GridPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub bases: Vec<BaseSummary>,
    pub blend_validation_mse: f64,
    pub validation_outcome_variance: f64,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    schema: Vec<ColumnSpec>,
    specs: Vec<BaseSpec>,
    bases: Vec<BaseModel>,
    weights: Vec<f64>,
    summary: Option<ModelSummary>,
}

fn check_weights(weights: &[f64]) -> Result<()> {
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "blend weights must be nonnegative and sum to 1, got {weights:?}"
        )));
    }
    Ok(())
}

impl EnsembleModel {
    pub fn from_parts(
        schema: Vec<ColumnSpec>,
        bases: Vec<(BaseSpec, BaseModel)>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        check_len(bases.len(), weights.len())?;
        check_weights(&weights)?;
        let (specs, bases) = bases.into_iter().unzip();
        Ok(EnsembleModel {
            schema,
            specs,
            bases,
            weights,
            summary: None,
        })
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        check_len(self.bases.len(), weights.len())?;
        check_weights(&weights)?;
        Ok(EnsembleModel {
            weights,
            ..self.clone()
        })
    }

    pub fn schema(&self) -> &[ColumnSpec] {
        &self.schema
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn specs(&self) -> &[BaseSpec] {
        &self.specs
    }

    pub fn base_models(&self) -> &[BaseModel] {
        &self.bases
    }

    pub fn summary(&self) -> Option<&ModelSummary> {
        self.summary.as_ref()
    }

    /// Weighted sum of base predictions, after aligning `features` to the
    /// training schema.
    pub fn predict(&self, features: &FeatureMatrix) -> Result<NodeField> {
        let aligned = features.align_to(&self.schema)?;
        let rows: Vec<usize> = (0..aligned.n_rows()).collect();
        let mut out = vec![0.0; rows.len()];
        for (base, &w) in self.bases.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            for (o, p) in out.iter_mut().zip(base.predict(&aligned, &rows)) {
                *o += w * p;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble predictions".into()));
        }
        NodeField::new(out)
    }

    /// `outcome − predict(features)`.
    pub fn residuals(&self, features: &FeatureMatrix, outcome: &[f64]) -> Result<NodeField> {
        check_len(features.n_rows(), outcome.len())?;
        let p = self.predict(features)?;
        NodeField::new(outcome.iter().zip(p.iter()).map(|(y, f)| y - f).collect())
    }
}

fn mse(pred: &[f64], rows: &[usize], outcome: &[f64]) -> f64 {
    pred.iter()
        .zip(rows)
        .map(|(p, &i)| (outcome[i] - p).powi(2))
        .sum::<f64>()
        / rows.len() as f64
}

struct FamilyFit {
    model: BaseModel,
    chosen: BaseSpec,
    val_pred: Vec<f64>,
    val_mse: f64,
    grid: Vec<GridPoint>,
}

impl FamilyFit {
    fn pick(candidates: Vec<(BaseSpec, BaseModel, Vec<f64>)>, val: &[usize], outcome: &[f64]) -> Self {
        let grid: Vec<GridPoint> = candidates
            .iter()
            .map(|(spec, _, p)| GridPoint {
                spec: *spec,
                validation_mse: mse(p, val, outcome),
            })
            .collect();
        // first minimum wins, so ties resolve toward earlier grid points
        let best = (0..grid.len())
            .min_by(|&a, &b| grid[a].validation_mse.total_cmp(&grid[b].validation_mse).then(a.cmp(&b)))
            .expect("nonempty grid");
        let (chosen, model, val_pred) = candidates.into_iter().nth(best).expect("index in range");
        FamilyFit {
            model,
            chosen,
            val_pred,
            val_mse: grid[best].validation_mse,
            grid,
        }
    }
}

fn fit_ridge_family(f: &FeatureMatrix, y: &[f64], split: &TrainValSplit, spec: &EnsembleSpec) -> FamilyFit {
    let cands = ridge::fit_path(f, y, &split.train, &spec.ridge_penalties)
        .into_iter()
        .map(|m| {
            let p = m.predict(f, &split.val);
            (BaseSpec::Ridge { penalty: m.penalty() }, BaseModel::Ridge(m), p)
        })
        .collect();
    FamilyFit::pick(cands, &split.val, y)
}

fn fit_boosting_family(f: &FeatureMatrix, y: &[f64], split: &TrainValSplit, spec: &EnsembleSpec) -> FamilyFit {
    use rayon::prelude::*;
    let max_rounds = *spec.tree_rounds.iter().max().expect("validated");
    let per_depth: Vec<Vec<(BaseSpec, BaseModel, Vec<f64>)>> = spec
        .tree_depths
        .par_iter()
        .map(|&depth| {
            let params = BoostingParams {
                depth,
                rounds: max_rounds,
                learning_rate: spec.learning_rate,
                subsample: spec.subsample,
            };
            let full = trees::fit(f, y, &split.train, params, &mut rng::stream(spec.seed, "ensemble"));
            let staged = full.predict_staged(f, &split.val, &spec.tree_rounds);
            spec.tree_rounds
                .iter()
                .zip(staged)
                .map(|(&rounds, p)| {
                    let s = BaseSpec::Boosting {
                        depth,
                        rounds,
                        learning_rate: spec.learning_rate,
                        subsample: spec.subsample,
                    };
                    (s, BaseModel::Boosting(full.truncated(rounds)), p)
                })
                .collect()
        })
        .collect();
    FamilyFit::pick(per_depth.into_iter().flatten().collect(), &split.val, y)
}

fn fit_knn_family(f: &FeatureMatrix, y: &[f64], split: &TrainValSplit, spec: &EnsembleSpec) -> FamilyFit {
    let base = knn::fit(f, y, &split.train, 1);
    let preds = base.predict_multi(f, &split.val, &spec.knn_k);
    let cands = spec
        .knn_k
        .iter()
        .zip(preds)
        .map(|(&k, p)| {
            let m = base.with_k(k);
            (BaseSpec::Knn { k: m.k() }, BaseModel::Knn(m), p)
        })
        .collect();
    FamilyFit::pick(cands, &split.val, y)
}

/// Tunes each family on the validation rows, then blends the three chosen
/// models with nonnegative weights renormalized to sum to one.
pub fn fit_ensemble(
    features: &FeatureMatrix,
    outcome: &[f64],
    split: &TrainValSplit,
    spec: &EnsembleSpec,
) -> Result<EnsembleModel> {
    spec.validate()?;
    check_len(features.n_rows(), outcome.len())?;
    check_len(features.n_rows(), split.n_nodes())?;
    if outcome.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("outcome".into()));
    }
    if split.val.len() < MIN_VALIDATION {
        return Err(Error::InvalidParameter(format!(
            "validation set has {} nodes, need at least {MIN_VALIDATION}",
            split.val.len()
        )));
    }
    if stats::variance(outcome) <= 0.0 {
        return Err(Error::ZeroVariance("outcome"));
    }

    let ((ridge, boosting), knn) = rayon::join(
        || {
            rayon::join(
                || fit_ridge_family(features, outcome, split, spec),
                || fit_boosting_family(features, outcome, split, spec),
            )
        },
        || fit_knn_family(features, outcome, split, spec),
    );
    let fams = [ridge, boosting, knn];

    let nv = split.val.len();
    let a = DMatrix::from_fn(nv, fams.len(), |i, j| fams[j].val_pred[i]);
    let b = DVector::from_iterator(nv, split.val.iter().map(|&i| outcome[i]));
    let raw = nnls(&a, &b);
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        // nothing helps: fall back to the single best family
        let best = (0..fams.len())
            .min_by(|&x, &y| fams[x].val_mse.total_cmp(&fams[y].val_mse))
            .expect("three families");
        (0..fams.len()).map(|j| if j == best { 1.0 } else { 0.0 }).collect()
    };
    let blend: Vec<f64> = (0..nv)
        .map(|i| (0..fams.len()).map(|j| weights[j] * a[(i, j)]).sum())
        .collect();
    let val_y: Vec<f64> = b.iter().copied().collect();

    let summary = ModelSummary {
        bases: fams
            .iter()
            .zip(&weights)
            .map(|(f, &w)| BaseSummary {
                chosen: f.chosen,
                validation_mse: f.val_mse,
                weight: w,
                grid: f.grid.clone(),
            })
            .collect(),
        blend_validation_mse: mse(&blend, &split.val, outcome),
        validation_outcome_variance: stats::variance(&val_y),
        n_train: split.train.len(),
        n_val: nv,
    };
    log::debug!(
        "ensemble weights {:?}, validation mse {:.4e}",
        weights,
        summary.blend_validation_mse
    );
    let [r, g, k] = fams;
    Ok(EnsembleModel {
        schema: features.schema().to_vec(),
        specs: vec![r.chosen, g.chosen, k.chosen],
        bases: vec![r.model, g.model, k.model],
        weights,
        summary: Some(summary),
    })
}
