//! Seeded random search over estimator hyperparameters.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dapsm::{dapsm_tuning_inputs, matched_balance, DapsmParams, PenaltyType};
use super::splines::{spatial_predict, spatialplus_predict, SplineBasis};
use super::{EstimatorSpec, Inputs, Method};
use crate::dataset::SpaceDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::split::{spatial_split, SplitParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum Dist {
    Loguniform { low: f64, high: f64 },
    Uniform { low: f64, high: f64 },
    Fixed { value: f64 },
}

impl Dist {
    fn check(&self, name: &str) -> Result<()> {
        let ok = match *self {
            Dist::Loguniform { low, high } => low > 0.0 && low <= high && high.is_finite(),
            Dist::Uniform { low, high } => low <= high && low.is_finite() && high.is_finite(),
            Dist::Fixed { value } => value.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("empty or invalid search range for '{name}'")))
        }
    }

    fn sample<R: Rng + ?Sized>(&self, r: &mut R) -> f64 {
        match *self {
            Dist::Loguniform { low, high } => (low.ln() + r.random::<f64>() * (high.ln() - low.ln())).exp(),
            Dist::Uniform { low, high } => low + r.random::<f64>() * (high - low),
            Dist::Fixed { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub lam: Dist,
    pub lam_t: Dist,
    pub lam_y: Dist,
    pub ps_penalty_values: Vec<f64>,
    pub ps_penalty_types: Vec<PenaltyType>,
    pub spatial_weight: Dist,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let lam = Dist::Loguniform { low: 1e-5, high: 1.0 };
        SearchSpace {
            lam,
            lam_t: lam,
            lam_y: lam,
            ps_penalty_values: vec![0.001, 0.01, 0.1, 1.0],
            ps_penalty_types: vec![PenaltyType::L1, PenaltyType::L2],
            spatial_weight: Dist::Uniform { low: 0.0, high: 0.1 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Hyperparams {
    None,
    Spatial { lam: f64 },
    #[serde(rename = "spatialplus")]
    SpatialPlus { lam_t: f64, lam_y: f64 },
    Dapsm(DapsmParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub params: Hyperparams,
    /// Objective of the chosen configuration (validation MSE, or covariate
    /// balance for matching).
    pub score: Option<f64>,
    pub evaluated: Vec<(Hyperparams, f64)>,
}

fn candidates(spec: &EstimatorSpec) -> Result<Vec<Hyperparams>> {
    let s = &spec.space;
    let mut r = rng::stream(spec.seed, &format!("tune/{}", spec.method));
    let mut out: Vec<Hyperparams> = Vec::with_capacity(spec.budget);
    for _ in 0..spec.budget {
        let h = match spec.method {
            Method::Spatial => {
                s.lam.check("lam")?;
                Hyperparams::Spatial { lam: s.lam.sample(&mut r) }
            }
            Method::Spatialplus => {
                s.lam_t.check("lam_t")?;
                s.lam_y.check("lam_y")?;
                Hyperparams::SpatialPlus {
                    lam_t: s.lam_t.sample(&mut r),
                    lam_y: s.lam_y.sample(&mut r),
                }
            }
            Method::Dapsm => {
                if s.ps_penalty_values.is_empty() || s.ps_penalty_types.is_empty() {
                    return Err(Error::InvalidConfig("empty propensity penalty search space".into()));
                }
                s.spatial_weight.check("spatial_weight")?;
                Hyperparams::Dapsm(DapsmParams {
                    penalty: s.ps_penalty_values[r.random_range(0..s.ps_penalty_values.len())],
                    penalty_type: s.ps_penalty_types[r.random_range(0..s.ps_penalty_types.len())],
                    spatial_weight: s.spatial_weight.sample(&mut r),
                })
            }
            Method::Ols | Method::S2sls | Method::Gmerror => Hyperparams::None,
        };
        if !out.contains(&h) {
            out.push(h);
        }
    }
    Ok(out)
}

fn mse(pred: &[f64], y: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&i| (pred[i] - y[i]).powi(2)).sum::<f64>() / rows.len() as f64
}

/// Picks hyperparameters by random search. Outcome models are scored by
/// prediction error on a spatially buffered validation set; matching is
/// scored by covariate balance, without reading outcomes.
pub fn tune(spec: &EstimatorSpec, dataset: &SpaceDataset) -> Result<TuneOutcome> {
    if spec.budget == 0 {
        return Err(Error::InvalidConfig("tuning budget must be at least 1".into()));
    }
    if matches!(spec.method, Method::Ols | Method::S2sls | Method::Gmerror) {
        return Ok(TuneOutcome {
            params: Hyperparams::None,
            score: None,
            evaluated: Vec::new(),
        });
    }
    let cands = candidates(spec)?;
    let scores: Vec<f64> = match spec.method {
        Method::Spatial | Method::Spatialplus => {
            let inp = Inputs::new(dataset);
            let split = spatial_split(&dataset.graph, &SplitParams::with_seed(spec.seed))?;
            let basis = SplineBasis::for_dataset(dataset, spec.seed)?;
            cands
                .par_iter()
                .map(|h| {
                    let fit = match *h {
                        Hyperparams::Spatial { lam } => spatial_predict(&inp, &basis, &split.train, lam),
                        Hyperparams::SpatialPlus { lam_t, lam_y } => {
                            spatialplus_predict(&inp, &basis, &split.train, lam_t, lam_y)
                        }
                        _ => unreachable!(),
                    };
                    fit.map_or(f64::INFINITY, |(pred, _)| mse(&pred, inp.y, &split.val))
                })
                .collect()
        }
        Method::Dapsm => {
            let (x, a, coords) = dapsm_tuning_inputs(dataset)?;
            cands
                .par_iter()
                .map(|h| match h {
                    Hyperparams::Dapsm(p) => matched_balance(&x, a, coords, p, spec.matching, spec.caliper_quantile)
                        .unwrap_or(f64::INFINITY),
                    _ => unreachable!(),
                })
                .collect()
        }
        _ => unreachable!(),
    };
    let best = (0..cands.len())
        .min_by(|&i, &j| scores[i].total_cmp(&scores[j]))
        .expect("budget >= 1");
    if !scores[best].is_finite() {
        return Err(Error::Divergent(format!("every {} configuration failed", spec.method)));
    }
    Ok(TuneOutcome {
        params: cands[best],
        score: Some(scores[best]),
        evaluated: cands.into_iter().zip(scores).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::{lattice_dataset, normals};
    use super::super::{run_baseline, Matching};
    use super::*;
    use crate::features::TreatmentType;

    fn smooth_data(kind: TreatmentType) -> SpaceDataset {
        let g = 30;
        let n = g * g;
        let u: Vec<f64> = (0..n)
            .map(|i| ((i / g) as f64 / 5.0).sin() + ((i % g) as f64 / 6.0).cos())
            .collect();
        let x = normals(5, "x", n);
        let e = normals(5, "e", n);
        let a: Vec<f64> = match kind {
            TreatmentType::Continuous => (0..n).map(|i| u[i] + e[i]).collect(),
            TreatmentType::Binary => (0..n).map(|i| if u[i] + e[i] > 0.0 { 1.0 } else { 0.0 }).collect(),
        };
        let y: Vec<f64> = (0..n).map(|i| a[i] + x[i] + u[i] + 0.2 * e[(i * 7) % n]).collect();
        lattice_dataset(g, vec![x], a, y, 1.0, kind)
    }

    #[test]
    fn single_point_space() {
        let d = smooth_data(TreatmentType::Continuous);
        let mut spec = EstimatorSpec::new(Method::Spatial, 0);
        spec.space.lam = Dist::Fixed { value: 0.01 };
        let t = tune(&spec, &d).unwrap();
        assert_eq!(t.params, Hyperparams::Spatial { lam: 0.01 });
        assert_eq!(t.evaluated.len(), 1);
        spec.budget = 0;
        assert!(tune(&spec, &d).is_err());
        spec.budget = 3;
        spec.space.lam = Dist::Loguniform { low: 1.0, high: 0.1 };
        assert!(tune(&spec, &d).is_err());
    }

    #[test]
    fn tuned_beats_worst() {
        let d = smooth_data(TreatmentType::Continuous);
        let spec = EstimatorSpec::new(Method::Spatial, 1);
        let t = tune(&spec, &d).unwrap();
        let worst = t.evaluated.iter().map(|e| e.1).fold(f64::MIN, f64::max);
        assert!(t.score.unwrap() <= worst);
        assert!(t.evaluated.len() > 1);
        let again = tune(&spec, &d).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn dapsm_tuning_ignores_outcomes() {
        let d = smooth_data(TreatmentType::Binary);
        let mut shuffled = d.clone();
        shuffled.synthetic_outcome = crate::graph::NodeField::new(d.synthetic_outcome.iter().rev().copied().collect()).unwrap();
        let spec = EstimatorSpec {
            budget: 6,
            ..EstimatorSpec::new(Method::Dapsm, 2)
        };
        assert_eq!(tune(&spec, &d).unwrap(), tune(&spec, &shuffled).unwrap());
        assert_eq!(spec.matching, Matching::Greedy);
        let r = run_baseline(&spec, &d).unwrap();
        assert!(r.fit.estimates.ate.is_some());
        assert!(run_baseline(&spec, &smooth_data(TreatmentType::Continuous)).is_err());
    }

    #[test]
    fn spec_from_toml() {
        let spec: EstimatorSpec = toml::from_str(
            r#"
            method = "spatialplus"
            budget = 4
            [space.lam_t]
            dist = "fixed"
            value = 0.5
            "#,
        )
        .unwrap();
        assert_eq!(spec.method, Method::Spatialplus);
        assert_eq!(spec.space.lam_t, Dist::Fixed { value: 0.5 });
        assert_eq!(spec.space.lam_y, SearchSpace::default().lam_y);
    }
}
