//! Distance-adjusted propensity score matching.
//!
//! Treated units are matched to controls by a cost that blends propensity
//! score difference with standardized geographic distance, under a caliper.
//! The effect estimate is the mean outcome difference over matched pairs.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{BaselineFit, Inputs};
use crate::dataset::SpaceDataset;
use crate::error::{Error, Result};
use crate::eval::CausalEstimates;
use crate::features::TreatmentType;
use crate::stats;

const LOGISTIC_ITERATIONS: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyType {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matching {
    #[default]
    Greedy,
    Optimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DapsmParams {
    /// Strength of the propensity model penalty.
    pub penalty: f64,
    pub penalty_type: PenaltyType,
    /// Weight on standardized distance; the propensity difference gets the
    /// rest.
    pub spatial_weight: f64,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Penalized logistic regression of the binary treatment on standardized
/// covariates (intercept unpenalized), fitted by accelerated proximal
/// gradient. The objective is mean log-loss plus `penalty·‖β‖₁` or
/// `penalty·‖β‖²`.
pub fn propensity_scores(x: &[&[f64]], a: &[f64], penalty: f64, kind: PenaltyType) -> Result<Vec<f64>> {
    let n = a.len();
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::InvalidParameter(format!("propensity penalty must be nonnegative, got {penalty}")));
    }
    let cols: Vec<Vec<f64>> = x
        .iter()
        .map(|c| {
            let (m, s) = (stats::mean(c), stats::std_dev(c));
            c.iter().map(|v| if s > 0.0 { (v - m) / s } else { 0.0 }).collect()
        })
        .collect();
    let p = cols.len() + 1;
    let d = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { cols[j - 1][i] });
    let gram = d.tr_mul(&d) / n as f64;
    let lip = 0.25 * gram.symmetric_eigen().eigenvalues.max();
    let step = 1.0 / lip.max(1e-12);
    let av = DVector::from_column_slice(a);
    let grad = |b: &DVector<f64>| -> DVector<f64> {
        let mu = (&d * b).map(sigmoid);
        d.tr_mul(&(mu - &av)) / n as f64
    };
    let prox = |mut b: DVector<f64>| -> DVector<f64> {
        for j in 1..p {
            b[j] = match kind {
                PenaltyType::L1 => b[j].signum() * (b[j].abs() - step * penalty).max(0.0),
                PenaltyType::L2 => b[j] / (1.0 + 2.0 * step * penalty),
            };
        }
        b
    };
    let mut beta = DVector::zeros(p);
    let mut z = beta.clone();
    let mut t = 1.0f64;
    for _ in 0..LOGISTIC_ITERATIONS {
        let next = prox(&z - grad(&z) * step);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        z = &next + (&next - &beta) * ((t - 1.0) / t_next);
        let delta = (&next - &beta).amax();
        beta = next;
        t = t_next;
        if delta < 1e-10 {
            break;
        }
    }
    let scores: Vec<f64> = (&d * beta).map(sigmoid).iter().copied().collect();
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("propensity scores".into()));
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(treated, control)` node indices.
    pub pairs: Vec<(usize, usize)>,
    pub caliper: f64,
}

/// Minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`), by shortest augmenting paths with potentials.
fn assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m);
    let inf = f64::INFINITY;
    let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; m + 1]);
    let (mut p, mut way) = (vec![0usize; m + 1], vec![0usize; m + 1]);
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let (mut delta, mut j1) = (inf, 0);
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Matches treated to control nodes by
/// `(1 − w)·|p_i − p_j| + w·d̄_ij`, where `d̄` is min-max standardized
/// distance. The caliper is the `caliper_quantile` of each treated node's
/// best available cost; pairs above it are dropped.
pub fn dapsm_match(
    scores: &[f64],
    coords: &[[f64; 2]],
    a: &[f64],
    spatial_weight: f64,
    caliper_quantile: f64,
    matching: Matching,
) -> Result<MatchResult> {
    if !(0.0..=1.0).contains(&spatial_weight) || !(0.0..=1.0).contains(&caliper_quantile) {
        return Err(Error::InvalidParameter("spatial weight and caliper quantile must lie in [0, 1]".into()));
    }
    let treated: Vec<usize> = (0..a.len()).filter(|&i| a[i] == 1.0).collect();
    let control: Vec<usize> = (0..a.len()).filter(|&i| a[i] == 0.0).collect();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::NoMatches("one treatment arm is empty".into()));
    }
    let dist = DMatrix::from_fn(treated.len(), control.len(), |r, c| {
        let (p, q) = (coords[treated[r]], coords[control[c]]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    });
    let (dmin, dmax) = (dist.min(), dist.max());
    let span = if dmax > dmin { dmax - dmin } else { 1.0 };
    let cost = DMatrix::from_fn(treated.len(), control.len(), |r, c| {
        (1.0 - spatial_weight) * (scores[treated[r]] - scores[control[c]]).abs()
            + spatial_weight * (dist[(r, c)] - dmin) / span
    });
    let best: Vec<f64> = cost.row_iter().map(|r| r.min()).collect();
    let caliper = stats::quantile(&best, caliper_quantile);

    let mut pairs = match matching {
        Matching::Greedy => {
            let mut cand: Vec<(f64, usize, usize)> = Vec::new();
            for r in 0..treated.len() {
                for c in 0..control.len() {
                    if cost[(r, c)] <= caliper {
                        cand.push((cost[(r, c)], r, c));
                    }
                }
            }
            cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let (mut used_t, mut used_c) = (vec![false; treated.len()], vec![false; control.len()]);
            let mut out = Vec::new();
            for (_, r, c) in cand {
                if !used_t[r] && !used_c[c] {
                    used_t[r] = true;
                    used_c[c] = true;
                    out.push((treated[r], control[c]));
                }
            }
            out
        }
        Matching::Optimal => {
            // Over-caliper pairs get a prohibitive cost and are dropped after.
            let big = 1.0 + cost.max() * cost.len() as f64;
            let capped = cost.map(|v| if v <= caliper { v } else { big });
            let rc: Vec<(usize, usize)> = if treated.len() <= control.len() {
                assignment(&capped).into_iter().enumerate().collect()
            } else {
                assignment(&capped.transpose())
                    .into_iter()
                    .enumerate()
                    .map(|(c, r)| (r, c))
                    .collect()
            };
            rc.into_iter()
                .filter(|&(r, c)| cost[(r, c)] <= caliper)
                .map(|(r, c)| (treated[r], control[c]))
                .collect()
        }
    };
    pairs.sort_unstable();
    if pairs.is_empty() {
        return Err(Error::NoMatches("no pair falls under the caliper".into()));
    }
    Ok(MatchResult { pairs, caliper })
}

/// Mean absolute standardized mean difference of the covariates between
/// treated and control units, with standard deviations pooled over all
/// units of each arm. `pairs = None` measures the unmatched sample.
pub fn balance(x: &[&[f64]], a: &[f64], pairs: Option<&[(usize, usize)]>) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for col in x {
        let t: Vec<f64> = (0..a.len()).filter(|&i| a[i] == 1.0).map(|i| col[i]).collect();
        let c: Vec<f64> = (0..a.len()).filter(|&i| a[i] == 0.0).map(|i| col[i]).collect();
        let sd = ((stats::variance(&t) + stats::variance(&c)) / 2.0).sqrt();
        if !(sd > 0.0) {
            continue;
        }
        let diff = match pairs {
            None => stats::mean(&t) - stats::mean(&c),
            Some(p) => p.iter().map(|&(i, j)| col[i] - col[j]).sum::<f64>() / p.len() as f64,
        };
        total += diff.abs() / sd;
        count += 1;
    }
    if count == 0 { 0.0 } else { total / count as f64 }
}

fn coords_of(dataset: &SpaceDataset) -> Result<&[[f64; 2]]> {
    dataset
        .graph
        .coords()
        .ok_or_else(|| Error::InvalidParameter("matching needs node coordinates".into()))
}

fn check_binary(inp: &Inputs) -> Result<()> {
    if inp.kind != TreatmentType::Binary {
        return Err(Error::InvalidParameter("dapsm is only applicable to binary treatments".into()));
    }
    Ok(())
}

/// Balance after matching under `params`. Reads covariates, treatment and
/// coordinates only.
pub(crate) fn matched_balance(
    x: &[&[f64]],
    a: &[f64],
    coords: &[[f64; 2]],
    params: &DapsmParams,
    matching: Matching,
    caliper_quantile: f64,
) -> Result<f64> {
    let scores = propensity_scores(x, a, params.penalty, params.penalty_type)?;
    let m = dapsm_match(&scores, coords, a, params.spatial_weight, caliper_quantile, matching)?;
    Ok(balance(x, a, Some(&m.pairs)))
}

pub(crate) fn dapsm_tuning_inputs(dataset: &SpaceDataset) -> Result<(Vec<&[f64]>, &[f64], &[[f64; 2]])> {
    let inp = Inputs::new(dataset);
    check_binary(&inp)?;
    Ok((inp.x, inp.a, coords_of(dataset)?))
}

pub fn run_dapsm(
    dataset: &SpaceDataset,
    params: &DapsmParams,
    matching: Matching,
    caliper_quantile: f64,
) -> Result<BaselineFit> {
    let inp = Inputs::new(dataset);
    check_binary(&inp)?;
    let coords = coords_of(dataset)?;
    let scores = propensity_scores(&inp.x, inp.a, params.penalty, params.penalty_type)?;
    let m = dapsm_match(&scores, coords, inp.a, params.spatial_weight, caliper_quantile, matching)?;
    let matched_ite: BTreeMap<usize, f64> = m.pairs.iter().map(|&(t, c)| (t, inp.y[t] - inp.y[c])).collect();
    let ate = matched_ite.values().sum::<f64>() / matched_ite.len() as f64;
    let diagnostics = [
        ("n_pairs".to_string(), m.pairs.len() as f64),
        ("caliper".to_string(), m.caliper),
        ("balance_before".to_string(), balance(&inp.x, inp.a, None)),
        ("balance_after".to_string(), balance(&inp.x, inp.a, Some(&m.pairs))),
    ]
    .into();
    Ok(BaselineFit {
        estimates: CausalEstimates {
            ate: Some(ate),
            erf: None,
            ite: None,
        },
        diagnostics,
        pairs: Some(m.pairs),
        matched_ite: Some(matched_ite),
    })
}
