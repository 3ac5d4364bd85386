//! On-disk environment and dataset bundles.
//!
//! Both are directories of CSV tables keyed by `node_id` plus JSON or TOML
//! documents. Floats are written in shortest round-trip form, so reading a
//! bundle and writing it again reproduces every file byte for byte.
//!
//! Environment bundle: `config.toml`, `env.json`, `diagnostics.json`,
//! `model.json`, `features.csv`, `outcome.csv`, `split.csv`,
//! `counterfactuals.csv`, `edges.csv`, optional `coords.csv`, and the
//! private column-name maps of derived datasets under `name_maps/`.
//!
//! Dataset bundle: `dataset.json`, `features.csv`, `outcome.csv`,
//! `counterfactuals.csv`, `edges.csv`, optional `coords.csv`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Once;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineResult, Hyperparams};
use crate::collection::{read_csv, write_csv, CovariateGroup};
use crate::dataset::{Estimand, NameMap, SpaceDataset, TREATMENT_NAME};
use crate::ensemble::ModelSummary;
use crate::env::{EnvConfig, GmrfRecord, ResidualDiagnostics, SpaceEnv, TreatmentGrid};
use crate::error::{Error, Result};
use crate::eval::CausalEstimates;
use crate::features::{ColumnRole, ColumnSpec, FeatureMatrix, TreatmentType};
use crate::graph::{NodeField, SpatialGraph};
use crate::split::{Role, TrainValSplit};

pub const BANNER: &str = "WARNING: this dataset is synthetic. Its outcomes and counterfactuals are \
generated by a model and must not be used to draw conclusions about the real world.";

static BANNER_ONCE: Once = Once::new();
static BANNER_COUNT: AtomicUsize = AtomicUsize::new(0);

fn show_banner() {
    BANNER_ONCE.call_once(|| {
        BANNER_COUNT.fetch_add(1, Ordering::SeqCst);
        eprintln!("{BANNER}");
    });
}

/// How many times the synthetic-data banner has been printed in this
/// process (0 or 1).
pub fn banner_count() -> usize {
    BANNER_COUNT.load(Ordering::SeqCst)
}

fn fmt(v: f64) -> String {
    v.to_string()
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(path, format!("'{s}' is not a finite number")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    write_text(path, &(text + "\n"))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::parse(path, e))
}

fn write_table(path: &Path, ids: &[String], names: &[String], cols: &[&[f64]]) -> Result<()> {
    let mut header = vec!["node_id".to_string()];
    header.extend(names.iter().cloned());
    let rows = ids.iter().enumerate().map(|(i, id)| {
        let mut r = vec![id.clone()];
        r.extend(cols.iter().map(|c| fmt(c[i])));
        r
    });
    write_csv(path, &header, rows)
}

/// Reads a numeric table whose rows must list `ids` in order.
fn read_table(path: &Path, ids: &[String]) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let (header, rows) = read_csv(path, true)?;
    if header.first().map(String::as_str) != Some("node_id") {
        return Err(Error::parse(path, "first column must be 'node_id'"));
    }
    if rows.len() != ids.len() {
        return Err(Error::Alignment(format!(
            "{} has {} rows for {} nodes",
            path.display(),
            rows.len(),
            ids.len()
        )));
    }
    let names = header[1..].to_vec();
    let mut cols = vec![Vec::with_capacity(rows.len()); names.len()];
    for (r, id) in rows.iter().zip(ids) {
        if &r[0] != id {
            return Err(Error::Alignment(format!("{}: expected node '{id}', found '{}'", path.display(), r[0])));
        }
        if r.len() != header.len() {
            return Err(Error::parse(path, format!("row for node '{id}' has {} fields", r.len())));
        }
        for (c, s) in cols.iter_mut().zip(&r[1..]) {
            c.push(parse_f64(path, s)?);
        }
    }
    Ok((names, cols))
}

fn write_graph(dir: &Path, graph: &SpatialGraph) -> Result<()> {
    let ids = graph.node_ids();
    let edges = graph
        .edges()
        .iter()
        .map(|&(a, b)| vec![ids[a as usize].clone(), ids[b as usize].clone()]);
    write_csv(&dir.join("edges.csv"), &["source".into(), "target".into()], edges)?;
    if let Some(coords) = graph.coords() {
        let rows = coords
            .iter()
            .enumerate()
            .map(|(i, c)| vec![ids[i].clone(), fmt(c[0]), fmt(c[1])]);
        write_csv(&dir.join("coords.csv"), &["node_id".into(), "x".into(), "y".into()], rows)?;
    }
    Ok(())
}

fn read_graph(dir: &Path, ids: Vec<String>) -> Result<SpatialGraph> {
    let edges_path = dir.join("edges.csv");
    let (_, rows) = read_csv(&edges_path, true)?;
    let mut edges = Vec::with_capacity(rows.len());
    for r in rows {
        if r.len() != 2 {
            return Err(Error::parse(&edges_path, "expected source,target"));
        }
        edges.push((r[0].clone(), r[1].clone()));
    }
    let coords_path = dir.join("coords.csv");
    let coords = if coords_path.exists() {
        let (_, xy) = read_table(&coords_path, &ids)?;
        if xy.len() != 2 {
            return Err(Error::parse(&coords_path, "expected node_id,x,y"));
        }
        Some(xy[0].iter().zip(&xy[1]).map(|(x, y)| [*x, *y]).collect())
    } else {
        None
    };
    SpatialGraph::build(ids, &edges, coords)
}

fn node_ids(path: &Path) -> Result<Vec<String>> {
    let (header, rows) = read_csv(path, true)?;
    if header.first().map(String::as_str) != Some("node_id") {
        return Err(Error::parse(path, "first column must be 'node_id'"));
    }
    Ok(rows.into_iter().map(|mut r| r.swap_remove(0)).collect())
}

fn cf_names(m: usize) -> Vec<String> {
    (0..m).map(|k| format!("cf_{k}")).collect()
}

fn write_counterfactuals(path: &Path, ids: &[String], cf: &DMatrix<f64>) -> Result<()> {
    let n = cf.nrows();
    let cols: Vec<&[f64]> = cf.as_slice().chunks(n.max(1)).collect();
    write_table(path, ids, &cf_names(cf.ncols()), &cols)
}

fn read_counterfactuals(path: &Path, ids: &[String], grid: &TreatmentGrid) -> Result<DMatrix<f64>> {
    let (names, cols) = read_table(path, ids)?;
    if names != cf_names(grid.len()) {
        return Err(Error::SchemaMismatch(format!(
            "{} must have one column per grid value ({})",
            path.display(),
            grid.len()
        )));
    }
    let n = ids.len();
    Ok(DMatrix::from_fn(n, cols.len(), |i, k| cols[k][i]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EnvMeta {
    groups: Vec<CovariateGroup>,
    schema: Vec<ColumnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    binary_levels: Option<[f64; 2]>,
    grid: TreatmentGrid,
    gmrf: GmrfRecord,
}

pub fn write_env(env: &SpaceEnv, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids = env.graph.node_ids();
    write_text(&dir.join("config.toml"), &env.config.to_toml())?;
    write_json(
        &dir.join("env.json"),
        &EnvMeta {
            groups: env.groups.clone(),
            schema: env.features.schema().to_vec(),
            binary_levels: env.binary_levels,
            grid: env.grid.clone(),
            gmrf: env.gmrf.clone(),
        },
    )?;
    write_json(&dir.join("diagnostics.json"), &env.diagnostics)?;
    write_json(&dir.join("model.json"), &env.model_summary)?;
    let names: Vec<String> = env.features.names().map(String::from).collect();
    let cols: Vec<&[f64]> = env.features.columns().iter().map(Vec::as_slice).collect();
    write_table(&dir.join("features.csv"), ids, &names, &cols)?;
    write_table(
        &dir.join("outcome.csv"),
        ids,
        &["synthetic_outcome".into(), "empirical_residual".into(), "residual".into()],
        &[&env.synthetic_outcome, &env.empirical_residuals, &env.residuals],
    )?;
    let roles = env.split.roles();
    let rows = ids.iter().zip(&roles).map(|(id, r)| vec![id.clone(), r.as_str().to_string()]);
    write_csv(&dir.join("split.csv"), &["node_id".into(), "role".into()], rows)?;
    write_counterfactuals(&dir.join("counterfactuals.csv"), ids, &env.counterfactuals)?;
    write_graph(dir, &env.graph)
}

fn read_split(path: &Path, ids: &[String]) -> Result<TrainValSplit> {
    let (_, rows) = read_csv(path, true)?;
    if rows.len() != ids.len() {
        return Err(Error::Alignment(format!("{} has {} rows for {} nodes", path.display(), rows.len(), ids.len())));
    }
    let mut split = TrainValSplit {
        train: Vec::new(),
        val: Vec::new(),
        buffer: Vec::new(),
    };
    for (i, (r, id)) in rows.iter().zip(ids).enumerate() {
        if r.len() != 2 || &r[0] != id {
            return Err(Error::Alignment(format!("{}: expected node '{id}'", path.display())));
        }
        let role: Role = serde_json::from_value(serde_json::Value::String(r[1].clone()))
            .map_err(|_| Error::parse(path, format!("unknown role '{}'", r[1])))?;
        match role {
            Role::Train => split.train.push(i),
            Role::Val => split.val.push(i),
            Role::Buffer => split.buffer.push(i),
        }
    }
    Ok(split)
}

pub fn read_env(dir: &Path) -> Result<SpaceEnv> {
    let config = EnvConfig::from_toml(&read_text(&dir.join("config.toml"))?)?;
    let meta: EnvMeta = read_json(&dir.join("env.json"))?;
    let diagnostics: ResidualDiagnostics = read_json(&dir.join("diagnostics.json"))?;
    let model_summary: ModelSummary = read_json(&dir.join("model.json"))?;
    let features_path = dir.join("features.csv");
    let ids = node_ids(&features_path)?;
    let (names, cols) = read_table(&features_path, &ids)?;
    let schema_names: Vec<&str> = meta.schema.iter().map(|s| s.name.as_str()).collect();
    if names != schema_names {
        return Err(Error::SchemaMismatch(format!("{} columns differ from env.json", features_path.display())));
    }
    let features = FeatureMatrix::new(meta.schema, cols)?;
    let (onames, mut ocols) = read_table(&dir.join("outcome.csv"), &ids)?;
    if onames != ["synthetic_outcome", "empirical_residual", "residual"] {
        return Err(Error::SchemaMismatch("outcome.csv has unexpected columns".into()));
    }
    let residuals = NodeField::new(ocols.pop().expect("three columns"))?;
    let empirical_residuals = NodeField::new(ocols.pop().expect("three columns"))?;
    let synthetic_outcome = NodeField::new(ocols.pop().expect("three columns"))?;
    let split = read_split(&dir.join("split.csv"), &ids)?;
    let counterfactuals = read_counterfactuals(&dir.join("counterfactuals.csv"), &ids, &meta.grid)?;
    let graph = read_graph(dir, ids)?;
    Ok(SpaceEnv {
        config,
        graph,
        groups: meta.groups,
        features,
        binary_levels: meta.binary_levels,
        grid: meta.grid,
        split,
        synthetic_outcome,
        counterfactuals,
        empirical_residuals,
        residuals,
        gmrf: meta.gmrf,
        diagnostics,
        model_summary,
    })
}

/// File name of a dataset's name map inside the env bundle.
pub fn name_map_file(masked_group_id: Option<&str>) -> String {
    format!("{}.json", masked_group_id.unwrap_or("unmasked"))
}

pub fn write_name_map(env_dir: &Path, map: &NameMap) -> Result<()> {
    let dir = env_dir.join("name_maps");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&dir.join(name_map_file(map.masked_group_id.as_deref())), map)
}

pub fn read_name_map(env_dir: &Path, masked_group_id: Option<&str>) -> Result<NameMap> {
    read_json(&env_dir.join("name_maps").join(name_map_file(masked_group_id)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetMeta {
    treatment_type: TreatmentType,
    grid: TreatmentGrid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    masked_group_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    smoothness_score: Option<f64>,
    #[serde(default)]
    confounding_scores: BTreeMap<Estimand, f64>,
}

pub fn write_dataset(dataset: &SpaceDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids = dataset.graph.node_ids();
    write_json(
        &dir.join("dataset.json"),
        &DatasetMeta {
            treatment_type: dataset.treatment_type,
            grid: dataset.grid.clone(),
            masked_group_id: dataset.masked_group_id.clone(),
            smoothness_score: dataset.smoothness_score,
            confounding_scores: dataset.confounding_scores.clone(),
        },
    )?;
    let mut names: Vec<String> = dataset.observed_covariates.names().map(String::from).collect();
    names.push(TREATMENT_NAME.into());
    let mut cols: Vec<&[f64]> = dataset.observed_covariates.columns().iter().map(Vec::as_slice).collect();
    cols.push(&dataset.treatment);
    write_table(&dir.join("features.csv"), ids, &names, &cols)?;
    write_table(
        &dir.join("outcome.csv"),
        ids,
        &["synthetic_outcome".into()],
        &[&dataset.synthetic_outcome],
    )?;
    write_counterfactuals(&dir.join("counterfactuals.csv"), ids, &dataset.counterfactuals)?;
    write_graph(dir, &dataset.graph)
}

/// Loads a dataset bundle. The first load in a process prints a warning
/// that the data are synthetic.
pub fn read_dataset(dir: &Path) -> Result<SpaceDataset> {
    let meta: DatasetMeta = read_json(&dir.join("dataset.json"))?;
    let features_path = dir.join("features.csv");
    let ids = node_ids(&features_path)?;
    let (mut names, mut cols) = read_table(&features_path, &ids)?;
    if names.last().map(String::as_str) != Some(TREATMENT_NAME) {
        return Err(Error::SchemaMismatch(format!(
            "last column of {} must be '{TREATMENT_NAME}'",
            features_path.display()
        )));
    }
    names.pop();
    let treatment = NodeField::new(cols.pop().expect("treatment column"))?;
    let schema = names
        .into_iter()
        .map(|name| ColumnSpec {
            name,
            role: ColumnRole::Covariate,
        })
        .collect();
    let observed_covariates = if cols.is_empty() {
        FeatureMatrix::new(Vec::new(), Vec::new())?
    } else {
        FeatureMatrix::new(schema, cols)?
    };
    let (_, mut ocols) = read_table(&dir.join("outcome.csv"), &ids)?;
    if ocols.len() != 1 {
        return Err(Error::SchemaMismatch("outcome.csv must have one outcome column".into()));
    }
    let synthetic_outcome = NodeField::new(ocols.pop().expect("one column"))?;
    let counterfactuals = read_counterfactuals(&dir.join("counterfactuals.csv"), &ids, &meta.grid)?;
    let graph = read_graph(dir, ids)?;
    show_banner();
    Ok(SpaceDataset {
        observed_covariates,
        treatment,
        synthetic_outcome,
        counterfactuals,
        grid: meta.grid,
        graph,
        treatment_type: meta.treatment_type,
        masked_group_id: meta.masked_group_id,
        smoothness_score: meta.smoothness_score,
        confounding_scores: meta.confounding_scores,
    })
}

/// Estimates of one method on one dataset: `estimates.json`, plus
/// `ite.csv` when unit-level counterfactuals were estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatesFile {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Hyperparams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub erf: Option<Vec<f64>>,
    #[serde(default)]
    pub diagnostics: BTreeMap<String, f64>,
    /// Effects of matched treated nodes, keyed by node id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_ite: Option<BTreeMap<String, f64>>,
}

pub fn write_estimates(dir: &Path, ids: &[String], result: &BaselineResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let est = &result.fit.estimates;
    let doc = EstimatesFile {
        method: result.method.to_string(),
        params: (result.params != Hyperparams::None).then_some(result.params),
        ate: est.ate,
        erf: est.erf.clone(),
        diagnostics: result.fit.diagnostics.clone(),
        matched_ite: result
            .fit
            .matched_ite
            .as_ref()
            .map(|m| m.iter().map(|(&i, &v)| (ids[i].clone(), v)).collect()),
    };
    write_json(&dir.join("estimates.json"), &doc)?;
    let ite_path = dir.join("ite.csv");
    match &est.ite {
        Some(ite) => write_counterfactuals(&ite_path, ids, ite),
        None if ite_path.exists() => fs::remove_file(&ite_path).map_err(|e| Error::io(&ite_path, e)),
        None => Ok(()),
    }
}

/// Reads estimates written by [`write_estimates`], checked against the
/// dataset they refer to.
pub fn read_estimates(dir: &Path, dataset: &SpaceDataset) -> Result<(EstimatesFile, CausalEstimates)> {
    let doc: EstimatesFile = read_json(&dir.join("estimates.json"))?;
    let ite_path = dir.join("ite.csv");
    let ite = if ite_path.exists() {
        Some(read_counterfactuals(&ite_path, dataset.graph.node_ids(), &dataset.grid)?)
    } else {
        None
    };
    let est = CausalEstimates {
        ate: doc.ate,
        erf: doc.erf.clone(),
        ite,
    };
    Ok((doc, est))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::toy_dataset;

    fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
            }
        }
        out
    }

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        let cf = DMatrix::from_fn(6, 3, |i, k| (i as f64).sin() * 1e-7 + k as f64 / 3.0);
        let mut d = toy_dataset(cf, TreatmentType::Continuous);
        d.observed_covariates = FeatureMatrix::new(
            vec![ColumnSpec {
                name: "x0".into(),
                role: ColumnRole::Covariate,
            }],
            vec![(0..6).map(|i| 1.0 / (i as f64 + 3.0)).collect()],
        )
        .unwrap();
        d.masked_group_id = Some("abc123".into());
        d.smoothness_score = Some(0.1 + 0.2);
        d.confounding_scores.insert(Estimand::Erf, 1.0 / 7.0);
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        write_dataset(&d, &a).unwrap();
        let back = read_dataset(&a).unwrap();
        assert_eq!(back, d);
        write_dataset(&back, &b).unwrap();
        assert_eq!(files(&a), files(&b));
        read_dataset(&b).unwrap();
        assert_eq!(banner_count(), 1);
    }

    #[test]
    fn env_round_trip_is_byte_identical() {
        use crate::collection::{demo_collection, DemoSpec};
        use crate::env::{generate_env, tests::demo_config};
        let coll = demo_collection(&DemoSpec {
            n_grid: 12,
            treatment_type: TreatmentType::Binary,
            ..DemoSpec::default()
        })
        .unwrap();
        let env = generate_env(&coll, &demo_config(TreatmentType::Binary, 4)).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        write_env(&env, &a).unwrap();
        let back = read_env(&a).unwrap();
        assert_eq!(back, env);
        write_env(&back, &b).unwrap();
        assert_eq!(files(&a), files(&b));

        let map = NameMap {
            masked_group_id: Some("00ff".into()),
            masked_group: Some("cov_0".into()),
            columns: vec![("x0".into(), "cov_1".into())],
        };
        write_name_map(&a, &map).unwrap();
        assert_eq!(read_name_map(&a, Some("00ff")).unwrap(), map);
    }

    #[test]
    fn misaligned_rows_are_rejected() {
        let d = toy_dataset(DMatrix::from_fn(6, 2, |i, k| (i + k) as f64), TreatmentType::Binary);
        let tmp = tempfile::tempdir().unwrap();
        write_dataset(&d, tmp.path()).unwrap();
        let path = tmp.path().join("outcome.csv");
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(1, 2);
        fs::write(&path, lines.join("\n")).unwrap();
        let err = read_dataset(tmp.path()).unwrap_err();
        assert!(matches!(err, Error::Alignment(_)), "{err}");
    }
}
