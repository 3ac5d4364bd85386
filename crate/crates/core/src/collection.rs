//! Data collections: a node table joined to a spatial graph.
//!
//! On disk a collection is a directory holding `nodes.csv` (a `node_id`
//! column plus numeric columns, blank cells missing), `edges.csv` (two node
//! id columns, header optional), an optional `coords.csv` (`node_id,x,y`)
//! and an optional `meta.json` with the covariate groups.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::TreatmentType;
use crate::gmrf::{match_scale, GmrfSampler};
use crate::graph::{Connectivity, SpatialGraph};
use crate::rng;
use crate::stats;

pub const MISSING_SUFFIX: &str = "__missing";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateGroup {
    pub name: String,
    pub columns: Vec<String>,
}

/// Generating parameters of a demo collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoTruth {
    pub treatment: String,
    pub outcome: String,
    pub confounder: String,
    pub treatment_type: TreatmentType,
    pub confounding_strength: f64,
    pub tau: f64,
    /// Outcome coefficient of each covariate, in column order.
    pub outcome_coefficients: Vec<f64>,
    /// Spatial parameter used to draw each covariate (`None` when the
    /// covariate is a deterministic function of the coordinates).
    pub covariate_rho: Vec<Option<f64>>,
    pub noise_rho: f64,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectionMeta {
    pub name: String,
    pub groups: Vec<CovariateGroup>,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<DemoTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedColumn {
    pub column: String,
    pub missing: usize,
    pub median: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub isolated_nodes: usize,
    pub has_coordinates: bool,
    pub imputed: Vec<ImputedColumn>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataCollection {
    pub meta: CollectionMeta,
    pub graph: SpatialGraph,
    /// Numeric columns aligned to the graph's node order.
    pub columns: Vec<(String, Vec<f64>)>,
}

impl DataCollection {
    pub fn new(meta: CollectionMeta, graph: SpatialGraph, columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (k, (name, col)) in columns.iter().enumerate() {
            if seen.insert(name.as_str(), k).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate column '{name}'")));
            }
            if col.len() != graph.n_nodes() {
                return Err(Error::Alignment(format!(
                    "column '{name}' has {} rows for {} nodes",
                    col.len(),
                    graph.n_nodes()
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("column '{name}'")));
            }
        }
        for g in &meta.groups {
            for c in &g.columns {
                if !seen.contains_key(c.as_str()) {
                    return Err(Error::InvalidConfig(format!(
                        "group '{}' names unknown column '{c}'",
                        g.name
                    )));
                }
            }
        }
        Ok(DataCollection { meta, graph, columns })
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.as_slice())
            .ok_or_else(|| Error::SchemaMismatch(format!("collection has no column '{name}'")))
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    /// Writes the collection in the directory layout read by [`ingest`].
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ids = self.graph.node_ids();

        let mut header = vec!["node_id".to_string()];
        header.extend(self.columns.iter().map(|(n, _)| n.clone()));
        let rows = (0..self.n_nodes()).map(|i| {
            let mut r = vec![ids[i].clone()];
            r.extend(self.columns.iter().map(|(_, c)| c[i].to_string()));
            r
        });
        write_csv(&dir.join("nodes.csv"), &header, rows)?;

        let edges = self
            .graph
            .edges()
            .iter()
            .map(|&(a, b)| vec![ids[a as usize].clone(), ids[b as usize].clone()]);
        write_csv(&dir.join("edges.csv"), &["source".into(), "target".into()], edges)?;

        if let Some(coords) = self.graph.coords() {
            let rows = coords
                .iter()
                .enumerate()
                .map(|(i, c)| vec![ids[i].clone(), c[0].to_string(), c[1].to_string()]);
            write_csv(&dir.join("coords.csv"), &["node_id".into(), "x".into(), "y".into()], rows)?;
        }
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        let path = dir.join("meta.json");
        fs::write(&path, meta + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub(crate) fn write_csv(
    path: &Path,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let fail = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_csv(path: &Path, has_header: bool) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
            _ => Error::parse(path, e.to_string()),
        })?;
    let header = if has_header {
        rdr.headers()
            .map_err(|e| Error::parse(path, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect()
    } else {
        Vec::new()
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn parse_num(path: &Path, s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(path, format!("{what}: '{s}' is not a finite number")))
}

/// Reads and validates a collection directory. Missing numeric cells are
/// replaced by the column median and flagged in a companion
/// `<column>__missing` indicator, which joins the column's group.
pub fn ingest(dir: &Path) -> Result<(DataCollection, AlignmentReport)> {
    let nodes_path = dir.join("nodes.csv");
    let (header, rows) = read_csv(&nodes_path, true)?;
    if header.first().map(String::as_str) != Some("node_id") {
        return Err(Error::parse(&nodes_path, "first column must be 'node_id'"));
    }
    let ids: Vec<String> = rows.iter().map(|r| r[0].clone()).collect();
    let n = ids.len();

    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    let mut report = AlignmentReport::default();
    let mut indicators: Vec<(String, String)> = Vec::new();
    for (j, name) in header.iter().enumerate().skip(1) {
        let mut vals = Vec::with_capacity(n);
        let mut missing = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            let cell = r.get(j).map(String::as_str).unwrap_or("");
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                missing.push(i);
                vals.push(f64::NAN);
            } else {
                vals.push(parse_num(&nodes_path, cell, &format!("row {}, column '{name}'", i + 1))?);
            }
        }
        if missing.is_empty() {
            columns.push((name.clone(), vals));
            continue;
        }
        let present: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
        if present.is_empty() {
            return Err(Error::parse(&nodes_path, format!("column '{name}' has no values")));
        }
        let med = stats::median(&present);
        let mut flag = vec![0.0; n];
        for &i in &missing {
            vals[i] = med;
            flag[i] = 1.0;
        }
        log::info!("imputed {} missing values in '{name}' with median {med}", missing.len());
        report.imputed.push(ImputedColumn {
            column: name.clone(),
            missing: missing.len(),
            median: med,
        });
        let ind = format!("{name}{MISSING_SUFFIX}");
        indicators.push((name.clone(), ind.clone()));
        columns.push((name.clone(), vals));
        columns.push((ind, flag));
    }

    let edges_path = dir.join("edges.csv");
    let (_, erows) = read_csv(&edges_path, false)?;
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut edges = Vec::with_capacity(erows.len());
    for (k, r) in erows.iter().enumerate() {
        if r.len() < 2 {
            return Err(Error::parse(&edges_path, format!("line {} needs two node ids", k + 1)));
        }
        let (a, b) = (r[0].as_str(), r[1].as_str());
        match (index.get(a), index.get(b)) {
            (Some(_), Some(_)) => edges.push((a.to_string(), b.to_string())),
            // a header line names no nodes
            _ if k == 0 && !index.contains_key(a) && !index.contains_key(b) => {}
            _ => {
                let orphan = if index.contains_key(a) { b } else { a };
                return Err(Error::Alignment(format!(
                    "node '{orphan}' appears in the edge list but not in the node table"
                )));
            }
        }
    }

    let coords_path = dir.join("coords.csv");
    let coords = if coords_path.exists() {
        let (_, crows) = read_csv(&coords_path, true)?;
        let mut c = vec![None; n];
        for r in &crows {
            if r.len() < 3 {
                return Err(Error::parse(&coords_path, "expected node_id,x,y"));
            }
            let i = *index.get(r[0].as_str()).ok_or_else(|| {
                Error::Alignment(format!("node '{}' has coordinates but no table row", r[0]))
            })?;
            c[i] = Some([parse_num(&coords_path, &r[1], "x")?, parse_num(&coords_path, &r[2], "y")?]);
        }
        let mut out = Vec::with_capacity(n);
        for (i, v) in c.into_iter().enumerate() {
            out.push(v.ok_or_else(|| Error::Alignment(format!("node '{}' has no coordinates", ids[i])))?);
        }
        Some(out)
    } else {
        None
    };

    let graph = SpatialGraph::build(ids, &edges, coords)?;
    let meta_path = dir.join("meta.json");
    let mut meta: CollectionMeta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e.to_string()))?
    } else {
        CollectionMeta::default()
    };
    if meta.name.is_empty() {
        meta.name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    for (col, ind) in indicators {
        for g in meta.groups.iter_mut() {
            if g.columns.contains(&col) && !g.columns.contains(&ind) {
                g.columns.push(ind.clone());
            }
        }
    }

    report.n_nodes = graph.n_nodes();
    report.n_edges = graph.n_edges();
    report.isolated_nodes = (0..graph.n_nodes()).filter(|&i| graph.is_isolated(i)).count();
    report.has_coordinates = graph.coords().is_some();
    let collection = DataCollection::new(meta, graph, columns)?;
    log::info!(
        "ingested '{}': {} nodes, {} edges, {} imputed columns",
        collection.meta.name,
        report.n_nodes,
        report.n_edges,
        report.imputed.len()
    );
    Ok((collection, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoSpec {
    pub n_grid: usize,
    pub n_covariates: usize,
    pub confounding_strength: f64,
    pub seed: u64,
    pub treatment_type: TreatmentType,
    pub tau: f64,
    /// Draw the confounder as a smooth deterministic surface over the
    /// coordinates instead of a random field.
    pub smooth_confounder: bool,
}

impl Default for DemoSpec {
    fn default() -> Self {
        DemoSpec {
            n_grid: 40,
            n_covariates: 5,
            confounding_strength: 1.0,
            seed: 0,
            treatment_type: TreatmentType::Continuous,
            tau: 1.0,
            smooth_confounder: false,
        }
    }
}

const DEMO_NOISE_RHO: f64 = 0.6;
const DEMO_NOISE_SD: f64 = 0.5;

fn standardize(mut v: Vec<f64>) -> Vec<f64> {
    let m = stats::mean(&v);
    let s = stats::std_dev(&v);
    v.iter_mut().for_each(|x| *x = (*x - m) / s);
    v
}

/// A synthetic collection on an `n_grid × n_grid` lattice over the unit
/// square.
///
/// Covariate `cov_0` is the confounder: it drives the treatment with
/// strength `confounding_strength` and enters the outcome with the same
/// coefficient. The other covariates are random fields of decreasing
/// smoothness that affect only the outcome; the last one (when there are at
/// least four) affects nothing. The outcome is
/// `tau * treatment + Σ β_j cov_j + noise`, with spatially correlated
/// noise.
pub fn demo_collection(spec: &DemoSpec) -> Result<DataCollection> {
    if spec.n_grid < 8 {
        return Err(Error::InvalidParameter(format!("n_grid must be at least 8, got {}", spec.n_grid)));
    }
    if spec.n_covariates == 0 {
        return Err(Error::InvalidParameter("demo needs at least one covariate".into()));
    }
    if !spec.confounding_strength.is_finite() || !spec.tau.is_finite() {
        return Err(Error::InvalidParameter("demo parameters must be finite".into()));
    }
    let g = spec.n_grid;
    let n = g * g;
    let lattice = SpatialGraph::grid(g, g, Connectivity::Rook);
    let coords: Vec<[f64; 2]> = lattice
        .coords()
        .expect("lattice has coordinates")
        .iter()
        .map(|c| [(c[0] + 0.5) / g as f64, (c[1] + 0.5) / g as f64])
        .collect();
    let graph = lattice.with_coords(coords.clone())?;

    let p = spec.n_covariates;
    let rhos: Vec<Option<f64>> = (0..p)
        .map(|j| match j {
            0 if spec.smooth_confounder => None,
            0 => Some(0.99),
            _ if p == 2 => Some(0.5),
            _ => Some(0.9 * (1.0 - (j - 1) as f64 / (p - 2) as f64)),
        })
        .collect();
    let mut covs = Vec::with_capacity(p);
    for (j, rho) in rhos.iter().enumerate() {
        let mut r = rng::stream(spec.seed, &format!("demo/cov_{j}"));
        let raw = match rho {
            Some(rho) => GmrfSampler::new(&graph, *rho)?.draw_unscaled(&mut r),
            None => {
                let (p1, p2): (f64, f64) = (r.random(), r.random());
                let tau = std::f64::consts::TAU;
                coords
                    .iter()
                    .map(|c| (tau * (c[0] + p1)).sin() + (tau * (c[1] + p2)).cos())
                    .collect()
            }
        };
        covs.push(standardize(raw));
    }

    let s = spec.confounding_strength;
    let mut r = rng::stream(spec.seed, "demo/treatment");
    let treatment: Vec<f64> = match spec.treatment_type {
        TreatmentType::Continuous => (0..n)
            .map(|i| s * covs[0][i] + r.sample::<f64, _>(StandardNormal))
            .collect(),
        TreatmentType::Binary => (0..n)
            .map(|i| {
                let logit = 1.5 * s * covs[0][i];
                let prob = 1.0 / (1.0 + (-logit).exp());
                if r.random::<f64>() < prob { 1.0 } else { 0.0 }
            })
            .collect(),
    };

    let coefs: Vec<f64> = (0..p)
        .map(|j| match j {
            0 => s,
            _ if p >= 4 && j == p - 1 => 0.0,
            _ => 0.6 * if j % 2 == 1 { 1.0 } else { -1.0 } / (1.0 + 0.5 * (j - 1) as f64),
        })
        .collect();
    let noise_raw = GmrfSampler::new(&graph, DEMO_NOISE_RHO)?
        .draw_unscaled(&mut rng::stream(spec.seed, "demo/noise"));
    let (noise, _) = match_scale(noise_raw, DEMO_NOISE_SD)?;
    let outcome: Vec<f64> = (0..n)
        .map(|i| spec.tau * treatment[i] + (0..p).map(|j| coefs[j] * covs[j][i]).sum::<f64>() + noise[i])
        .collect();

    let mut columns: Vec<(String, Vec<f64>)> = covs
        .into_iter()
        .enumerate()
        .map(|(j, c)| (format!("cov_{j}"), c))
        .collect();
    columns.push(("treatment".into(), treatment));
    columns.push(("outcome".into(), outcome));
    let meta = CollectionMeta {
        name: format!("demo_g{}_p{}_s{}", g, p, spec.seed),
        groups: (0..p)
            .map(|j| CovariateGroup {
                name: format!("cov_{j}"),
                columns: vec![format!("cov_{j}")],
            })
            .collect(),
        notes: vec!["synthetic demo collection; all values are simulated".into()],
        truth: Some(DemoTruth {
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            confounder: "cov_0".into(),
            treatment_type: spec.treatment_type,
            confounding_strength: s,
            tau: spec.tau,
            outcome_coefficients: coefs,
            covariate_rho: rhos,
            noise_rho: DEMO_NOISE_RHO,
            noise_sd: DEMO_NOISE_SD,
        }),
    };
    DataCollection::new(meta, graph, columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::morans_i;

    #[test]
    fn demo_is_reproducible_and_round_trips() {
        let spec = DemoSpec { n_grid: 12, seed: 4, ..DemoSpec::default() };
        let a = demo_collection(&spec).unwrap();
        assert_eq!(a, demo_collection(&spec).unwrap());
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let (b, report) = ingest(dir.path()).unwrap();
        assert_eq!(report.n_nodes, 144);
        assert_eq!(report.n_edges, 2 * 12 * 11);
        assert!(report.imputed.is_empty());
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.columns, b.columns);
        assert_eq!(a.graph, b.graph);
        let dir2 = tempfile::tempdir().unwrap();
        b.write(dir2.path()).unwrap();
        for f in ["nodes.csv", "edges.csv", "coords.csv", "meta.json"] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(dir2.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn demo_structure() {
        let c = demo_collection(&DemoSpec { n_grid: 30, ..DemoSpec::default() }).unwrap();
        let t = c.meta.truth.as_ref().unwrap();
        assert_eq!(t.outcome_coefficients[4], 0.0);
        let conf = c.column("cov_0").unwrap();
        assert!(morans_i(&c.graph, conf).unwrap() > 0.5);
        let a = c.column("treatment").unwrap();
        assert!(stats::pearson(conf, a).unwrap() > 0.5);
        let b = demo_collection(&DemoSpec {
            n_grid: 30,
            confounding_strength: 0.0,
            treatment_type: TreatmentType::Binary,
            ..DemoSpec::default()
        })
        .unwrap();
        let a = b.column("treatment").unwrap();
        assert!(a.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(stats::pearson(b.column("cov_0").unwrap(), a).unwrap().abs() < 0.1);
        assert!(demo_collection(&DemoSpec { n_grid: 7, ..DemoSpec::default() }).is_err());
    }

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn missing_cells_are_imputed_with_indicators() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let mut body = String::from("node_id,x,y,z\n");
        for i in 0..20 {
            let x = if i % 10 == 3 { String::new() } else { i.to_string() };
            let y = if i % 10 == 7 { "NA".to_string() } else { (2 * i).to_string() };
            body += &format!("n{i},{x},{y},1\n");
        }
        write(d, "nodes.csv", &body);
        let edges: String = (0..19).map(|i| format!("n{i},n{}\n", i + 1)).collect();
        write(d, "edges.csv", &edges);
        write(d, "meta.json", r#"{"groups":[{"name":"g","columns":["x","y"]}]}"#);
        let (c, report) = ingest(d).unwrap();
        assert_eq!(report.imputed.len(), 2);
        assert_eq!(c.columns.len(), 3 + 2);
        let x = c.column("x").unwrap();
        let med = stats::median(&(0..20).filter(|i| i % 10 != 3).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(x[3], med);
        assert_eq!(c.column("x__missing").unwrap()[13], 1.0);
        assert_eq!(c.column("y__missing").unwrap().iter().sum::<f64>(), 2.0);
        assert_eq!(c.meta.groups[0].columns, vec!["x", "y", "x__missing", "y__missing"]);
        assert_eq!(report.n_edges, 19);
    }

    #[test]
    fn orphan_nodes_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write(d, "nodes.csv", "node_id,x\na,1\nb,2\n");
        write(d, "edges.csv", "a,b\nb,ghost\n");
        let err = ingest(d).unwrap_err().to_string();
        assert!(err.contains("ghost"), "{err}");
        write(d, "edges.csv", "from,to\na,b\n");
        assert_eq!(ingest(d).unwrap().1.n_edges, 1);
        write(d, "nodes.csv", "node_id,x\na,1\nb,oops\n");
        assert!(matches!(ingest(d), Err(Error::Parse { .. })));
    }
}
