//! End-to-end runs: collection, environment, masked datasets, scores,
//! optional baselines and a flat error report.
//!
//! Outputs are staged in a hidden directory and moved into place only when
//! every stage succeeds. A failed run leaves its partial outputs under
//! `quarantine/<digest>/` together with an `error.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{run_baseline, EstimatorSpec};
use crate::bundle::{write_dataset, write_env, write_estimates, write_json, write_name_map};
use crate::collection::{demo_collection, ingest, write_csv, DataCollection, DemoSpec};
use crate::dataset::{classify_scores, make_dataset_with, make_unmasked_dataset, Estimand, ScoreBaseline, ScoreRecord};
use crate::env::{generate_env, EnvConfig, SpaceEnv};
use crate::error::{Error, Result};
use crate::eval::{eval_report, EvalReport};

pub const UNMASKED_ID: &str = "unmasked";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetPlan {
    /// Groups to mask, one dataset each; every configured group when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<String>>,
    /// Also emit a dataset with every covariate observed.
    pub unmasked: bool,
}

impl Default for DatasetPlan {
    fn default() -> Self {
        DatasetPlan {
            mask: None,
            unmasked: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Synthesize the collection instead of reading `env.data_collection`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo: Option<DemoSpec>,
    pub env: EnvConfig,
    #[serde(default)]
    pub datasets: DatasetPlan,
    #[serde(default)]
    pub baselines: Vec<EstimatorSpec>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Replaces the environment seed and, for demo runs, the collection
    /// seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.env.seed = seed;
        if let Some(d) = self.demo.as_mut() {
            d.seed = seed;
        }
        self
    }

    /// SHA-256 of the parsed config in canonical JSON form (sorted keys,
    /// defaults filled in), so formatting changes do not alter it.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn mask_list(&self, env: &SpaceEnv) -> Result<Vec<String>> {
        let all: Vec<String> = env.groups.iter().map(|g| g.name.clone()).collect();
        match &self.datasets.mask {
            None => Ok(all),
            Some(list) => {
                for g in list {
                    env.group(g)?;
                }
                let mut seen = std::collections::HashSet::new();
                if let Some(d) = list.iter().find(|g| !seen.insert(g.as_str())) {
                    return Err(Error::InvalidConfig(format!("group '{d}' is listed twice")));
                }
                Ok(list.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutputs {
    pub out_dir: PathBuf,
    pub manifest: PathBuf,
    pub env_dir: PathBuf,
    pub dataset_dirs: Vec<PathBuf>,
    pub report: PathBuf,
}

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub method: String,
    pub estimand: Estimand,
    pub metric: &'static str,
    pub error: f64,
}

pub fn report_rows(dataset: &str, method: &str, report: &EvalReport) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    let mut push = |estimand, metric, v: Option<f64>| {
        if let Some(error) = v {
            rows.push(ReportRow {
                dataset: dataset.to_string(),
                method: method.to_string(),
                estimand,
                metric,
                error,
            });
        }
    };
    push(Estimand::Ate, "bias", report.bias);
    push(Estimand::Erf, "rmise", report.rmise);
    push(Estimand::Ite, "pehe", report.pehe);
    rows
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let header = ["dataset", "method", "estimand", "metric", "error"].map(String::from);
    let rows = rows.iter().map(|r| {
        vec![
            r.dataset.clone(),
            r.method.clone(),
            r.estimand.as_str().to_string(),
            r.metric.to_string(),
            r.error.to_string(),
        ]
    });
    write_csv(path, &header, rows)
}

/// Writes score records with their dataset ids. Group names appear here, so
/// the file belongs with the environment, not with the datasets.
pub fn write_scores(path: &Path, records: &[(String, ScoreRecord)]) -> Result<()> {
    let header = [
        "dataset",
        "group",
        "smoothness",
        "confounding_ate",
        "confounding_erf",
        "confounding_ite",
        "smoothness_level",
        "confounding_level",
    ]
    .map(String::from);
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let level = |l: Option<crate::dataset::Level>| {
        l.map(|l| format!("{l:?}").to_lowercase()).unwrap_or_default()
    };
    let rows = records.iter().map(|(id, r)| {
        vec![
            id.clone(),
            r.group.clone(),
            r.smoothness.to_string(),
            opt(r.confounding.get(&Estimand::Ate).copied()),
            opt(r.confounding.get(&Estimand::Erf).copied()),
            opt(r.confounding.get(&Estimand::Ite).copied()),
            level(r.smoothness_level),
            level(r.confounding_level),
        ]
    });
    write_csv(path, &header, rows)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn load_collection(config: &PipelineConfig, base: &Path, stage_dir: &Path) -> Result<DataCollection> {
    match &config.demo {
        Some(spec) => {
            let coll = demo_collection(spec)?;
            coll.write(&stage_dir.join("collection"))?;
            Ok(coll)
        }
        None => {
            let (coll, report) = ingest(&base.join(&config.env.data_collection))?;
            write_json(&stage_dir.join("alignment.json"), &report)?;
            Ok(coll)
        }
    }
}

fn run_stages(config: &PipelineConfig, base: &Path, stage: &Path) -> Result<Vec<String>> {
    fs::write(stage.join("config.toml"), config.to_toml()).map_err(|e| Error::io(stage.join("config.toml"), e))?;
    let collection = load_collection(config, base, stage).map_err(|e| e.at_stage("ingest"))?;

    let env = generate_env(&collection, &config.env).map_err(|e| e.at_stage("generate_env"))?;
    let env_dir = stage.join("env");
    write_env(&env, &env_dir).map_err(|e| e.at_stage("generate_env"))?;

    let groups = config.mask_list(&env).map_err(|e| e.at_stage("make_dataset"))?;
    let baseline = ScoreBaseline::fit(&env).map_err(|e| e.at_stage("make_dataset"))?;
    let masked = groups
        .par_iter()
        .map(|g| make_dataset_with(&env, g, &baseline))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("make_dataset"))?;
    let mut datasets = Vec::new();
    let mut records = Vec::new();
    for m in masked {
        let id = m.dataset.masked_group_id.clone().expect("masked datasets carry a token");
        write_name_map(&env_dir, &m.names).map_err(|e| e.at_stage("make_dataset"))?;
        records.push((id.clone(), m.scores));
        datasets.push((id, m.dataset));
    }
    if config.datasets.unmasked {
        let (ds, names) = make_unmasked_dataset(&env).map_err(|e| e.at_stage("make_dataset"))?;
        write_name_map(&env_dir, &names).map_err(|e| e.at_stage("make_dataset"))?;
        datasets.push((UNMASKED_ID.to_string(), ds));
    }
    for (id, ds) in &datasets {
        write_dataset(ds, &stage.join("datasets").join(id)).map_err(|e| e.at_stage("make_dataset"))?;
    }

    let mut scored: Vec<ScoreRecord> = records.iter().map(|(_, r)| r.clone()).collect();
    classify_scores(&mut scored);
    for ((_, r), s) in records.iter_mut().zip(scored) {
        *r = s;
    }
    write_scores(&env_dir.join("scores.csv"), &records).map_err(|e| e.at_stage("scores"))?;

    let mut rows = Vec::new();
    for (id, ds) in &datasets {
        for spec in &config.baselines {
            if !spec.method.supports(ds.treatment_type) {
                log::info!("skipping {} on {id}: not applicable to {} treatments", spec.method, ds.treatment_type.as_str());
                continue;
            }
            let spec = EstimatorSpec {
                seed: config.env.seed,
                ..spec.clone()
            };
            let result = run_baseline(&spec, ds).map_err(|e| e.at_stage("baselines"))?;
            let report = eval_report(&result.fit.estimates, ds).map_err(|e| e.at_stage("baselines"))?;
            let dir = stage.join("estimates").join(id).join(spec.method.as_str());
            write_estimates(&dir, ds.graph.node_ids(), &result).map_err(|e| e.at_stage("baselines"))?;
            write_json(&dir.join("report.json"), &report).map_err(|e| e.at_stage("baselines"))?;
            rows.extend(report_rows(id, spec.method.as_str(), &report));
        }
    }
    write_report(&stage.join("report.csv"), &rows).map_err(|e| e.at_stage("report"))?;

    let mut outputs = vec!["config.toml".to_string(), "env".into(), "report.csv".into()];
    outputs.push(if config.demo.is_some() { "collection".into() } else { "alignment.json".into() });
    outputs.extend(datasets.iter().map(|(id, _)| format!("datasets/{id}")));
    if !config.baselines.is_empty() {
        outputs.push("estimates".into());
    }
    outputs.sort();
    Ok(outputs)
}

fn move_into(stage: &Path, out: &Path) -> Result<()> {
    for entry in fs::read_dir(stage).map_err(|e| Error::io(stage, e))? {
        let entry = entry.map_err(|e| Error::io(stage, e))?;
        let target = out.join(entry.file_name());
        if target.is_dir() {
            fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        } else if target.exists() {
            fs::remove_file(&target).map_err(|e| Error::io(&target, e))?;
        }
        fs::rename(entry.path(), &target).map_err(|e| Error::io(&target, e))?;
    }
    fs::remove_dir(stage).map_err(|e| Error::io(stage, e))
}

/// Runs every stage for a parsed config. `base` resolves a relative
/// collection path.
pub fn run_pipeline_config(config: &PipelineConfig, base: &Path, out: &Path, command: &str) -> Result<PipelineOutputs> {
    let started = unix_now();
    let digest = config.digest();
    let short = &digest[..12];
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stage = out.join(format!(".staging-{short}"));
    if stage.exists() {
        fs::remove_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;
    }
    fs::create_dir_all(&stage).map_err(|e| Error::io(&stage, e))?;

    let outputs = match run_stages(config, base, &stage) {
        Ok(o) => o,
        Err(err) => {
            let q = out.join("quarantine").join(short);
            let _ = fs::remove_dir_all(&q);
            if let Some(parent) = q.parent() {
                let _ = fs::create_dir_all(parent);
            }
            if fs::rename(&stage, &q).is_ok() {
                let _ = fs::write(q.join("error.txt"), format!("{err}\n"));
                log::error!("run failed; partial outputs quarantined in {}", q.display());
            }
            return Err(err);
        }
    };
    move_into(&stage, out).map_err(|e| e.at_stage("write"))?;

    let mut seeds = BTreeMap::from([("env".to_string(), config.env.seed)]);
    if let Some(d) = &config.demo {
        seeds.insert("demo".into(), d.seed);
    }
    let manifest = RunManifest {
        command: command.to_string(),
        config_digest: digest,
        seeds,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: unix_now(),
        outputs,
    };
    let manifest_path = out.join("manifest.json");
    write_json(&manifest_path, &manifest).map_err(|e| e.at_stage("write"))?;
    let dataset_dirs = manifest
        .outputs
        .iter()
        .filter(|o| o.starts_with("datasets/"))
        .map(|o| out.join(o))
        .collect();
    Ok(PipelineOutputs {
        out_dir: out.to_path_buf(),
        manifest: manifest_path,
        env_dir: out.join("env"),
        dataset_dirs,
        report: out.join("report.csv"),
    })
}

/// Reads a TOML pipeline config and runs it, writing into `out`.
pub fn run_pipeline(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<PipelineOutputs> {
    let text = fs::read_to_string(config_path).map_err(|e| Error::io(config_path, e).at_stage("config"))?;
    let mut config = PipelineConfig::from_toml(&text).map_err(|e| e.at_stage("config"))?;
    if let Some(s) = seed {
        config = config.with_seed(s);
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    run_pipeline_config(&config, base, out, &format!("run {}", config_path.display()))
}
