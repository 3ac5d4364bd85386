use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spatial-synth"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const ENV_TOML: &str = r#"
data_collection = "coll"
treatment = "treatment"
outcome = "outcome"
covariate_groups = ["cov_0", "cov_1", { rest = ["cov_2", "cov_3"] }]
treatment_type = "binary"
seed = 1
"#;

#[test]
fn stepwise_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["demo-collection", "--n-grid", "12", "--n-covariates", "4", "--binary", "--out", "coll"], d);
    assert!(d.join("coll/nodes.csv").exists());
    let report: serde_json::Value = serde_json::from_str(&ok(&["ingest", "coll"], d)).unwrap();
    assert_eq!(report["n_nodes"], 144);

    fs::write(d.join("env.toml"), ENV_TOML).unwrap();
    ok(&["train-env", "--config", "env.toml", "--out", "env"], d);
    ok(&["make-dataset", "--env", "env", "--group", "cov_0", "--out", "ds"], d);
    ok(&["make-dataset", "--env", "env", "--unmasked", "--out", "full"], d);
    assert_eq!(fs::read_dir(d.join("env/name_maps")).unwrap().count(), 2);
    let header = fs::read_to_string(d.join("ds/features.csv")).unwrap();
    assert!(!header.lines().next().unwrap().contains("cov_"), "column names must be anonymized");

    ok(&["score", "--env", "env", "--out", "scores.csv"], d);
    assert_eq!(fs::read_to_string(d.join("scores.csv")).unwrap().lines().count(), 4);

    ok(&["split", "ds", "--out", "split.csv", "--seed", "4"], d);
    assert_eq!(fs::read_to_string(d.join("split.csv")).unwrap().lines().count(), 145);

    let fitted = ok(&["baseline", "--method", "ols", "--dataset", "ds", "--out", "est"], d);
    let evaluated = ok(&["evaluate", "--dataset", "ds", "--estimates", "est"], d);
    assert_eq!(fitted, evaluated);
    let r: serde_json::Value = serde_json::from_str(&evaluated).unwrap();
    assert!(r["bias"].as_f64().unwrap() >= 0.0);

    ok(
        &["baseline", "--method", "dapsm", "--dataset", "ds", "--budget", "3", "--matching", "optimal", "--out", "est_dapsm"],
        d,
    );
    let est: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("est_dapsm/estimates.json")).unwrap()).unwrap();
    assert!(est["matched_ite"].as_object().is_some_and(|m| !m.is_empty()));
    assert!(est.get("erf").is_none());
}

#[test]
fn banner_printed_once_per_process() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["demo-collection", "--n-grid", "12", "--n-covariates", "3", "--binary", "--out", "coll"], d);
    fs::write(d.join("env.toml"), ENV_TOML.replace(r#"{ rest = ["cov_2", "cov_3"] }"#, r#""cov_2""#)).unwrap();
    ok(&["train-env", "--config", "env.toml", "--out", "env"], d);
    ok(&["make-dataset", "--env", "env", "--group", "cov_0", "--out", "ds"], d);
    ok(&["baseline", "--method", "ols", "--dataset", "ds", "--out", "est"], d);
    let out = run(&["evaluate", "--dataset", "ds", "--estimates", "est"], d);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.matches("synthetic").count(), 1, "{stderr}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(run(&["baseline", "--method", "nope", "--dataset", "x", "--out", "y"], d).status.code(), Some(2));
    assert_eq!(run(&["demo-collection", "--n-grid", "4", "--out", "c"], d).status.code(), Some(2));

    // A constant outcome has no variance to match.
    let coll = d.join("flat");
    fs::create_dir_all(&coll).unwrap();
    let mut nodes = String::from("node_id,x0,a,y\n");
    let mut edges = String::new();
    for i in 0..64 {
        nodes.push_str(&format!("n{i},{},{},1\n", (i * 7 % 11) as f64, (i * 3 % 5) as f64 / 4.0));
        if i % 8 != 7 {
            edges.push_str(&format!("n{i},n{}\n", i + 1));
        }
        if i < 56 {
            edges.push_str(&format!("n{i},n{}\n", i + 8));
        }
    }
    fs::write(coll.join("nodes.csv"), nodes).unwrap();
    fs::write(coll.join("edges.csv"), edges).unwrap();
    fs::write(
        d.join("flat.toml"),
        "data_collection = \"flat\"\ntreatment = \"a\"\noutcome = \"y\"\ncovariate_groups = [\"x0\"]\ntreatment_type = \"continuous\"\n",
    )
    .unwrap();
    let out = run(&["train-env", "--config", "flat.toml", "--out", "env"], d);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn pipeline_run_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("run.toml"),
        r#"
[demo]
n_grid = 12
n_covariates = 3

[env]
data_collection = "demo"
treatment = "treatment"
outcome = "outcome"
covariate_groups = ["cov_0", "cov_1", "cov_2"]
treatment_type = "continuous"

[datasets]
unmasked = true

[[baselines]]
method = "ols"

[[baselines]]
method = "spatial"
budget = 3
"#,
    )
    .unwrap();
    ok(&["run", "--config", "run.toml", "--seed", "9", "--out", "a"], d);
    ok(&["run", "--config", "run.toml", "--seed", "9", "--threads", "2", "--out", "b"], d);
    let (mut a, mut b) = (tree(&d.join("a")), tree(&d.join("b")));
    let (ma, mb) = (a.remove(Path::new("manifest.json")).unwrap(), b.remove(Path::new("manifest.json")).unwrap());
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{} differs", k.display());
    }
    let digest = |m: &[u8]| serde_json::from_slice::<serde_json::Value>(m).unwrap()["config_digest"].clone();
    assert_eq!(digest(&ma), digest(&mb));
    assert_eq!(fs::read_dir(d.join("a/datasets")).unwrap().count(), 4);

    ok(&["report", "a", "--out", "again.csv"], d);
    let rebuilt = fs::read_to_string(d.join("again.csv")).unwrap();
    let original = fs::read_to_string(d.join("a/report.csv")).unwrap();
    let sorted = |s: &str| {
        let mut l: Vec<String> = s.lines().map(String::from).collect();
        l.sort();
        l
    };
    assert_eq!(sorted(&rebuilt), sorted(&original));

    let changed = run(&["run", "--config", "run.toml", "--seed", "10", "--out", "c"], d);
    assert!(changed.status.success());
    assert_ne!(digest(&fs::read(d.join("c/manifest.json")).unwrap()), digest(&ma));
}
