use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use spatial_synth::baselines::{run_baseline, EstimatorSpec, Matching, Method};
use spatial_synth::bundle::{
    read_dataset, read_env, read_estimates, write_dataset, write_estimates, write_name_map,
};
use spatial_synth::collection::{demo_collection, ingest, DemoSpec};
use spatial_synth::dataset::{classify_scores, make_dataset_with, make_unmasked_dataset, ScoreBaseline};
use spatial_synth::env::{generate_env, EnvConfig};
use spatial_synth::eval::{eval_report, EvalReport};
use spatial_synth::features::TreatmentType;
use spatial_synth::graph::SpatialGraph;
use spatial_synth::pipeline::{report_rows, run_pipeline, write_report, write_scores};
use spatial_synth::split::{spatial_split, SplitParams};
use spatial_synth::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "spatial-synth", version, about = "Semi-synthetic spatial causal inference benchmarks")]
struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MatchingArg {
    Greedy,
    Optimal,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a collection directory, impute missing cells and report
    /// alignment. With --out, writes the cleaned collection there.
    Ingest { dir: PathBuf },
    /// Synthesize a lattice collection with known generating parameters.
    DemoCollection {
        #[arg(long, default_value_t = 40)]
        n_grid: usize,
        #[arg(long, default_value_t = 5)]
        n_covariates: usize,
        #[arg(long, default_value_t = 1.0)]
        confounding_strength: f64,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        binary: bool,
        /// Make the confounder a smooth surface over the coordinates.
        #[arg(long)]
        smooth_confounder: bool,
    },
    /// Generate an environment bundle from a TOML config.
    TrainEnv {
        #[arg(long)]
        config: PathBuf,
        /// Collection directory; defaults to `data_collection` relative to
        /// the config file.
        #[arg(long)]
        collection: Option<PathBuf>,
    },
    /// Derive a masked dataset bundle from an environment bundle.
    MakeDataset {
        #[arg(long)]
        env: PathBuf,
        #[arg(long, required_unless_present = "unmasked")]
        group: Option<String>,
        /// Keep every covariate instead of masking a group.
        #[arg(long, conflicts_with = "group")]
        unmasked: bool,
    },
    /// Smoothness and confounding scores of covariate groups, as CSV.
    Score {
        #[arg(long)]
        env: PathBuf,
        /// Groups to score; all groups when omitted.
        #[arg(long)]
        group: Vec<String>,
    },
    /// Spatially buffered train/validation split of a bundle's graph.
    Split {
        /// Collection, environment or dataset bundle.
        bundle: PathBuf,
        #[arg(long, default_value_t = 0.02)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        levels: usize,
        #[arg(long, default_value_t = 1)]
        buffer: usize,
    },
    /// Tune and fit one baseline on a dataset bundle.
    Baseline {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        dataset: PathBuf,
        /// TOML estimator spec (search space, budget, matching).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, value_enum)]
        matching: Option<MatchingArg>,
    },
    /// Score an estimates directory against a dataset's ground truth.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        estimates: PathBuf,
    },
    /// Collect the evaluation reports of a run directory into one CSV.
    Report { run: PathBuf },
    /// Run the whole pipeline from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn need_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| Error::InvalidParameter("this command needs --out".into()))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("value serializes"));
}

fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn bundle_graph(dir: &Path) -> Result<SpatialGraph> {
    if dir.join("dataset.json").exists() {
        Ok(read_dataset(dir)?.graph)
    } else if dir.join("env.json").exists() {
        Ok(read_env(dir)?.graph)
    } else {
        Ok(ingest(dir)?.0.graph)
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Ingest { dir } => {
            let (coll, report) = ingest(&dir)?;
            if let Some(out) = &cli.out {
                coll.write(out)?;
            }
            print_json(&report);
        }
        Command::DemoCollection {
            n_grid,
            n_covariates,
            confounding_strength,
            tau,
            binary,
            smooth_confounder,
        } => {
            let out = need_out(&cli.out)?;
            let spec = DemoSpec {
                n_grid,
                n_covariates,
                confounding_strength,
                seed,
                treatment_type: if binary { TreatmentType::Binary } else { TreatmentType::Continuous },
                tau,
                smooth_confounder,
            };
            demo_collection(&spec)?.write(out)?;
            eprintln!("wrote demo collection to {}", out.display());
        }
        Command::TrainEnv { config, collection } => {
            let out = need_out(&cli.out)?;
            let mut cfg = EnvConfig::from_toml(&read_text(&config)?)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let dir = collection.unwrap_or_else(|| {
                config
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(&cfg.data_collection)
            });
            let (coll, _) = ingest(&dir)?;
            let env = generate_env(&coll, &cfg)?;
            spatial_synth::bundle::write_env(&env, out)?;
            print_json(&env.diagnostics);
        }
        Command::MakeDataset { env, group, unmasked } => {
            let out = need_out(&cli.out)?;
            let space_env = read_env(&env)?;
            if unmasked {
                let (ds, names) = make_unmasked_dataset(&space_env)?;
                write_dataset(&ds, out)?;
                write_name_map(&env, &names)?;
            } else {
                let group = group.expect("clap requires --group");
                let m = make_dataset_with(&space_env, &group, &ScoreBaseline::fit(&space_env)?)?;
                write_dataset(&m.dataset, out)?;
                write_name_map(&env, &m.names)?;
                print_json(&m.scores);
            }
        }
        Command::Score { env, group } => {
            let out = need_out(&cli.out)?;
            let space_env = read_env(&env)?;
            let groups = if group.is_empty() {
                space_env.groups.iter().map(|g| g.name.clone()).collect()
            } else {
                group
            };
            let baseline = ScoreBaseline::fit(&space_env)?;
            let mut records = Vec::new();
            for g in &groups {
                let m = make_dataset_with(&space_env, g, &baseline)?;
                records.push(m.scores);
            }
            classify_scores(&mut records);
            let ids: Vec<(String, _)> = records
                .into_iter()
                .map(|r| {
                    (
                        spatial_synth::dataset::masked_group_token(space_env.config.seed, &r.group),
                        r,
                    )
                })
                .collect();
            write_scores(out, &ids)?;
        }
        Command::Split {
            bundle,
            alpha,
            levels,
            buffer,
        } => {
            let out = need_out(&cli.out)?;
            let graph = bundle_graph(&bundle)?;
            let params = SplitParams {
                alpha,
                levels,
                buffer,
                seed,
            };
            let split = spatial_split(&graph, &params)?;
            let mut w = csv::Writer::from_path(out).map_err(|e| Error::Parse {
                path: out.into(),
                message: e.to_string(),
            })?;
            let fail = |e: csv::Error| Error::Parse {
                path: out.into(),
                message: e.to_string(),
            };
            w.write_record(["node_id", "role"]).map_err(fail)?;
            for (id, role) in graph.node_ids().iter().zip(split.roles()) {
                w.write_record([id.as_str(), role.as_str()]).map_err(fail)?;
            }
            w.flush().map_err(|e| Error::Io {
                path: out.into(),
                source: e,
            })?;
            eprintln!(
                "train {:.3}, validation {:.3}, buffer {:.3}",
                split.train_fraction(),
                split.val_fraction(),
                1.0 - split.train_fraction() - split.val_fraction()
            );
        }
        Command::Baseline {
            method,
            dataset,
            spec,
            budget,
            matching,
        } => {
            let out = need_out(&cli.out)?;
            let ds = read_dataset(&dataset)?;
            let mut est = match spec {
                Some(p) => toml::from_str::<EstimatorSpec>(&read_text(&p)?)
                    .map_err(|e| Error::InvalidConfig(e.to_string()))?,
                None => EstimatorSpec::default(),
            };
            est.method = method;
            est.seed = seed;
            if let Some(b) = budget {
                est.budget = b;
            }
            if let Some(m) = matching {
                est.matching = match m {
                    MatchingArg::Greedy => Matching::Greedy,
                    MatchingArg::Optimal => Matching::Optimal,
                };
            }
            let result = run_baseline(&est, &ds)?;
            let report = eval_report(&result.fit.estimates, &ds)?;
            write_estimates(out, ds.graph.node_ids(), &result)?;
            write_report_json(&out.join("report.json"), &report)?;
            print_json(&report);
        }
        Command::Evaluate { dataset, estimates } => {
            let ds = read_dataset(&dataset)?;
            let (_, est) = read_estimates(&estimates, &ds)?;
            let report = eval_report(&est, &ds)?;
            if let Some(out) = &cli.out {
                write_report_json(out, &report)?;
            }
            print_json(&report);
        }
        Command::Report { run } => {
            let out = need_out(&cli.out)?;
            let root = run.join("estimates");
            let mut rows = Vec::new();
            for ds in sorted_dirs(&root)? {
                for method in sorted_dirs(&ds)? {
                    let path = method.join("report.json");
                    let report: EvalReport = serde_json::from_str(&read_text(&path)?).map_err(|e| Error::Parse {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                    rows.extend(report_rows(&file_name(&ds), &file_name(&method), &report));
                }
            }
            write_report(out, &rows)?;
            eprintln!("{} rows written to {}", rows.len(), out.display());
        }
        Command::Run { config } => {
            let out = need_out(&cli.out)?;
            let outputs = run_pipeline(&config, out, cli.seed)?;
            eprintln!(
                "{} datasets; report at {}",
                outputs.dataset_dirs.len(),
                outputs.report.display()
            );
        }
    }
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |e| Error::Io {
        path: dir.into(),
        source: e,
    };
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Numeric => 3,
        ErrorKind::Io => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
