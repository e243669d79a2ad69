//! The `stan` experiment runner.
//!
//! Subcommands share one resolved [`ExperimentConfig`] and write under the
//! output directory:
//!
//! | command             | outputs                                                        |
//! |---------------------|----------------------------------------------------------------|
//! | `generate`          | `dataset.csv`, `truth.csv`, `generator_stats.csv`              |
//! | `train`             | `checkpoints/<arch>/`, `train_log_<arch>.jsonl`, `pseudo_labels.csv` |
//! | `evaluate`          | `metrics_<arch>.csv`                                           |
//! | `report`            | `report.txt`, `report.csv`                                     |
//! | `export-embeddings` | `embeddings_<arch>.csv`, `preferences_<arch>.csv`              |
//! | `stage-subset`      | `stage_subset_<arch>.csv`                                      |
//!
//! Each command also writes `manifest_<command>[_<arch>].json` with the
//! config hash. Usage errors exit with 2, every other failure with 1 after
//! a one-line diagnostic on stderr.

pub mod config;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

pub use config::{resolve, ExperimentConfig};

use crate::backbone::Arch;
use crate::data::{chronological_split, compute_pseudo_labels, ingest_csv, write_csv, write_pseudo_labels_csv, CsvSchema, Dataset, StageLabel, TaskColumn};
use crate::error::{DataError, MetricError, ModelError, StageError, TrainError};
use crate::eval::{read_reports_csv, render_comparison, stage_subset_eval, write_reports_csv, MetricReport, ReportMeta};
use crate::seed::keyed_rng;
use crate::stage_tracker::PosteriorStore;
use crate::synthgen::{generate, validate_statistics, write_stats_csv, write_truth_csv};
use crate::trainer::{
    load_checkpoint, predict_dataset, preference_predictions, save_checkpoint, CheckpointExtras, RuleStages, Trainer,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Parser)]
#[command(name = "stan", version, about = "Stage-adaptive multi-task recommendation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat key=value config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub arch: Option<Arch>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset CSV (read by most commands, written by `generate`).
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Cut-off for NDCG@k.
    #[arg(long, global = true)]
    pub k: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic lifecycle dataset with ground-truth stages.
    Generate,
    /// Train one architecture and write its checkpoint.
    Train {
        /// Continue from an unfinished checkpoint with the same config.
        #[arg(long)]
        resume: bool,
    },
    /// Score a trained checkpoint on the test split.
    Evaluate,
    /// Compare the metric files of all configured architectures.
    Report,
    /// Export preference embeddings, stage weights and rule stages.
    ExportEmbeddings,
    /// Train per-stage models and compare them with the full-data model.
    StageSubset,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train { .. } => "train",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
            Command::ExportEmbeddings => "export-embeddings",
            Command::StageSubset => "stage-subset",
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, env: impl IntoIterator<Item = (String, String)>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                let _ = e.print();
                return 0;
            }
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid usage"));
            return 2;
        }
    };
    match execute(&cli, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

pub fn execute(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(s) = cli.seed {
        flags.push(("seed", s.to_string()));
    }
    if let Some(a) = cli.arch {
        flags.push(("train.arch", a.to_string()));
    }
    if let Some(o) = &cli.out {
        flags.push(("output.dir", o.display().to_string()));
    }
    if let Some(d) = &cli.dataset {
        flags.push(("data.path", d.display().to_string()));
    }
    if let Some(k) = cli.k {
        flags.push(("eval.k", k.to_string()));
    }
    let cfg = resolve(cli.config.as_deref(), env, &flags).map_err(CliError::Config)?;
    fs::create_dir_all(&cfg.out)?;
    let outputs = match &cli.command {
        Command::Generate => cmd_generate(&cfg)?,
        Command::Train { resume } => cmd_train(&cfg, *resume)?,
        Command::Evaluate => cmd_evaluate(&cfg)?,
        Command::Report => cmd_report(&cfg)?,
        Command::ExportEmbeddings => cmd_export(&cfg)?,
        Command::StageSubset => cmd_stage_subset(&cfg)?,
    };
    let arch = match cli.command {
        Command::Generate | Command::Report => None,
        _ => Some(cfg.train.arch),
    };
    write_manifest(&cfg, cli.command.name(), arch, &outputs)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    arch: Option<Arch>,
    config_hash: String,
    crate_version: &'a str,
    config: &'a BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn write_manifest(cfg: &ExperimentConfig, command: &str, arch: Option<Arch>, outputs: &[PathBuf]) -> Result<(), CliError> {
    let m = RunManifest {
        command,
        arch,
        config_hash: cfg.hash(),
        crate_version: env!("CARGO_PKG_VERSION"),
        config: &cfg.resolved,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let name = match arch {
        Some(a) => format!("manifest_{command}_{a}.json"),
        None => format!("manifest_{command}.json"),
    };
    let mut f = BufWriter::new(File::create(cfg.out.join(name))?);
    serde_json::to_writer_pretty(&mut f, &m)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_generate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let g = generate(&cfg.generator)?;
    let data = cfg.dataset_path();
    let truth = cfg.out.join("truth.csv");
    let stats_path = cfg.out.join("generator_stats.csv");
    write_csv(&g.dataset, create(&data)?)?;
    write_truth_csv(&g.truth, create(&truth)?)?;
    let stats = validate_statistics(&g.dataset, &g.truth, &cfg.generator)?;
    for s in stats.iter().filter(|s| s.flagged) {
        log::warn!(
            "stage {} task {}: empirical rate {:?} deviates from {} by more than 3 standard errors",
            s.stage,
            s.task,
            s.empirical,
            s.configured
        );
    }
    write_stats_csv(&stats, create(&stats_path)?)?;
    log::info!("generated {} records for {} users", g.dataset.len(), g.dataset.num_users());
    Ok(vec![data, truth, stats_path])
}

/// Standard layout inferred from the header: `uf*` user slots, `if*` item
/// slots, every other non-key column a task.
fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let path = cfg.dataset_path();
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let slot = |prefix: &str, h: &str| h.strip_prefix(prefix).is_some_and(|r| r.parse::<usize>().is_ok());
    let user = header.iter().filter(|h| slot("uf", h)).count();
    let item = header.iter().filter(|h| slot("if", h)).count();
    let tasks: Vec<&String> = header
        .iter()
        .filter(|h| !slot("uf", h) && !slot("if", h) && !["user_id", "item_id", "timestamp"].contains(&h.as_str()))
        .collect();
    let mut schema = CsvSchema::standard(&tasks, user, item);
    for name in &cfg.binned_tasks {
        let t = schema
            .tasks
            .iter_mut()
            .find(|t| t.name() == name)
            .ok_or_else(|| CliError::Invalid(format!("binned task `{name}` is not a column of {}", path.display())))?;
        *t = TaskColumn::Binned {
            name: name.clone(),
            column: name.clone(),
            bins: 2,
        };
    }
    Ok(ingest_csv(&path, &schema)?)
}

fn splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, Dataset), CliError> {
    Ok(chronological_split(&load_dataset(cfg)?, cfg.split)?)
}

fn checkpoint_dir(cfg: &ExperimentConfig, arch: Arch) -> PathBuf {
    cfg.out.join("checkpoints").join(arch.name())
}

fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<Vec<PathBuf>, CliError> {
    let (train, valid, _) = splits(cfg)?;
    let trainer = Trainer::new(&train, &valid, cfg.train.clone())?;
    let arch = cfg.train.arch;
    let dir = checkpoint_dir(cfg, arch);
    let log_path = cfg.out.join(format!("train_log_{arch}.jsonl"));
    let hash = cfg.hash();

    let resumable = resume && dir.join("manifest.json").exists();
    let mut state = if resumable {
        let loaded = load_checkpoint(&dir)?;
        if loaded.manifest.config_hash != hash {
            return Err(CliError::Invalid(format!(
                "checkpoint in {} was written with a different config",
                dir.display()
            )));
        }
        loaded.state
    } else {
        trainer.init_state()?
    };
    let mut log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(resumable)
            .truncate(!resumable)
            .open(&log_path)?,
    );
    while !state.finished {
        trainer.run_epoch(&mut state, &mut log)?;
        log.flush()?;
        save_checkpoint(&dir, &state, &cfg.train, &hash, CheckpointExtras::default())?;
    }
    let outcome = trainer.finish(state)?;
    let extras = CheckpointExtras {
        posteriors: outcome.posteriors.as_ref(),
        gammas: outcome.gammas.as_ref(),
        stages: outcome.stages.as_ref(),
    };
    save_checkpoint(&dir, &outcome.state, &cfg.train, &hash, extras)?;

    let pseudo_path = cfg.out.join("pseudo_labels.csv");
    write_pseudo_labels_csv(&train, &compute_pseudo_labels(&train, cfg.train.window), create(&pseudo_path)?)?;
    Ok(vec![dir, log_path, pseudo_path])
}

fn rule_stages_for(arch: Arch, train: &Dataset) -> Result<Option<RuleStages>, CliError> {
    Ok(if arch.uses_stage_feature() {
        Some(RuleStages::fit(train)?)
    } else {
        None
    })
}

fn test_report(cfg: &ExperimentConfig, arch: Arch, train: &Dataset, test: &Dataset) -> Result<MetricReport, CliError> {
    let dir = checkpoint_dir(cfg, arch);
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Invalid(format!("no checkpoint for {arch} in {}", dir.display())));
    }
    let model = load_checkpoint(&dir)?.best_model()?;
    let preds = predict_dataset(&model, test, rule_stages_for(arch, train)?.as_ref())?;
    let meta = ReportMeta {
        arch: arch.to_string(),
        dataset: cfg.dataset_name.clone(),
        seed: cfg.seed,
        k: cfg.k,
    };
    Ok(MetricReport::evaluate(test, &preds, meta)?)
}

fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let (train, _, test) = splits(cfg)?;
    let arch = cfg.train.arch;
    let mut report = test_report(cfg, arch, &train, &test)?;
    if arch != cfg.base_arch && checkpoint_dir(cfg, cfg.base_arch).join("manifest.json").exists() {
        let base = test_report(cfg, cfg.base_arch, &train, &test)?;
        report.set_baseline(&base);
    }
    let path = cfg.out.join(format!("metrics_{arch}.csv"));
    report.write_csv(create(&path)?)?;
    Ok(vec![path])
}

fn cmd_report(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let mut reports = Vec::new();
    for arch in &cfg.report_archs {
        let path = cfg.out.join(format!("metrics_{arch}.csv"));
        if path.exists() {
            reports.extend(read_reports_csv(File::open(&path)?)?);
        }
    }
    let base_name = cfg.base_arch.to_string();
    let base = reports
        .iter()
        .find(|r| r.meta.arch == base_name)
        .cloned()
        .ok_or_else(|| CliError::Invalid(format!("no metrics for base architecture {base_name}; run evaluate first")))?;
    let text = render_comparison(&reports, &base_name)?;
    for r in &mut reports {
        r.set_baseline(&base);
    }
    let txt = cfg.out.join("report.txt");
    let csv_path = cfg.out.join("report.csv");
    create(&txt)?.write_all(text.as_bytes())?;
    write_reports_csv(&reports, create(&csv_path)?)?;
    print!("{text}");
    Ok(vec![txt, csv_path])
}

fn cmd_export(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let arch = cfg.train.arch;
    if !arch.has_preference() {
        return Err(CliError::Invalid(format!("{arch} has no preference network to export")));
    }
    let (train, _, _) = splits(cfg)?;
    let loaded = load_checkpoint(&checkpoint_dir(cfg, arch))?;
    let model = loaded.best_model()?;
    let net = model.preference().expect("preference architecture");
    let p = model.params();
    let prefs = preference_predictions(&model, &train)?;
    let posteriors = PosteriorStore::from_history(&train, &prefs)?;
    let gammas = posteriors.gammas(cfg.train.gamma_mode, cfg.seed, loaded.state.epoch, None);
    let stages = RuleStages::fit(&train)?;
    let names = &train.task_names;

    let pref_path = cfg.out.join(format!("preferences_{arch}.csv"));
    let mut w = csv::Writer::from_writer(create(&pref_path)?);
    let mut header = vec!["user_id".to_string(), "timestamp".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (r, y) in train.records.iter().zip(&prefs) {
        let mut row = vec![r.user_id.clone(), r.timestamp.to_string()];
        row.extend(y.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;

    // latest training record per user supplies the features
    let latest: BTreeMap<&str, usize> = train.user_records().into_iter().map(|(u, idx)| (u, *idx.last().expect("nonempty"))).collect();
    let mut by_stage: BTreeMap<StageLabel, Vec<&str>> = BTreeMap::new();
    for &u in latest.keys() {
        by_stage.entry(stages.stage_of(u)).or_default().push(u);
    }
    let mut chosen: Vec<(&str, StageLabel)> = Vec::new();
    for (stage, mut users) in by_stage {
        if users.len() > cfg.users_per_stage {
            users.shuffle(&mut keyed_rng(cfg.seed, &format!("export/{stage}")));
            users.truncate(cfg.users_per_stage);
            users.sort_unstable();
        }
        chosen.extend(users.into_iter().map(|u| (u, stage)));
    }

    let (d1, d2) = net.dims();
    let emb_path = cfg.out.join(format!("embeddings_{arch}.csv"));
    let mut w = csv::Writer::from_writer(create(&emb_path)?);
    let mut header = vec!["user_id".to_string()];
    for name in names {
        header.extend((0..d1 * d2).map(|i| format!("s_{name}_{i}")));
    }
    header.extend(names.iter().map(|n| format!("gamma_{n}")));
    header.push("stage".into());
    w.write_record(&header)?;
    for (u, stage) in chosen {
        let rec = &train.records[latest[u]];
        let cache = net.forward(p, &rec.user_features)?;
        let mut row = vec![u.to_string()];
        for s in &cache.embeddings {
            row.extend(s.iter().map(f64::to_string));
        }
        let g = gammas.get(u).expect("every training user has a posterior");
        row.extend(g.iter().map(f64::to_string));
        row.push(stage.name().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(vec![emb_path, pref_path])
}

fn cmd_stage_subset(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, CliError> {
    let (train, valid, test) = splits(cfg)?;
    let report = stage_subset_eval(&train, &valid, &test, &cfg.train, &cfg.dataset_name, cfg.k)?;
    let path = cfg.out.join(format!("stage_subset_{}.csv", cfg.train.arch));
    report.write_csv(create(&path)?)?;
    Ok(vec![path])
}
