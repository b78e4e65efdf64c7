//! Command-line front end: `gen-data`, `train`, `eval`, `report`.
//!
//! Settings resolve in three layers: built-in defaults, then the JSON file
//! given with `--config`, then command-line flags. Relative paths inside a
//! config file are taken relative to that file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{load_domain, load_domain_split, write_synthetic, SplitPair, SyntheticConfig, TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::model::Variant;
use crate::trainer::{
    evaluate, read_results, run_tasks, source_count_sweep, target_count_sweep, tasks_for_mode,
    two_to_two_pairs, write_results, DomainPair, EvalReport, GridTable, Mode, ResultRow, TaskSpec,
    TrainConfig,
};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "WJMMD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "wjmmd", version, about = "Weighted joint-MMD domain adaptation for 1-D signals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic multi-domain corpus with one manifest per domain.
    GenData(GenDataArgs),
    /// Train one task, or a grid of tasks, and evaluate on the targets.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled domain.
    Eval(EvalArgs),
    /// Merge result tables into one accuracy grid with an Average column.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON file with synthetic corpus settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory holding `<domain>/manifest.json` for every domain.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Comma-separated source domains; with --targets, replaces the task list.
    #[arg(long, value_delimiter = ',')]
    pub sources: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub arch: Option<Variant>,
    /// Tasks trained concurrently.
    #[arg(long)]
    pub parallel: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Writes `report.json` and the confusion matrix here when given.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluate every window instead of the held-out split.
    #[arg(long)]
    pub all: bool,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Result CSV files written by `train`.
    #[arg(required = true)]
    pub results: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a Markdown table.
    #[arg(long)]
    pub markdown: bool,
}

/// A task listed explicitly in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    #[serde(default)]
    pub label: Option<String>,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    #[serde(default)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// The six two-source two-target tasks over four domains.
    TwoToTwo,
    /// Every choice of `k` sources for each single target.
    SourceCount,
    /// Every choice of `k` targets for each single source.
    TargetCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub layout: Layout,
    pub domains: Vec<String>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

/// Contents of a `train --config` file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: Option<PathBuf>,
    /// Explicit manifest per domain; wins over `data_dir`.
    pub manifests: BTreeMap<String, PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub tasks: Vec<TaskEntry>,
    pub grid: Option<GridSpec>,
    pub parallel: Option<usize>,
    pub train: TrainConfig,
}

/// Fully resolved run, written next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub parallel: usize,
    pub manifests: BTreeMap<String, PathBuf>,
    pub tasks: Vec<TaskSpec>,
    pub train: TrainConfig,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn relative_to(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

/// Thread budget: the requested count, capped by `WJMMD_THREADS`.
pub fn thread_budget(requested: usize) -> usize {
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    match cap {
        Some(c) => requested.clamp(1, c),
        None => requested.max(1),
    }
}

/// Directory name for a task id.
pub fn task_dir_name(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '+' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn resolve_gen_config(args: &GenDataArgs) -> Result<SyntheticConfig> {
    let mut cfg: SyntheticConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(v) = args.domains {
        cfg.num_domains = v;
    }
    if let Some(v) = args.classes {
        cfg.num_classes = v;
    }
    if let Some(v) = args.shift {
        cfg.shift = v;
    }
    if let Some(v) = args.noise {
        cfg.noise_std = v;
    }
    if let Some(v) = args.samples_per_class {
        cfg.samples_per_class = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<Vec<PathBuf>> {
    let cfg = resolve_gen_config(args)?;
    create_dir(&args.out)?;
    let paths = write_synthetic(&cfg, &args.out)?;
    write_file(
        &args.out.join("synthetic.json"),
        serde_json::to_string_pretty(&cfg)?.as_bytes(),
    )?;
    Ok(paths)
}

fn expand_tasks(cfg: &RunConfig, seed: u64, mode: Mode) -> Result<Vec<TaskSpec>> {
    let mut tasks = Vec::new();
    for (i, t) in cfg.tasks.iter().enumerate() {
        let label = t.label.clone().unwrap_or_else(|| format!("task{}", i + 1));
        let pair = DomainPair::new(label, &t.sources, &t.targets);
        tasks.extend(tasks_for_mode(&pair, t.mode.unwrap_or(mode), seed));
    }
    if let Some(g) = &cfg.grid {
        let pairs = match g.layout {
            Layout::TwoToTwo => {
                if g.domains.len() != 4 {
                    return Err(Error::Config("two_to_two grid needs exactly 4 domains".into()));
                }
                two_to_two_pairs(&g.domains)
            }
            Layout::SourceCount | Layout::TargetCount => {
                let k = g
                    .k
                    .ok_or_else(|| Error::Config("count sweeps need k".into()))?;
                if k == 0 || k >= g.domains.len() {
                    return Err(Error::Config(format!(
                        "k = {k} must lie in 1..{}",
                        g.domains.len()
                    )));
                }
                if g.layout == Layout::SourceCount {
                    source_count_sweep(&g.domains, k)
                } else {
                    target_count_sweep(&g.domains, k)
                }
            }
        };
        let modes = if g.modes.is_empty() { vec![mode] } else { g.modes.clone() };
        let seeds = if g.seeds.is_empty() { vec![seed] } else { g.seeds.clone() };
        for &s in &seeds {
            for p in &pairs {
                for &m in &modes {
                    tasks.extend(tasks_for_mode(p, m, s));
                }
            }
        }
    }
    if tasks.is_empty() {
        return Err(Error::Config(
            "no tasks: give --sources/--targets, a task list or a grid".into(),
        ));
    }
    let mut ids: Vec<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate task id '{}'", w[0])));
    }
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

/// Applies flags over the config file and expands the task list.
pub fn resolve_run(args: &TrainArgs) -> Result<RunManifest> {
    let (mut cfg, base) = match &args.config {
        Some(p) => (
            read_json::<RunConfig>(p)?,
            p.parent().map(Path::to_path_buf),
        ),
        None => (RunConfig::default(), None),
    };
    let base = base.as_deref();
    if let Some(v) = args.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.arch {
        cfg.train.arch = v;
    }
    cfg.train.validate()?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let mode = args.mode.or(cfg.mode).unwrap_or(Mode::Wjmmd);
    match (&args.sources, &args.targets) {
        (Some(s), Some(t)) => {
            cfg.grid = None;
            cfg.tasks = vec![TaskEntry {
                label: None,
                sources: s.clone(),
                targets: t.clone(),
                mode: Some(mode),
            }];
        }
        (None, None) => {
            if args.mode.is_some() {
                cfg.tasks.iter_mut().for_each(|t| t.mode = Some(mode));
                if let Some(g) = &mut cfg.grid {
                    g.modes = vec![mode];
                }
            }
            if args.seed.is_some() {
                if let Some(g) = &mut cfg.grid {
                    g.seeds = vec![seed];
                }
            }
        }
        _ => return Err(Error::Config("--sources and --targets go together".into())),
    }
    let tasks = expand_tasks(&cfg, seed, mode)?;
    let data_dir = args
        .data_dir
        .clone()
        .or_else(|| cfg.data_dir.as_ref().map(|d| relative_to(base, d)));
    let mut manifests = BTreeMap::new();
    for id in tasks.iter().flat_map(|t| t.sources.iter().chain(&t.targets)) {
        if manifests.contains_key(id) {
            continue;
        }
        let path = match (cfg.manifests.get(id), &data_dir) {
            (Some(p), _) => relative_to(base, p),
            (None, Some(d)) => d.join(id).join("manifest.json"),
            (None, None) => {
                return Err(Error::Config(format!(
                    "no manifest for domain '{id}': set data_dir or manifests"
                )))
            }
        };
        manifests.insert(id.clone(), path);
    }
    let parallel = thread_budget(args.parallel.or(cfg.parallel).unwrap_or(1));
    Ok(RunManifest {
        config_path: args.config.clone(),
        out: args.out.clone(),
        seed,
        parallel,
        manifests,
        tasks,
        train: cfg.train,
    })
}

/// Loads every domain the run needs, before anything is written.
pub fn load_run_data(run: &RunManifest) -> Result<BTreeMap<String, SplitPair>> {
    for path in run.manifests.values() {
        if !path.exists() {
            return Err(Error::MissingFile(path.clone()));
        }
    }
    run.manifests
        .iter()
        .map(|(id, path)| {
            let sp = load_domain_split(path, TRAIN_FRACTION, run.train.split_seed)?;
            if &sp.train.domain_id != id {
                return Err(Error::Manifest {
                    path: path.clone(),
                    detail: format!("declares domain '{}', expected '{id}'", sp.train.domain_id),
                });
            }
            Ok((id.clone(), sp))
        })
        .collect()
}

fn write_eval_outputs(dir: &Path, report: &EvalReport) -> Result<()> {
    write_file(&dir.join("trace.jsonl"), report.trace_jsonl().as_bytes())?;
    write_file(
        &dir.join("report.json"),
        serde_json::to_string_pretty(report)?.as_bytes(),
    )?;
    for e in &report.evaluations {
        write_file(
            &dir.join(format!("confusion_{}.csv", task_dir_name(&e.domain_id))),
            e.confusion.to_csv().as_bytes(),
        )?;
    }
    Ok(())
}

/// Trains every task of the run and writes, under `out`:
/// `run_manifest.json`, `results.csv`, and per task a directory with
/// `checkpoint.bin`, `trace.jsonl`, `report.json` and one
/// `confusion_<target>.csv` per target.
pub fn cmd_train(args: &TrainArgs) -> Result<Vec<ResultRow>> {
    let run = resolve_run(args)?;
    let data = load_run_data(&run)?;
    let outcomes = run_tasks(&run.tasks, &run.train, &data, run.parallel)?;
    create_dir(&run.out)?;
    write_file(
        &run.out.join("run_manifest.json"),
        serde_json::to_string_pretty(&run)?.as_bytes(),
    )?;
    let mut rows = Vec::new();
    for o in &outcomes {
        let dir = run.out.join(task_dir_name(&o.task.id));
        create_dir(&dir)?;
        checkpoint::save(&o.model, &dir.join("checkpoint.bin"))?;
        write_eval_outputs(&dir, &o.report)?;
        rows.extend(o.rows());
    }
    write_results(&run.out.join("results.csv"), &rows)?;
    Ok(rows)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let model = checkpoint::load(&args.checkpoint)?;
    let ds = if args.all {
        load_domain(&args.manifest)?
    } else {
        load_domain_split(&args.manifest, TRAIN_FRACTION, args.split_seed)?.test
    };
    let report = EvalReport {
        epochs_run: 0,
        evaluations: vec![evaluate(&model, &ds)?],
        trace: Vec::new(),
    };
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_eval_outputs(out, &report)?;
    }
    Ok(report)
}

pub fn cmd_report(args: &ReportArgs) -> Result<GridTable> {
    let rows = read_results(&args.results)?;
    let table = GridTable::from_rows(&rows);
    create_dir(&args.out)?;
    write_file(&args.out.join("grid.csv"), table.to_csv().as_bytes())?;
    if args.markdown {
        write_file(&args.out.join("grid.md"), table.to_markdown().as_bytes())?;
    }
    Ok(table)
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => {
            for p in cmd_gen_data(a)? {
                println!("{}", p.display());
            }
        }
        Command::Train(a) => {
            for r in cmd_train(a)? {
                println!(
                    "{} {} -> {}: {:.4} ({} epochs)",
                    r.task_id, r.sources, r.target_domain, r.accuracy, r.epochs_run
                );
            }
        }
        Command::Eval(a) => {
            for e in cmd_eval(a)?.evaluations {
                println!("{}: {:.4}", e.domain_id, e.accuracy);
            }
        }
        Command::Report(a) => {
            let t = cmd_report(a)?;
            if a.markdown {
                print!("{}", t.to_markdown());
            } else {
                print!("{}", t.to_csv());
            }
        }
    }
    Ok(())
}

/// Parses `std::env::args` and runs the command. Exit status 0 on success,
/// 2 for usage or validation errors, 3 for numerical failure.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_status())
        }
    }
}
