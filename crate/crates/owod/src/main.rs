//! `owod`: batch front-end for data generation, training, evaluation,
//! ablation sweeps and run reports.
//!
//! Runs live under `$OWOD_RUN_ROOT/<config hash>/` (default root `runs`).
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use owod::artifacts::{loss_rows, write_csv, write_eval, Stamp, LOSS_HEADER};
use owod::checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointError, CheckpointMeta};
use owod::config::{ConfigError, ExperimentConfig};
use owod::dataset::{load_dataset, write_dataset, DataError, Dataset};
use owod::pipeline::{ablation_header, ablation_row, evaluate, fresh_state, run_task_one, sweep_cells, task_exemplars, task_sessions, train_task, ResumePoint, Sweep};
use owod::report::{collect, eval_dir, read_run_info, write_run_info, write_summary, ReportError, RunInfo};
use owod_core::protocol::{ExemplarStore, Phase, TrainState};
use owod_core::shapeworld::build_task_splits;

pub const RUN_ROOT_ENV: &str = "OWOD_RUN_ROOT";

#[derive(Parser)]
#[command(name = "owod", version, about = "Toy open-world detection experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set etop.stop_layer=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the default config to stdout or a file.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the dataset under `shapeworld_data.root`.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one task, starting from the previous task's final checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        task: usize,
        /// Continue from the latest per-epoch checkpoint of this task.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a task's test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        task: usize,
        /// Defaults to the task's final checkpoint of this run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every cell of a sweep on Task 1 and write one CSV table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = parse_sweep)]
        sweep: Sweep,
    },
    /// Merge run directories into summary.md and summary.csv.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Output directory; the first run directory when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    Sweep::parse(s).ok_or_else(|| format!("unknown sweep `{s}` (tdqi_ratio, etop_layer, schedule)"))
}

enum Failure {
    Config(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Runtime(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Invalid(diags) => {
                let lines: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
                Failure::Config(format!("invalid config:\n  {}", lines.join("\n  ")))
            }
            e => Failure::Config(e.to_string()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ConfigMismatch { .. } => Failure::Config(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::DatasetMismatch { .. } | ReportError::Empty(_) => Failure::Data(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    match &a.config {
        Some(p) => Ok(ExperimentConfig::load_with(p, &a.set)?),
        None => {
            let mut v = serde_json::to_value(ExperimentConfig::default()).expect("config serialises");
            for s in &a.set {
                owod::config::apply_override(&mut v, s)?;
            }
            Ok(ExperimentConfig::from_value(v)?)
        }
    }
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    run_root().join(cfg.hash())
}

/// Loads the dataset and checks that it was generated from the configured
/// protocol.
fn open_dataset(cfg: &ExperimentConfig) -> Result<Dataset, Failure> {
    let ds = load_dataset(Path::new(&cfg.shapeworld_data.root))?;
    if ds.protocol != cfg.shapeworld_data.protocol {
        return Err(Failure::Data(format!(
            "{}: dataset was generated from a different protocol than the config",
            cfg.shapeworld_data.root
        )));
    }
    Ok(ds)
}

/// Records the run identity, refusing to mix datasets within one run.
fn claim_run(cfg: &ExperimentConfig, ds: &Dataset) -> Result<PathBuf, Failure> {
    let dir = run_dir(cfg);
    let info = RunInfo {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        dataset_hash: ds.hash.clone(),
    };
    if dir.join(owod::report::RUN_FILE).is_file() {
        let old = read_run_info(&dir)?;
        if old.dataset_hash != info.dataset_hash {
            return Err(Failure::Data(format!(
                "{}: run was started on dataset {}, current dataset is {}",
                dir.display(),
                old.dataset_hash,
                info.dataset_hash
            )));
        }
    } else {
        write_run_info(&dir, &info)?;
        fs::write(dir.join("config.json"), cfg.to_json_pretty()).map_err(runtime)?;
    }
    Ok(dir)
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Train => "train",
        Phase::Finetune => "finetune",
    }
}

fn task_ckpt_dir(run: &Path, task: usize) -> PathBuf {
    run.join("checkpoints").join(format!("task{task}"))
}

fn epoch_ckpt_dir(run: &Path, task: usize, phase: Phase, epochs_done: usize) -> PathBuf {
    task_ckpt_dir(run, task).join(format!("{}_e{epochs_done:03}", phase_name(phase)))
}

/// Latest per-epoch checkpoint of a task: fine-tuning beats training, then
/// more epochs beat fewer.
fn latest_checkpoint(run: &Path, task: usize) -> Option<(PathBuf, ResumePoint)> {
    let entries = fs::read_dir(task_ckpt_dir(run, task)).ok()?;
    let mut best: Option<(PathBuf, ResumePoint)> = None;
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        let Some((phase, n)) = name.split_once("_e") else { continue };
        let phase = match phase {
            "train" => Phase::Train,
            "finetune" => Phase::Finetune,
            _ => continue,
        };
        let Ok(epochs_done) = n.parse::<usize>() else { continue };
        let key = |r: &ResumePoint| (r.phase == Phase::Finetune, r.epochs_done);
        let point = ResumePoint { phase, epochs_done };
        if best.as_ref().map_or(true, |(_, b)| key(&point) > key(b)) {
            best = Some((e.path(), point));
        }
    }
    best
}

fn restore(cfg: &ExperimentConfig, dir: &Path) -> Result<(TrainState, CheckpointMeta, ExemplarStore), Failure> {
    let m = read_manifest(dir)?;
    if m.meta.config_hash != cfg.hash() {
        return Err(CheckpointError::ConfigMismatch {
            expected: cfg.hash(),
            found: m.meta.config_hash,
        }
        .into());
    }
    let r = load_checkpoint(dir, &cfg.detector_core, &cfg.tdqi, &cfg.objectness, &cfg.owod_protocol.optim)?;
    Ok((r.state, r.meta, r.exemplars))
}

fn cmd_init_config(out: Option<PathBuf>) -> Result<(), Failure> {
    let json = ExperimentConfig::default().to_json_pretty();
    match out {
        Some(p) => fs::write(&p, json).map_err(runtime),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn cmd_generate(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let tasks = build_task_splits(&cfg.shapeworld_data.protocol).map_err(|e| Failure::Config(e.to_string()))?;
    let hash = write_dataset(&cfg.shapeworld_data.protocol, &tasks, Path::new(&cfg.shapeworld_data.root))?;
    println!("dataset {} written to {}", hash, cfg.shapeworld_data.root);
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, task_id: usize, resume: bool) -> Result<(), Failure> {
    let ds = open_dataset(cfg)?;
    let task = ds
        .task(task_id)
        .ok_or_else(|| Failure::Config(format!("task {task_id} is not part of the protocol")))?
        .clone();
    let run = claim_run(cfg, &ds)?;
    let stamp = Stamp {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };

    let latest = if resume { latest_checkpoint(&run, task_id) } else { None };
    let (mut state, mut store, point) = match latest {
        Some((dir, point)) => {
            let (state, _, store) = restore(cfg, &dir)?;
            eprintln!("resuming task {task_id} from {}", dir.display());
            (state, store, Some(point))
        }
        None if task_id == 1 => (fresh_state(cfg), ExemplarStore::default(), None),
        None => {
            let prev = task_ckpt_dir(&run, task_id - 1).join("final");
            if !prev.join(owod::checkpoint::MANIFEST).is_file() {
                return Err(Failure::Runtime(format!("{}: missing; train task {} first", prev.display(), task_id - 1)));
            }
            let (state, _, store) = restore(cfg, &prev)?;
            (state, store, None)
        }
    };

    // Exemplar store as it stands in each phase, for the per-epoch checkpoints.
    let before = store.clone();
    let mut after = before.clone();
    after.merge(&task_exemplars(cfg, &task));

    let loss_path = |phase: Phase| run.join("losses").join(format!("task{task_id}_{}.csv", phase_name(phase)));
    // Rows of epochs already completed before a resume are kept.
    let mut rows: std::collections::BTreeMap<&'static str, Vec<Vec<String>>> = Default::default();
    if let Some(p) = point {
        for phase in [Phase::Train, Phase::Finetune] {
            let keep = match (p.phase, phase) {
                (Phase::Finetune, Phase::Train) => usize::MAX,
                (a, b) if a == b => p.epochs_done,
                _ => 0,
            };
            let path = loss_path(phase);
            if let Ok(mut r) = csv::Reader::from_path(&path) {
                let kept: Vec<Vec<String>> = r
                    .records()
                    .flatten()
                    .map(|rec| rec.iter().map(str::to_string).collect::<Vec<_>>())
                    .filter(|rec: &Vec<String>| rec[4].parse::<usize>().map_or(false, |e| e < keep))
                    .collect();
                rows.insert(phase_name(phase), kept);
            }
        }
    }

    let sessions = task_sessions(cfg, task_id);
    let mut io_error: Option<Failure> = None;
    let data_hash = ds.hash.clone();
    let tasks = ds.tasks.clone();
    train_task(cfg, &tasks, task_id, &mut state, &mut store, point, |session, st, log| {
        if io_error.is_some() {
            return;
        }
        let r = rows.entry(phase_name(session.phase)).or_default();
        r.extend(loss_rows(&stamp, log));
        let done = log.epoch + 1;
        let meta = CheckpointMeta {
            config_hash: stamp.config_hash.clone(),
            dataset_hash: data_hash.clone(),
            seed: cfg.seed,
            task_id,
            phase: session.phase,
            epoch: done,
        };
        let ex = match session.phase {
            Phase::Train => &before,
            Phase::Finetune => &after,
        };
        let res = write_csv(&loss_path(session.phase), LOSS_HEADER, r)
            .map_err(runtime)
            .and_then(|_| save_checkpoint(&epoch_ckpt_dir(&run, task_id, session.phase, done), st, &meta, ex).map_err(Failure::from));
        if let Err(e) = res {
            io_error = Some(e);
        }
        eprintln!(
            "task {task_id} {} epoch {done}/{} loss {:.4}",
            phase_name(session.phase),
            session.epochs,
            log.mean_loss
        );
    })
    .map_err(runtime)?;
    if let Some(e) = io_error {
        return Err(e);
    }

    let last = sessions.last().expect("every task has a training session");
    let meta = CheckpointMeta {
        config_hash: stamp.config_hash.clone(),
        dataset_hash: ds.hash.clone(),
        seed: cfg.seed,
        task_id,
        phase: last.phase,
        epoch: last.epochs,
    };
    let final_dir = task_ckpt_dir(&run, task_id).join("final");
    save_checkpoint(&final_dir, &state, &meta, &store)?;
    println!("{}", final_dir.display());
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, task_id: usize, checkpoint: Option<PathBuf>) -> Result<(), Failure> {
    let ds = open_dataset(cfg)?;
    let task = ds
        .task(task_id)
        .ok_or_else(|| Failure::Config(format!("task {task_id} is not part of the protocol")))?;
    let run = claim_run(cfg, &ds)?;
    let ckpt = checkpoint.unwrap_or_else(|| task_ckpt_dir(&run, task_id).join("final"));
    let (state, meta, _) = restore(cfg, &ckpt)?;
    if meta.dataset_hash != ds.hash {
        return Err(Failure::Data(format!(
            "{}: checkpoint was trained on dataset {}, current dataset is {}",
            ckpt.display(),
            meta.dataset_hash,
            ds.hash
        )));
    }
    let (report, cands) = evaluate(cfg, &state, task).map_err(runtime)?;
    let stamp = Stamp {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    };
    let out = eval_dir(&run, task_id);
    write_eval(&out, &stamp, &report, &task.test, &cands).map_err(runtime)?;
    let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "task {task_id}: U-Recall {} mAP prev {} curr {} both {} ({})",
        f(report.u_recall),
        f(report.map_prev),
        f(report.map_curr),
        f(report.map_both),
        out.display()
    );
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig, sweep: Sweep) -> Result<(), Failure> {
    let ds = open_dataset(cfg)?;
    let run = claim_run(cfg, &ds)?;
    let cells = sweep_cells(cfg, sweep);
    let mut rows = Vec::new();
    for cell in &cells {
        let diags = cell.cfg.check();
        if !diags.is_empty() {
            return Err(ConfigError::Invalid(diags).into());
        }
        let labels: Vec<String> = cell.label.iter().map(|(k, v)| format!("{k}={v}")).collect();
        eprintln!("cell {}", labels.join(" "));
        let (_, result) = run_task_one(&cell.cfg, &ds.tasks).map_err(runtime)?;
        rows.push(ablation_row(cell, &result));
    }
    let path = run.join(format!("ablation_{}.csv", sweep.name()));
    write_csv(&path, &ablation_header(&cells), &rows).map_err(runtime)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: Option<PathBuf>) -> Result<(), Failure> {
    let summaries = collect(runs)?;
    let out = out.unwrap_or_else(|| runs[0].clone());
    write_summary(&out, &summaries)?;
    println!("{}", out.join("summary.md").display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::InitConfig { out } => cmd_init_config(out),
        Cmd::Generate { cfg } => cmd_generate(&load_config(&cfg)?),
        Cmd::Train { cfg, task, resume } => cmd_train(&load_config(&cfg)?, task, resume),
        Cmd::Eval { cfg, task, checkpoint } => cmd_eval(&load_config(&cfg)?, task, checkpoint),
        Cmd::Ablate { cfg, sweep } => cmd_ablate(&load_config(&cfg)?, sweep),
        Cmd::Report { runs, out } => cmd_report(&runs, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
