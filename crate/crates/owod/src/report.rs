//! Run directories and the consolidated summary across runs.
//!
//! A run directory holds `run.json` (config hash, seed, dataset hash) and one
//! `eval/task{t}/report.json` per evaluated task.

use std::fs;
use std::path::{Path, PathBuf};

use owod_core::eval::EvalReport;
use serde::{Deserialize, Serialize};

use crate::artifacts::{write_csv, ArtifactError};

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub config_hash: String,
    pub seed: u64,
    pub dataset_hash: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}: no evaluation reports")]
    Empty(PathBuf),
    #[error("dataset hash mismatch: {first} has {a}, {other} has {b}")]
    DatasetMismatch { first: PathBuf, a: String, other: PathBuf, b: String },
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ReportError> {
    let bytes = fs::read(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| ReportError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_run_info(dir: &Path) -> Result<RunInfo, ReportError> {
    read_json(&dir.join(RUN_FILE))
}

pub fn write_run_info(dir: &Path, info: &RunInfo) -> Result<(), ReportError> {
    let path = dir.join(RUN_FILE);
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    fs::write(&path, serde_json::to_vec_pretty(info).expect("run info serialises")).map_err(|source| ReportError::Io { path, source })
}

pub fn eval_dir(run: &Path, task_id: usize) -> PathBuf {
    run.join("eval").join(format!("task{task_id}"))
}

/// Evaluation reports of one run, ordered by task.
pub fn run_reports(dir: &Path) -> Result<Vec<EvalReport>, ReportError> {
    let eval = dir.join("eval");
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(&eval) {
        for e in entries.flatten() {
            let p = e.path().join("report.json");
            if p.is_file() {
                out.push(read_json::<EvalReport>(&p)?);
            }
        }
    }
    out.sort_by_key(|r| r.task_id);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub info: RunInfo,
    pub reports: Vec<EvalReport>,
}

pub const SUMMARY_HEADER: &[&str] = &[
    "config_hash", "seed", "dataset_hash", "task_id", "u_recall", "map_prev", "map_curr", "map_both",
];

/// Loads every run and refuses to merge runs built on different datasets.
pub fn collect(dirs: &[PathBuf]) -> Result<Vec<RunSummary>, ReportError> {
    let mut runs: Vec<RunSummary> = Vec::new();
    for d in dirs {
        let info = read_run_info(d)?;
        if let Some(first) = runs.first() {
            if first.info.dataset_hash != info.dataset_hash {
                return Err(ReportError::DatasetMismatch {
                    first: first.dir.clone(),
                    a: first.info.dataset_hash.clone(),
                    other: d.clone(),
                    b: info.dataset_hash,
                });
            }
        }
        let reports = run_reports(d)?;
        if reports.is_empty() {
            return Err(ReportError::Empty(d.clone()));
        }
        runs.push(RunSummary {
            dir: d.clone(),
            info,
            reports,
        });
    }
    Ok(runs)
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn pct(x: Option<f64>) -> String {
    x.map(|v| format!("{:.1}", 100.0 * v)).unwrap_or_else(|| "-".into())
}

pub fn summary_rows(runs: &[RunSummary]) -> Vec<Vec<String>> {
    runs.iter()
        .flat_map(|run| {
            run.reports.iter().map(move |r| {
                vec![
                    run.info.config_hash.clone(),
                    run.info.seed.to_string(),
                    run.info.dataset_hash.clone(),
                    r.task_id.to_string(),
                    cell(r.u_recall),
                    cell(r.map_prev),
                    cell(r.map_curr),
                    cell(r.map_both),
                ]
            })
        })
        .collect()
}

pub fn summary_markdown(runs: &[RunSummary]) -> String {
    let mut s = String::from("# Run summary\n\n");
    if let Some(r) = runs.first() {
        s.push_str(&format!("Dataset `{}`\n\n", r.info.dataset_hash));
    }
    s.push_str("| config | seed | task | U-Recall | mAP prev | mAP curr | mAP both | known QS/LQ | unknown QS/LQ |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for run in runs {
        for r in &run.reports {
            let share = |o: &Option<owod_core::tdqi::OriginShares>| match o {
                Some(o) => format!("{:.2}/{:.2}", o.query_selected, o.learnable),
                None => "-".into(),
            };
            s.push_str(&format!(
                "| `{}` | {} | {} | {} | {} | {} | {} | {} | {} |\n",
                &run.info.config_hash[..run.info.config_hash.len().min(12)],
                run.info.seed,
                r.task_id,
                pct(r.u_recall),
                pct(r.map_prev),
                pct(r.map_curr),
                pct(r.map_both),
                share(&r.attribution.known),
                share(&r.attribution.unknown),
            ));
        }
    }
    s
}

/// Writes `summary.md` and `summary.csv` into `out`.
pub fn write_summary(out: &Path, runs: &[RunSummary]) -> Result<(), ReportError> {
    fs::create_dir_all(out).map_err(|source| ReportError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write_csv(&out.join("summary.csv"), SUMMARY_HEADER, &summary_rows(runs))?;
    let md = out.join("summary.md");
    fs::write(&md, summary_markdown(runs)).map_err(|source| ReportError::Io { path: md, source })
}
