//! CSV and JSON-lines artifacts. Every row carries the config hash and the
//! master seed of the run that produced it.

use std::fs;
use std::path::Path;

use owod_core::eval::{Candidate, EvalReport, Label};
use owod_core::protocol::{EpochLog, Phase};
use owod_core::shapeworld::Scene;
use owod_core::tdqi::OriginShares;
use serde::{Deserialize, Serialize};

/// Provenance stamped on every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Train => "train",
        Phase::Finetune => "finetune",
    }
}

/// Writes `header` and `rows` as CSV, creating parent directories.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), ArtifactError> {
    let p = path.display().to_string();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| ArtifactError::Io { path: p.clone(), source })?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|source| ArtifactError::Csv { path: p.clone(), source })?;
    w.write_record(header).map_err(|source| ArtifactError::Csv { path: p.clone(), source })?;
    for r in rows {
        w.write_record(r).map_err(|source| ArtifactError::Csv { path: p.clone(), source })?;
    }
    w.flush().map_err(|source| ArtifactError::Io { path: p, source })
}

pub const LOSS_HEADER: &[&str] = &[
    "config_hash", "seed", "task_id", "phase", "epoch", "step", "lr", "loss", "grad_norm", "l_class", "l_l1", "l_giou", "l_obj",
];

/// One row per optimisation step; loss components are summed over layers.
pub fn loss_rows(stamp: &Stamp, log: &EpochLog) -> Vec<Vec<String>> {
    log.steps
        .iter()
        .map(|s| {
            let b = &s.breakdown;
            let all = b.layers.iter().chain(b.encoder.iter());
            let (mut c, mut l1, mut gi, mut ob) = (0.0, 0.0, 0.0, 0.0);
            for l in all {
                if l.supervised {
                    c += l.l_class;
                    l1 += l.l_l1;
                    gi += l.l_giou;
                }
                ob += l.l_obj.unwrap_or(0.0);
            }
            vec![
                stamp.config_hash.clone(),
                stamp.seed.to_string(),
                log.task_id.to_string(),
                phase_name(log.phase).to_string(),
                log.epoch.to_string(),
                s.step.to_string(),
                s.lr.to_string(),
                s.loss.to_string(),
                s.grad_norm.to_string(),
                c.to_string(),
                l1.to_string(),
                gi.to_string(),
                ob.to_string(),
            ]
        })
        .collect()
}

pub const METRIC_HEADER: &[&str] = &["config_hash", "seed", "task_id", "metric", "value"];

/// Flat `(task, metric)` rows; absent metrics are omitted.
pub fn metric_rows(stamp: &Stamp, r: &EvalReport) -> Vec<Vec<String>> {
    [
        ("u_recall", r.u_recall),
        ("map_prev", r.map_prev),
        ("map_curr", r.map_curr),
        ("map_both", r.map_both),
    ]
    .iter()
    .filter_map(|(name, v)| {
        v.map(|v| {
            vec![
                stamp.config_hash.clone(),
                stamp.seed.to_string(),
                r.task_id.to_string(),
                name.to_string(),
                v.to_string(),
            ]
        })
    })
    .collect()
}

pub const CLASS_HEADER: &[&str] = &["config_hash", "seed", "task_id", "class_id", "group", "ap", "num_gt"];

pub fn class_rows(stamp: &Stamp, r: &EvalReport) -> Vec<Vec<String>> {
    r.per_class
        .iter()
        .map(|c| {
            vec![
                stamp.config_hash.clone(),
                stamp.seed.to_string(),
                r.task_id.to_string(),
                c.class_id.to_string(),
                serde_json::to_value(c.group).unwrap().as_str().unwrap().to_string(),
                opt(c.ap),
                c.num_gt.to_string(),
            ]
        })
        .collect()
}

pub const ATTRIBUTION_HEADER: &[&str] = &["config_hash", "seed", "task_id", "label", "query_selected", "learnable", "count"];

pub fn attribution_rows(stamp: &Stamp, r: &EvalReport) -> Vec<Vec<String>> {
    let row = |label: &str, s: &Option<OriginShares>| match s {
        Some(s) => vec![
            stamp.config_hash.clone(),
            stamp.seed.to_string(),
            r.task_id.to_string(),
            label.to_string(),
            s.query_selected.to_string(),
            s.learnable.to_string(),
            s.count.to_string(),
        ],
        None => vec![
            stamp.config_hash.clone(),
            stamp.seed.to_string(),
            r.task_id.to_string(),
            label.to_string(),
            String::new(),
            String::new(),
            "0".to_string(),
        ],
    };
    vec![row("known", &r.attribution.known), row("unknown", &r.attribution.unknown)]
}

/// One line of the detection dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scene_id: String,
    /// Class id, or `"unknown"`.
    pub label: String,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub origin: String,
    pub config_hash: String,
    pub seed: u64,
}

pub fn detection_records(stamp: &Stamp, scenes: &[Scene], cands: &[Candidate]) -> Vec<DetectionRecord> {
    cands
        .iter()
        .map(|c| DetectionRecord {
            scene_id: scenes[c.image].scene_id.clone(),
            label: match c.label {
                Label::Known(k) => k.to_string(),
                Label::Unknown => "unknown".to_string(),
            },
            confidence: c.confidence,
            bbox: c.bbox,
            origin: c.origin.name().to_string(),
            config_hash: stamp.config_hash.clone(),
            seed: stamp.seed,
        })
        .collect()
}

/// Writes the report JSON, metric/class/attribution CSVs and the detection
/// dump of one evaluation into `dir`.
pub fn write_eval(dir: &Path, stamp: &Stamp, report: &EvalReport, scenes: &[Scene], cands: &[Candidate]) -> Result<(), ArtifactError> {
    fs::create_dir_all(dir).map_err(|source| ArtifactError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    #[derive(Serialize)]
    struct Stamped<'a> {
        config_hash: &'a str,
        seed: u64,
        #[serde(flatten)]
        report: &'a EvalReport,
    }
    let json = serde_json::to_vec_pretty(&Stamped {
        config_hash: &stamp.config_hash,
        seed: stamp.seed,
        report,
    })
    .expect("report serialises");
    let rp = dir.join("report.json");
    fs::write(&rp, json).map_err(|source| ArtifactError::Io {
        path: rp.display().to_string(),
        source,
    })?;
    write_csv(&dir.join("metrics.csv"), METRIC_HEADER, &metric_rows(stamp, report))?;
    write_csv(&dir.join("per_class.csv"), CLASS_HEADER, &class_rows(stamp, report))?;
    write_csv(&dir.join("attribution.csv"), ATTRIBUTION_HEADER, &attribution_rows(stamp, report))?;
    let dp = dir.join("detections.jsonl");
    let mut bytes = Vec::new();
    for r in detection_records(stamp, scenes, cands) {
        bytes.extend(serde_json::to_vec(&r).expect("record serialises"));
        bytes.push(b'\n');
    }
    fs::write(&dp, bytes).map_err(|source| ArtifactError::Io {
        path: dp.display().to_string(),
        source,
    })
}
