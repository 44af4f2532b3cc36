//! Experiment runners shared by the command-line tool and the acceptance
//! suite: task training with exemplar fine-tuning, evaluation and ablation
//! sweeps.

use owod_core::etop::Schedule;
use owod_core::eval::{report_task, Candidate, EvalError, EvalReport};
use owod_core::protocol::{
    build_exemplar_store, finetune_scenes, run_session_from, EpochLog, ExemplarStore, Phase, ProtocolRunError, TrainSession, TrainState,
};
use owod_core::shapeworld::{Scene, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub fn fresh_state(cfg: &ExperimentConfig) -> TrainState {
    TrainState::new(
        &cfg.detector_core,
        &cfg.tdqi,
        &cfg.objectness,
        cfg.owod_protocol.optim.clone(),
        cfg.seed,
    )
}

/// Training sessions of one task in run order: training before fine-tuning.
pub fn task_sessions(cfg: &ExperimentConfig, task_id: usize) -> Vec<TrainSession> {
    let mut s: Vec<TrainSession> = cfg.sessions_for(task_id).into_iter().cloned().collect();
    s.sort_by_key(|s| match s.phase {
        Phase::Train => 0,
        Phase::Finetune => 1,
    });
    s
}

/// Exemplars of a task's introduced classes, drawn from its training split.
pub fn task_exemplars(cfg: &ExperimentConfig, task: &TaskSpec) -> ExemplarStore {
    let seed = cfg.seed ^ (0x5EED_0000 + task.classes.task_id as u64);
    build_exemplar_store(&task.train, &task.classes.introduced, cfg.owod_protocol.exemplars.k, seed)
}

/// Position to resume from: the session phase and the epochs it completed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResumePoint {
    pub phase: Phase,
    pub epochs_done: usize,
}

/// Runs every session of task `task_id`. Training sessions use the task's
/// training split; afterwards the exemplar store gains the task's introduced
/// classes, and fine-tuning sessions replay the store (plus, optionally, the
/// current split).
pub fn train_task(
    cfg: &ExperimentConfig,
    tasks: &[TaskSpec],
    task_id: usize,
    state: &mut TrainState,
    store: &mut ExemplarStore,
    resume: Option<ResumePoint>,
    mut on_epoch: impl FnMut(&TrainSession, &TrainState, &EpochLog),
) -> Result<Vec<EpochLog>, ProtocolRunError> {
    let task = tasks
        .iter()
        .find(|t| t.classes.task_id == task_id)
        .ok_or(ProtocolRunError::Session("task id not in the dataset"))?;
    let step_cfg = cfg.step_config();
    let mut logs = Vec::new();
    let mut stored = false;
    for session in task_sessions(cfg, task_id) {
        let start = match resume {
            Some(r) if r.phase == Phase::Finetune && session.phase == Phase::Train => continue,
            Some(r) if r.phase == session.phase => r.epochs_done,
            _ => 0,
        };
        let scenes: Vec<Scene> = match session.phase {
            Phase::Train => task.train.clone(),
            Phase::Finetune => {
                if !stored {
                    store.merge(&task_exemplars(cfg, task));
                    stored = true;
                }
                let pool: Vec<Scene> = tasks
                    .iter()
                    .filter(|t| t.classes.task_id <= task_id)
                    .flat_map(|t| t.train.iter().cloned())
                    .collect();
                let ex = &cfg.owod_protocol.exemplars;
                let current: &[Scene] = if ex.include_current { &task.train } else { &[] };
                finetune_scenes(store, &pool, current, ex.replay)
            }
        };
        if scenes.is_empty() {
            continue;
        }
        let out = run_session_from(state, &scenes, &task.classes, &session, &step_cfg, start, |st, log| on_epoch(&session, st, log))?;
        logs.extend(out);
    }
    if !stored {
        store.merge(&task_exemplars(cfg, task));
    }
    Ok(logs)
}

pub fn evaluate(cfg: &ExperimentConfig, state: &TrainState, task: &TaskSpec) -> Result<(EvalReport, Vec<Candidate>), EvalError> {
    report_task(&state.model, &state.stats, &cfg.etop, &task.test, &task.classes, &cfg.evaluation)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    TdqiRatio,
    EtopLayer,
    Schedule,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::TdqiRatio => "tdqi_ratio",
            Sweep::EtopLayer => "etop_layer",
            Sweep::Schedule => "schedule",
        }
    }

    pub fn parse(s: &str) -> Option<Sweep> {
        [Sweep::TdqiRatio, Sweep::EtopLayer, Sweep::Schedule].into_iter().find(|w| w.name() == s)
    }
}

/// One cell of a sweep and the published full-scale reference, shown for
/// context only.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: Vec<(&'static str, String)>,
    pub cfg: ExperimentConfig,
    pub reference: Option<(f64, f64)>,
}

/// The configurations of a sweep, all derived from `base` with the same
/// seed and training budget.
pub fn sweep_cells(base: &ExperimentConfig, sweep: Sweep) -> Vec<Cell> {
    let total = base.detector_core.num_queries;
    match sweep {
        Sweep::TdqiRatio => {
            // Published Task-1 numbers for 100 queries (U-Recall, mAP); the
            // pure-selection and pure-learnable rows come from the component
            // ablation.
            let reference = |qs: usize| match qs {
                0 => Some((20.9, 59.3)),
                10 => Some((20.4, 58.8)),
                20 => Some((20.3, 59.8)),
                30 => Some((19.4, 59.9)),
                50 => Some((18.8, 59.7)),
                100 => Some((17.9, 57.4)),
                _ => None,
            };
            [(10, 90), (20, 80), (30, 70), (50, 50), (80, 20), (100, 0), (0, 100)]
                .into_iter()
                .map(|(qs, _)| {
                    let n_qs = qs * total / 100;
                    let mut cfg = base.clone();
                    cfg.tdqi.n_qs = n_qs;
                    cfg.tdqi.n_lq = total - n_qs;
                    Cell {
                        label: vec![("n_qs", n_qs.to_string()), ("n_lq", (total - n_qs).to_string())],
                        cfg,
                        reference: reference(qs),
                    }
                })
                .collect()
        }
        Sweep::EtopLayer => {
            let reference = [(20.7, 58.0), (20.3, 59.8), (19.0, 59.7), (18.9, 60.1), (17.9, 59.8), (18.8, 60.4)];
            (1..=base.detector_core.decoder_layers)
                .map(|n| {
                    let mut cfg = base.clone();
                    cfg.etop.stop_layer = n;
                    cfg.etop.schedule = Schedule::Etop;
                    Cell {
                        label: vec![("stop_layer", n.to_string())],
                        cfg,
                        reference: reference.get(n - 1).copied(),
                    }
                })
                .collect()
        }
        Sweep::Schedule => [(Schedule::Etop, Some((20.3, 59.8))), (Schedule::Dol, Some((19.8, 58.2))), (Schedule::None, Some((18.8, 60.4)))]
            .into_iter()
            .map(|(schedule, reference)| {
                let mut cfg = base.clone();
                cfg.etop.schedule = schedule;
                Cell {
                    label: vec![("schedule", schedule.name().to_string()), ("stop_layer", cfg.etop.stop_layer.to_string())],
                    cfg,
                    reference,
                }
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub u_recall: Option<f64>,
    pub map: Option<f64>,
    pub report: EvalReport,
}

#[derive(Debug, thiserror::Error)]
pub enum CellError {
    #[error(transparent)]
    Train(#[from] ProtocolRunError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Trains a fresh model on Task 1 under `cfg` and evaluates it.
pub fn run_task_one(cfg: &ExperimentConfig, tasks: &[TaskSpec]) -> Result<(TrainState, CellResult), CellError> {
    let mut state = fresh_state(cfg);
    let mut store = ExemplarStore::default();
    train_task(cfg, tasks, 1, &mut state, &mut store, None, |_, _, _| {})?;
    let task = &tasks[0];
    let (report, _) = evaluate(cfg, &state, task)?;
    Ok((
        state,
        CellResult {
            u_recall: report.u_recall,
            map: report.map_both,
            report,
        },
    ))
}

pub fn ablation_header(cells: &[Cell]) -> Vec<&'static str> {
    let mut h = vec!["config_hash", "seed"];
    if let Some(c) = cells.first() {
        h.extend(c.label.iter().map(|(k, _)| *k));
    }
    h.extend(["u_recall", "map", "reference_u_recall", "reference_map"]);
    h
}

pub fn ablation_row(cell: &Cell, result: &CellResult) -> Vec<String> {
    let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut r = vec![cell.cfg.hash(), cell.cfg.seed.to_string()];
    r.extend(cell.label.iter().map(|(_, v)| v.clone()));
    r.push(o(result.u_recall));
    r.push(o(result.map));
    r.push(o(cell.reference.map(|p| p.0)));
    r.push(o(cell.reference.map(|p| p.1)));
    r
}
