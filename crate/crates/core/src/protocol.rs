//! The incremental training loop: optimiser, training sessions, exemplar
//! replay and the per-step alternation between gradient updates and the
//! objectness statistics.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{ForwardCtx, Model, ModelConfig};
use crate::etop::EtopConfig;
use crate::loss::{detection_loss, LossBreakdown, LossConfig, ObjectnessCtx};
use crate::matching::MatchError;
use crate::numerics::{Graph, Real, Tensor};
use crate::objectness::{ema_update, GaussianStats, ObjectnessError};
use crate::shapeworld::{Scene, TaskClasses};
use crate::tdqi::TdqiConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSession {
    pub task_id: usize,
    pub phase: Phase,
    pub epochs: usize,
    pub base_lr: f64,
    /// Epoch (0-based) from which the learning rate is multiplied by `lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips.
    #[serde(default)]
    pub flip: bool,
}

impl TrainSession {
    pub fn validate(&self) -> Result<(), ProtocolRunError> {
        if self.phase == Phase::Finetune && self.task_id < 2 {
            return Err(ProtocolRunError::Session("finetune sessions need task_id >= 2"));
        }
        if self.task_id == 0 || self.batch_size == 0 {
            return Err(ProtocolRunError::Session("task_id and batch_size must be positive"));
        }
        if !(self.base_lr > 0.0) || !(self.lr_drop_factor > 0.0) {
            return Err(ProtocolRunError::Session("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.base_lr * self.lr_drop_factor
        } else {
            self.base_lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: 0.1,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new<T: Real>(cfg: OptimConfig, params: &[Tensor<T>]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    /// One update; `grads[i]` is `None` for parameters the loss does not reach.
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Option<Vec<f64>>], lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - Float::powi(c.beta1, self.t as i32);
        let bc2 = 1.0 - Float::powi(c.beta2, self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let upd = (m[j] / bc1) / (Float::sqrt(v[j] / bc2) + c.eps);
                let w = x.as_f64();
                *x = T::of(w - lr * (upd + c.weight_decay * w));
            }
        }
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum();
    let norm = Float::sqrt(sq);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ProtocolRunError {
    #[error("invalid session: {0}")]
    Session(&'static str),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Objectness(#[from] ObjectnessError),
    #[error("training diverged: non-finite loss at step {0}")]
    Diverged(u64),
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model<f32>,
    pub stats: GaussianStats,
    pub optimizer: AdamW,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectnessConfig {
    pub momentum: f64,
    pub eps: f64,
    /// Full or diagonal covariance.
    #[serde(default)]
    pub diagonal: bool,
    /// Decoder layer (1-based) whose matched embeddings feed the statistics;
    /// defaults to the schedule's stop layer.
    #[serde(default)]
    pub stats_layer: Option<usize>,
}

impl Default for ObjectnessConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-6,
            diagonal: false,
            stats_layer: None,
        }
    }
}

/// Static settings shared by every training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepConfig {
    pub loss: LossConfig,
    pub etop: EtopConfig,
    pub objectness: ObjectnessConfig,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, tdqi: &TdqiConfig, obj: &ObjectnessConfig, optim: OptimConfig, seed: u64) -> Self {
        let model = Model::new(model_cfg, tdqi, seed);
        let optimizer = AdamW::new(optim, model.params().tensors());
        let mut stats = GaussianStats::new(model_cfg.embed_dim, obj.momentum, obj.eps);
        stats.diagonal = obj.diagonal;
        Self {
            model,
            stats,
            optimizer,
            step: 0,
        }
    }
}

/// Head-column masks for a task: `(selection, loss)`. Selection ranks known
/// classes only; the loss also covers the unknown column.
pub fn class_masks(classes: &TaskClasses, num_classes: usize) -> (Vec<bool>, Vec<bool>) {
    let known: Vec<bool> = (0..num_classes).map(|c| classes.is_known(c)).collect();
    let mut loss = known.clone();
    loss.push(true);
    (known, loss)
}

/// Targets of one scene: annotations whose class is eligible.
pub fn scene_targets(scene: &Scene, eligible: &[bool]) -> Vec<(usize, [f64; 4])> {
    scene
        .annotations
        .iter()
        .filter(|a| eligible.get(a.class_id).copied().unwrap_or(false))
        .map(|a| (a.class_id, a.bbox))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub breakdown: LossBreakdown,
}

/// One optimisation step on a batch, followed by the statistics update from
/// the matched embeddings of the statistics layer.
pub fn train_step(
    state: &mut TrainState,
    batch: &[Scene],
    classes: &TaskClasses,
    cfg: &StepConfig,
    lr: f64,
) -> Result<StepLog, ProtocolRunError> {
    let num_classes = state.model.config().num_classes;
    let layers = state.model.config().decoder_layers;
    let (known, columns) = class_masks(classes, num_classes);
    let factor = state.stats.factor()?;
    let mut g = Graph::<f32>::new();
    let pv = state.model.register(&mut g, true);
    let ctx = ForwardCtx {
        known: &known,
        etop: &cfg.etop,
        stats: Some((&state.stats, &factor)),
    };
    let obj_ctx = ObjectnessCtx {
        stats: &state.stats,
        factor: &factor,
    };
    let stats_layer = cfg.objectness.stats_layer.unwrap_or_else(|| cfg.etop.effective_stop(layers));
    let mut total = None;
    let mut parts = Vec::with_capacity(batch.len());
    let mut matched_rows: Vec<f64> = Vec::new();
    for scene in batch {
        let image = scene.image::<f32>();
        let fwd = state.model.forward(&mut g, &pv, &image, &ctx);
        let gt = scene_targets(scene, &known);
        let (loss, bd) = detection_loss(&mut g, &fwd, &gt, &columns, &cfg.loss, &cfg.etop, &obj_ctx)?;
        let emb = g.value(fwd.layers[stats_layer - 1].embeddings);
        for &(q, _) in &bd.layers[stats_layer - 1].matches {
            matched_rows.extend(emb.row(q).iter().map(|x| x.as_f64()));
        }
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss),
        });
        parts.push(bd);
    }
    let total = total.expect("empty batch");
    let total = g.scale(total, 1.0 / batch.len() as f32);
    let loss = g.value(total).data()[0] as f64;
    if !loss.is_finite() {
        return Err(ProtocolRunError::Diverged(state.step));
    }
    let mut grads = g.backward(total);
    let mut gv: Vec<Option<Vec<f64>>> = pv
        .iter()
        .map(|&v| grads.take(v).map(|x| x.into_iter().map(|e| e as f64).collect()))
        .collect();
    let grad_norm = clip_grad_norm(&mut gv, state.optimizer.cfg.grad_clip);
    state.optimizer.step(state.model.params_mut().tensors_mut(), &gv, lr);
    // Statistics are read-only during the loss and refreshed only now.
    state.stats = ema_update(&state.stats, &matched_rows)?;
    state.step += 1;
    Ok(StepLog {
        step: state.step,
        loss,
        grad_norm,
        lr,
        breakdown: LossBreakdown::average(&parts),
    })
}

/// Per-epoch summary handed to the caller (checkpointing, logging).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task_id: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: Vec<StepLog>,
}

/// Trains on `scenes` for the session's epochs. `on_epoch` runs after each
/// epoch with the current state.
pub fn run_session(
    state: &mut TrainState,
    scenes: &[Scene],
    classes: &TaskClasses,
    session: &TrainSession,
    cfg: &StepConfig,
    on_epoch: impl FnMut(&TrainState, &EpochLog),
) -> Result<Vec<EpochLog>, ProtocolRunError> {
    run_session_from(state, scenes, classes, session, cfg, 0, on_epoch)
}

/// [`run_session`] resumed after `start_epoch` completed epochs. The data
/// order of the skipped epochs is replayed so the result matches an
/// uninterrupted run.
pub fn run_session_from(
    state: &mut TrainState,
    scenes: &[Scene],
    classes: &TaskClasses,
    session: &TrainSession,
    cfg: &StepConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&TrainState, &EpochLog),
) -> Result<Vec<EpochLog>, ProtocolRunError> {
    session.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(session.seed);
    let mut logs = Vec::with_capacity(session.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..session.epochs {
        order.shuffle(&mut rng);
        if epoch < start_epoch {
            if session.flip {
                for _ in 0..order.len() {
                    rng.gen_bool(0.5);
                }
            }
            continue;
        }
        let lr = session.lr_at(epoch);
        let mut steps = Vec::new();
        for chunk in order.chunks(session.batch_size) {
            let batch: Vec<Scene> = chunk
                .iter()
                .map(|&i| {
                    if session.flip && rng.gen_bool(0.5) {
                        scenes[i].flipped_horizontally()
                    } else {
                        scenes[i].clone()
                    }
                })
                .collect();
            steps.push(train_step(state, &batch, classes, cfg, lr)?);
        }
        let mean_loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len().max(1) as f64;
        let log = EpochLog {
            task_id: session.task_id,
            phase: session.phase,
            epoch,
            mean_loss,
            steps,
        };
        on_epoch(state, &log);
        logs.push(log);
    }
    Ok(logs)
}

/// Replay exemplars: per known class, scene ids containing that class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub capacity: usize,
    pub per_class: BTreeMap<usize, Vec<String>>,
}

impl ExemplarStore {
    /// Distinct scene ids across all classes, in first-seen order.
    pub fn scene_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for ids in self.per_class.values() {
            for id in ids {
                if !out.contains(id) {
                    out.push(id.clone());
                }
            }
        }
        out
    }

    /// Adds the exemplars of another store, keeping existing classes.
    pub fn merge(&mut self, other: &ExemplarStore) {
        for (c, ids) in &other.per_class {
            self.per_class.entry(*c).or_insert_with(|| ids.clone());
        }
    }
}

/// Up to `k` scenes per class of `classes`, drawn uniformly without
/// replacement under `seed` from scenes annotated with that class.
pub fn build_exemplar_store(scenes: &[Scene], classes: &[usize], k: usize, seed: u64) -> ExemplarStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = BTreeMap::new();
    for &c in classes {
        let pool: Vec<&Scene> = scenes.iter().filter(|s| s.annotations.iter().any(|a| a.class_id == c)).collect();
        let picked: Vec<String> = pool.choose_multiple(&mut rng, k.min(pool.len())).map(|s| s.scene_id.clone()).collect();
        per_class.insert(c, picked);
    }
    ExemplarStore { capacity: k, per_class }
}

/// Fine-tuning data: the exemplar scenes (repeated `replay` times) followed by
/// the current-task scenes.
pub fn finetune_scenes(store: &ExemplarStore, pool: &[Scene], current: &[Scene], replay: usize) -> Vec<Scene> {
    let ids = store.scene_ids();
    let ex: Vec<&Scene> = ids.iter().filter_map(|id| pool.iter().find(|s| &s.scene_id == id)).collect();
    let mut out = Vec::with_capacity(ex.len() * replay + current.len());
    for _ in 0..replay {
        out.extend(ex.iter().map(|s| (*s).clone()));
    }
    out.extend(current.iter().cloned());
    out
}
