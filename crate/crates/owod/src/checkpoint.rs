//! Checkpoint archive: a directory holding `manifest.json` (hashes, task
//! position, tensor table, objectness statistics, exemplar store) and
//! `params.bin` (the tensor blob). Parameters are f32; statistics and
//! optimiser moments are f64 so a resumed run continues bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use owod_core::detector::ModelConfig;
use owod_core::numerics::blob::{find, read_tensor, BlobError, BlobWriter, TensorEntry};
use owod_core::numerics::Tensor;
use owod_core::objectness::GaussianStats;
use owod_core::protocol::{ExemplarStore, ObjectnessConfig, OptimConfig, Phase, TrainState};
use owod_core::tdqi::TdqiConfig;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed manifest: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error("parameter table mismatch: {0}")]
    Params(String),
    #[error("checkpoint was written under config {found}, current config is {expected}")]
    ConfigMismatch { expected: String, found: String },
}

/// Where a checkpoint sits in the protocol and what produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub task_id: usize,
    pub phase: Phase,
    /// Epochs completed in this session.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsHeader {
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
    pub step_count: u64,
    pub diagonal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub meta: CheckpointMeta,
    pub step: u64,
    pub optimizer_steps: u64,
    pub stats: StatsHeader,
    pub exemplars: ExemplarStore,
    pub tensors: Vec<TensorEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(dir: &Path, state: &TrainState, meta: &CheckpointMeta, exemplars: &ExemplarStore) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut w = BlobWriter::new();
    state.model.params().write_blob(&mut w)?;
    let d = state.stats.dim();
    w.push("stats.mean", &Tensor::new(&[d], state.stats.mean.clone()))?;
    w.push("stats.cov", &Tensor::new(&[d, d], state.stats.cov.clone()))?;
    for (i, name) in state.model.params().names().iter().enumerate() {
        let n = state.optimizer.m[i].len();
        w.push(&format!("optim.m.{name}"), &Tensor::new(&[n], state.optimizer.m[i].clone()))?;
        w.push(&format!("optim.v.{name}"), &Tensor::new(&[n], state.optimizer.v[i].clone()))?;
    }
    let (tensors, blob) = w.finish();
    let manifest = CheckpointManifest {
        meta: meta.clone(),
        step: state.step,
        optimizer_steps: state.optimizer.t,
        stats: StatsHeader {
            dim: d,
            momentum: state.stats.momentum,
            eps: state.stats.eps,
            step_count: state.stats.step_count,
            diagonal: state.stats.diagonal,
        },
        exemplars: exemplars.clone(),
        tensors,
    };
    let bpath = dir.join(BLOB);
    fs::write(&bpath, &blob).map_err(io_err(&bpath))?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest).expect("manifest serialises")).map_err(io_err(&mpath))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let mpath = dir.join(MANIFEST);
    let bytes = fs::read(&mpath).map_err(io_err(&mpath))?;
    serde_json::from_slice(&bytes).map_err(|source| CheckpointError::Manifest { path: mpath, source })
}

/// Everything restored from a checkpoint.
pub struct Restored {
    pub state: TrainState,
    pub meta: CheckpointMeta,
    pub exemplars: ExemplarStore,
}

/// Rebuilds the training state a checkpoint was written from. The model
/// layout comes from the given configs; every tensor must match it.
pub fn load_checkpoint(
    dir: &Path,
    model: &ModelConfig,
    tdqi: &TdqiConfig,
    obj: &ObjectnessConfig,
    optim: &OptimConfig,
) -> Result<Restored, CheckpointError> {
    let manifest = read_manifest(dir)?;
    let bpath = dir.join(BLOB);
    let blob = fs::read(&bpath).map_err(io_err(&bpath))?;
    let mut state = TrainState::new(model, tdqi, obj, optim.clone(), 0);
    let expected = state.model.params().len() + 2 + 2 * state.model.params().len();
    if manifest.tensors.len() != expected {
        return Err(CheckpointError::Params(format!(
            "{} tensors in the table, the configured model needs {expected}",
            manifest.tensors.len()
        )));
    }
    state
        .model
        .params_mut()
        .load_blob(&manifest.tensors, &blob)
        .map_err(|e| CheckpointError::Params(e.to_string()))?;
    let h = &manifest.stats;
    if h.dim != model.embed_dim {
        return Err(CheckpointError::Params(format!("statistics have dim {}, model has {}", h.dim, model.embed_dim)));
    }
    let mean: Tensor<f64> = read_tensor(find(&manifest.tensors, "stats.mean")?, &blob)?;
    let cov: Tensor<f64> = read_tensor(find(&manifest.tensors, "stats.cov")?, &blob)?;
    state.stats = GaussianStats {
        mean: mean.into_data(),
        cov: cov.into_data(),
        momentum: h.momentum,
        eps: h.eps,
        step_count: h.step_count,
        diagonal: h.diagonal,
    };
    let names: Vec<String> = state.model.params().names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let m: Tensor<f64> = read_tensor(find(&manifest.tensors, &format!("optim.m.{name}"))?, &blob)?;
        let v: Tensor<f64> = read_tensor(find(&manifest.tensors, &format!("optim.v.{name}"))?, &blob)?;
        if m.len() != state.optimizer.m[i].len() || v.len() != state.optimizer.v[i].len() {
            return Err(CheckpointError::Params(format!("optimiser moments of `{name}` have the wrong length")));
        }
        state.optimizer.m[i] = m.into_data();
        state.optimizer.v[i] = v.into_data();
    }
    state.optimizer.t = manifest.optimizer_steps;
    state.step = manifest.step;
    Ok(Restored {
        state,
        meta: manifest.meta,
        exemplars: manifest.exemplars,
    })
}
