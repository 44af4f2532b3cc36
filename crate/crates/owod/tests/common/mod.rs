#![allow(dead_code)]

use std::path::Path;

use owod::config::{default_sessions, ExperimentConfig};
use owod_core::shapeworld::{build_task_splits, TaskSpec};

/// A config small enough to train in seconds: 32x32 scenes, a handful of
/// scenes per split, d = 16 and 10 queries.
pub fn tiny_config(root: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.shapeworld_data.root = root.display().to_string();
    let p = &mut c.shapeworld_data.protocol;
    p.scene.width = 32;
    p.scene.height = 32;
    p.scene.size_range = [6, 12];
    p.scene.count_range = [1, 3];
    p.train_per_task = 6;
    p.val_per_task = 2;
    p.test_per_task = 3;
    let m = &mut c.detector_core;
    m.image_width = 32;
    m.image_height = 32;
    m.embed_dim = 16;
    m.ffn_dim = 32;
    m.backbone_channels = [4, 8];
    m.encoder_layers = 1;
    m.heads = 2;
    m.points = 2;
    m.num_queries = 10;
    c.tdqi.n_qs = 2;
    c.tdqi.n_lq = 8;
    c.owod_protocol.sessions = default_sessions(3, 1e-3, (2, 1), (1, 1), 0);
    c.owod_protocol.exemplars.k = 2;
    c
}

pub fn tiny_tasks(cfg: &ExperimentConfig) -> Vec<TaskSpec> {
    build_task_splits(&cfg.shapeworld_data.protocol).unwrap()
}
