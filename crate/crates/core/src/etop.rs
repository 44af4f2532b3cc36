//! Decoder-layer schedules for objectness and the inference assembly that
//! combines early-layer objectness with last-layer classes and boxes.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detector::{LayerOutputs, Origin};
use crate::numerics::{sigmoid, Real};
use crate::objectness::factorized_class_prob;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Objectness on layers `<= n`, class and box on every layer.
    Etop,
    /// Layers `<= n` learn objectness only (no class/box loss, frozen boxes);
    /// later layers learn class and box only.
    Dol,
    /// Objectness on every layer.
    None,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Etop => "etop",
            Schedule::Dol => "dol",
            Schedule::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownRule {
    /// Factorised unknown-column probability times objectness.
    Factorized,
    /// Objectness alone.
    Objectness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EtopConfig {
    pub stop_layer: usize,
    pub schedule: Schedule,
    /// Compute objectness on detached embeddings.
    #[serde(default)]
    pub detach_objectness: bool,
}

impl Default for EtopConfig {
    fn default() -> Self {
        Self {
            stop_layer: 2,
            schedule: Schedule::Etop,
            detach_objectness: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum EtopError {
    #[error("stop layer {n} outside [1, {layers}]")]
    StopLayer { n: usize, layers: usize },
    #[error("the dol schedule needs a stop layer below the last layer")]
    DolCoversAllLayers,
    #[error("layer {0} carries no objectness")]
    MissingObjectness(usize),
}

impl EtopConfig {
    pub fn validate(&self, layers: usize) -> Result<(), EtopError> {
        if self.stop_layer == 0 || self.stop_layer > layers {
            return Err(EtopError::StopLayer {
                n: self.stop_layer,
                layers,
            });
        }
        if self.schedule == Schedule::Dol && self.stop_layer == layers {
            return Err(EtopError::DolCoversAllLayers);
        }
        Ok(())
    }

    /// The last layer that predicts objectness (1-based).
    pub fn effective_stop(&self, layers: usize) -> usize {
        match self.schedule {
            Schedule::None => layers,
            _ => self.stop_layer,
        }
    }
}

/// Entry `l` (0-based) is true iff layer `l + 1` predicts objectness.
pub fn objectness_layer_mask(cfg: &EtopConfig, layers: usize) -> Vec<bool> {
    let n = cfg.effective_stop(layers);
    (1..=layers).map(|l| l <= n).collect()
}

/// Entry `l` is true iff layer `l + 1` receives class and box supervision.
pub fn supervised_layer_mask(cfg: &EtopConfig, layers: usize) -> Vec<bool> {
    match cfg.schedule {
        Schedule::Dol => (1..=layers).map(|l| l > cfg.stop_layer).collect(),
        _ => alloc::vec![true; layers],
    }
}

/// Entry `l` is true iff layer `l + 1` passes its reference box through
/// unchanged.
pub fn frozen_box_mask(cfg: &EtopConfig, layers: usize) -> Vec<bool> {
    match cfg.schedule {
        Schedule::Dol => (1..=layers).map(|l| l <= cfg.stop_layer).collect(),
        _ => alloc::vec![false; layers],
    }
}

/// One per-query detection candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub query: usize,
    pub bbox: [f64; 4],
    /// Factorised `(C + 1)` confidences.
    pub confidences: Vec<f64>,
    /// Best known class and its confidence.
    pub label: usize,
    pub known_confidence: f64,
    pub unknown_confidence: f64,
    pub objectness: f64,
    pub origin: Origin,
}

/// Last-layer class probabilities and boxes combined with objectness from the
/// schedule's stop layer. `known[c]` enables class column `c`; the last
/// column is the unknown column. Objectness is `exp(-temperature * d²)`.
pub fn assemble_inference<T: Real>(
    outputs: &LayerOutputs<T>,
    cfg: &EtopConfig,
    known: &[bool],
    temperature: f64,
    rule: UnknownRule,
) -> Result<Vec<Detection>, EtopError> {
    let layers = outputs.layers.len();
    let n = cfg.effective_stop(layers);
    let obj_layer = &outputs.layers[n - 1];
    let d2 = obj_layer.distance_sq.as_ref().ok_or(EtopError::MissingObjectness(n))?;
    let last = &outputs.layers[layers - 1];
    let width = last.class_logits.cols();
    assert_eq!(known.len() + 1, width, "known mask must cover every class column");
    let mut dets = Vec::with_capacity(last.class_logits.rows());
    for q in 0..last.class_logits.rows() {
        let obj = num_traits::Float::exp(-temperature * d2.data()[q].as_f64());
        let probs: Vec<f64> = last.class_logits.row(q).iter().map(|&x| sigmoid(x.as_f64())).collect();
        let conf = factorized_class_prob(&probs, obj);
        let mut label = 0;
        let mut best = f64::NEG_INFINITY;
        for (c, &on) in known.iter().enumerate() {
            if on && conf[c] > best {
                best = conf[c];
                label = c;
            }
        }
        let unknown_confidence = match rule {
            UnknownRule::Factorized => conf[width - 1],
            UnknownRule::Objectness => obj,
        };
        let b = last.boxes.row(q);
        dets.push(Detection {
            query: q,
            bbox: [b[0].as_f64(), b[1].as_f64(), b[2].as_f64(), b[3].as_f64()],
            confidences: conf,
            label,
            known_confidence: best.max(0.0),
            unknown_confidence,
            objectness: obj,
            origin: outputs.origins[q],
        });
    }
    Ok(dets)
}
