//! The query-based detector: strided conv backbone, single-scale deformable
//! encoder, encoder-side proposal heads and a decoder with per-layer heads and
//! iterative box refinement.

mod model;
mod params;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::{logit, sigmoid, Real, Tensor};

pub use model::{EncoderVars, ForwardCtx, ForwardVars, LayerVars, Model, Pinned};
pub use params::{ParamStore, ParamStoreError};

/// Reference boxes are clamped into `(EPS, 1 - EPS)` before taking logits.
pub const BOX_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub embed_dim: usize,
    /// Output channels of the first two backbone blocks; the third emits `embed_dim`.
    pub backbone_channels: [usize; 2],
    /// Stride of each of the three backbone blocks.
    pub backbone_strides: [usize; 3],
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub heads: usize,
    pub points: usize,
    pub ffn_dim: usize,
    /// Total class count over all tasks; heads have one extra column.
    pub num_classes: usize,
    /// Side length of the encoder token anchor boxes.
    pub anchor_size: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_width: 64,
            image_height: 64,
            embed_dim: 64,
            backbone_channels: [16, 32],
            backbone_strides: [2, 2, 1],
            encoder_layers: 2,
            decoder_layers: 6,
            num_queries: 100,
            heads: 4,
            points: 4,
            ffn_dim: 128,
            num_classes: 6,
            anchor_size: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(&'static str),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m| Err(ConfigError::Invalid(m));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be a positive multiple of heads");
        }
        if self.embed_dim % 4 != 0 {
            return bad("embed_dim must be divisible by 4 for the sine encodings");
        }
        if self.decoder_layers == 0 || self.num_queries == 0 || self.points == 0 || self.ffn_dim == 0 {
            return bad("decoder_layers, num_queries, points and ffn_dim must be positive");
        }
        if self.backbone_strides.iter().any(|&s| s == 0) || self.backbone_channels.iter().any(|&c| c == 0) {
            return bad("backbone strides and channels must be positive");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if !(self.anchor_size > 0.0 && self.anchor_size < 1.0) {
            return bad("anchor_size must lie in (0, 1)");
        }
        let (h, w) = self.feature_size();
        if h == 0 || w == 0 {
            return bad("image too small for the backbone strides");
        }
        Ok(())
    }

    /// Classes plus the unknown/background column.
    pub fn head_width(&self) -> usize {
        self.num_classes + 1
    }

    pub fn unknown_column(&self) -> usize {
        self.num_classes
    }

    /// Feature map `(height, width)` after the backbone.
    pub fn feature_size(&self) -> (usize, usize) {
        let mut h = self.image_height;
        let mut w = self.image_width;
        for &s in &self.backbone_strides {
            // 3x3 kernel, padding 1.
            h = if h == 0 { 0 } else { (h - 1) / s + 1 };
            w = if w == 0 { 0 } else { (w - 1) / s + 1 };
        }
        (h, w)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.feature_size();
        h * w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    QuerySelected,
    Learnable,
}

impl Origin {
    pub fn name(self) -> &'static str {
        match self {
            Origin::QuerySelected => "query_selected",
            Origin::Learnable => "learnable",
        }
    }
}

/// Value-level view of one decoder layer's heads.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutput<T> {
    /// `N x (C + 1)` raw logits.
    pub class_logits: Tensor<T>,
    /// `N x 4`, `(cx, cy, w, h)` in `(0, 1)`.
    pub boxes: Tensor<T>,
    /// `N x d`.
    pub embeddings: Tensor<T>,
    /// `N` squared Mahalanobis distances, present iff objectness is predicted here.
    pub distance_sq: Option<Tensor<T>>,
    /// `N` values `exp(-d²)` in `(0, 1]`, present iff objectness is predicted here.
    pub objectness: Option<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerOutputs<T> {
    pub layers: Vec<LayerOutput<T>>,
    pub origins: Vec<Origin>,
}

#[inline]
pub fn clamp_box(x: f64) -> f64 {
    x.clamp(BOX_EPS, 1.0 - BOX_EPS)
}

/// `sigmoid(logit(box) + delta)` per coordinate, with the logit clamped so
/// the result stays strictly inside (0, 1).
pub fn iterative_refine(reference: [f64; 4], delta: [f64; 4]) -> [f64; 4] {
    let hi = logit(1.0 - BOX_EPS);
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = sigmoid((logit(clamp_box(reference[k])) + delta[k]).clamp(-hi, hi));
    }
    out
}

/// Clamped logits of a box tensor.
pub(crate) fn box_logits<T: Real>(boxes: &Tensor<T>) -> Tensor<T> {
    Tensor::new(
        boxes.shape(),
        boxes
            .data()
            .iter()
            .map(|&b| T::of(logit(clamp_box(b.as_f64()))))
            .collect(),
    )
}
