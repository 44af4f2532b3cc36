//! Hungarian-matched detection loss over every decoder layer and the encoder
//! proposals: focal class loss, L1 and gIoU box losses, and the objectness
//! loss on the layers the schedule routes it to.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detector::{ForwardVars, LayerVars};
use crate::etop::{objectness_layer_mask, supervised_layer_mask, EtopConfig};
use crate::matching::{hungarian_match, match_cost, CostWeights, MatchError};
use crate::numerics::linalg::Cholesky;
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::objectness::{objectness_loss, GaussianStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub weights: CostWeights,
    /// Weight of the summed squared Mahalanobis distances.
    pub objectness_weight: f64,
    /// Hungarian-matched loss on encoder proposals.
    pub encoder_aux: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: CostWeights::default(),
            objectness_weight: 0.005,
            encoder_aux: true,
        }
    }
}

/// Unweighted components of one layer; weighted totals live on the breakdown.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub l_class: f64,
    pub l_l1: f64,
    pub l_giou: f64,
    pub l_obj: Option<f64>,
    /// Whether class and box terms enter the total.
    pub supervised: bool,
    /// `(query, gt)` pairs.
    pub matches: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub layers: Vec<LayerLoss>,
    pub encoder: Option<LayerLoss>,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted total from the components.
    pub fn weighted_total(&self, cfg: &LossConfig) -> f64 {
        let w = &cfg.weights;
        let box_terms = |l: &LayerLoss| w.class * l.l_class + w.l1 * l.l_l1 + w.giou * l.l_giou;
        let mut t = 0.0;
        for l in &self.layers {
            if l.supervised {
                t += box_terms(l);
            }
            t += cfg.objectness_weight * l.l_obj.unwrap_or(0.0);
        }
        if let Some(e) = &self.encoder {
            t += box_terms(e);
        }
        t
    }

    /// Mean of the per-image breakdowns, keeping the first image's matches.
    pub fn average(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let mut out = parts.first().cloned().unwrap_or_default();
        let avg_layer = |dst: &mut LayerLoss, f: &dyn Fn(usize) -> LayerLoss| {
            let mut acc = LayerLoss {
                supervised: dst.supervised,
                matches: core::mem::take(&mut dst.matches),
                ..LayerLoss::default()
            };
            let mut obj = dst.l_obj.map(|_| 0.0);
            for i in 0..parts.len() {
                let l = f(i);
                acc.l_class += l.l_class / n;
                acc.l_l1 += l.l_l1 / n;
                acc.l_giou += l.l_giou / n;
                if let (Some(o), Some(v)) = (obj.as_mut(), l.l_obj) {
                    *o += v / n;
                }
            }
            acc.l_obj = obj;
            *dst = acc;
        };
        for (k, layer) in out.layers.iter_mut().enumerate() {
            avg_layer(layer, &|i| parts[i].layers[k].clone());
        }
        if let Some(e) = out.encoder.as_mut() {
            avg_layer(e, &|i| parts[i].encoder.clone().unwrap_or_default());
        }
        out.total = parts.iter().map(|p| p.total).sum::<f64>() / n;
        out
    }
}

/// Ground truth of one image: `(class, box)` with classes indexing head columns.
pub type Targets = [(usize, [f64; 4])];

/// `Σ |pred - gt|` over the matched rows.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>) -> Var {
    let t = g.constant(gt.clone());
    let d = g.sub(pred, t);
    let a = g.abs(d);
    g.sum(a)
}

/// Corner coordinates `(x1, y1, x2, y2)` as four `m x 1` columns.
fn corners<T: Real>(g: &mut Graph<T>, b: Var) -> [Var; 4] {
    let cx = g.slice_cols(b, 0, 1);
    let cy = g.slice_cols(b, 1, 2);
    let w = g.slice_cols(b, 2, 3);
    let h = g.slice_cols(b, 3, 4);
    let hw = g.scale(w, T::of(0.5));
    let hh = g.scale(h, T::of(0.5));
    [g.sub(cx, hw), g.sub(cy, hh), g.add(cx, hw), g.add(cy, hh)]
}

/// Per-row generalised IoU between `m x 4` predicted and target boxes.
pub fn giou_rows<T: Real>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>) -> Var {
    let t = g.constant(gt.clone());
    let [px1, py1, px2, py2] = corners(g, pred);
    let [gx1, gy1, gx2, gy2] = corners(g, t);
    let area = |g: &mut Graph<T>, x1, y1, x2, y2| {
        let w = g.sub(x2, x1);
        let h = g.sub(y2, y1);
        g.mul(w, h)
    };
    let ap = area(g, px1, py1, px2, py2);
    let ag = area(g, gx1, gy1, gx2, gy2);
    let ix1 = g.maximum(px1, gx1);
    let iy1 = g.maximum(py1, gy1);
    let ix2 = g.minimum(px2, gx2);
    let iy2 = g.minimum(py2, gy2);
    let iw = g.sub(ix2, ix1);
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1);
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih);
    let sum = g.add(ap, ag);
    let union = g.sub(sum, inter);
    let iou = g.div(inter, union);
    let ex1 = g.minimum(px1, gx1);
    let ey1 = g.minimum(py1, gy1);
    let ex2 = g.maximum(px2, gx2);
    let ey2 = g.maximum(py2, gy2);
    let enclose = area(g, ex1, ey1, ex2, ey2);
    let gap = g.sub(enclose, union);
    let frac = g.div(gap, enclose);
    g.sub(iou, frac)
}

/// `Σ (1 - gIoU)` over the matched rows.
pub fn giou_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>) -> Var {
    let m = gt.rows();
    let r = giou_rows(g, pred, gt);
    let s = g.sum(r);
    let s = g.neg(s);
    g.add_scalar(s, T::of(m as f64))
}

/// Optimal `(query, gt)` assignment for one prediction set.
pub fn match_predictions<T: Real>(
    logits: &Tensor<T>,
    boxes: &Tensor<T>,
    gt: &Targets,
    w: &CostWeights,
) -> Result<Vec<(usize, usize)>, MatchError> {
    let n = logits.rows();
    let l: Vec<f64> = logits.data().iter().map(|x| x.as_f64()).collect();
    let b: Vec<f64> = boxes.data().iter().map(|x| x.as_f64()).collect();
    let cost = match_cost(&l, logits.cols(), &b, gt, w);
    hungarian_match(&cost, n, gt.len())
}

/// Focal, L1 and gIoU terms of one prediction set against its assignment.
/// Returns the unweighted parts and their weighted graph sum.
#[allow(clippy::too_many_arguments)]
fn set_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    boxes: Var,
    gt: &Targets,
    matches: &[(usize, usize)],
    columns: &[bool],
    w: &CostWeights,
    norm: f64,
) -> (Var, [f64; 3]) {
    let (n, k) = (g.shape(logits)[0], g.shape(logits)[1]);
    let mut targets = vec![T::zero(); n * k];
    for &(q, j) in matches {
        let c = gt[j].0;
        assert!(columns[c], "class {} is not eligible for positive targets", c);
        targets[q * k + c] = T::one();
    }
    let inv = T::of(1.0 / norm);
    let cls = g.sigmoid_focal_sum(logits, &targets, columns, w.focal_alpha, w.focal_gamma);
    let cls = g.scale(cls, inv);
    let parts_cls = g.value(cls).data()[0].as_f64();
    let mut total = g.scale(cls, T::of(w.class));
    let (mut l1v, mut giv) = (0.0, 0.0);
    if !matches.is_empty() {
        let rows: Vec<usize> = matches.iter().map(|m| m.0).collect();
        let tgt: Vec<f64> = matches.iter().flat_map(|m| gt[m.1].1).collect();
        let tgt = Tensor::<T>::from_f64(&[matches.len(), 4], &tgt);
        let pred = g.gather_rows(boxes, &rows);
        let l1 = l1_loss(g, pred, &tgt);
        let l1 = g.scale(l1, inv);
        let gi = giou_loss(g, pred, &tgt);
        let gi = g.scale(gi, inv);
        l1v = g.value(l1).data()[0].as_f64();
        giv = g.value(gi).data()[0].as_f64();
        let a = g.scale(l1, T::of(w.l1));
        let b = g.scale(gi, T::of(w.giou));
        total = g.add(total, a);
        total = g.add(total, b);
    }
    (total, [parts_cls, l1v, giv])
}

/// Statistics used by the objectness loss.
pub struct ObjectnessCtx<'a> {
    pub stats: &'a GaussianStats,
    pub factor: &'a Cholesky,
}

/// Loss of one image. `columns[c]` enables head column `c` in the class loss
/// (known classes plus the unknown column); ground-truth classes must be
/// enabled. Class and box terms are normalised by `max(G, 1)`.
pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    fwd: &ForwardVars,
    gt: &Targets,
    columns: &[bool],
    cfg: &LossConfig,
    etop: &EtopConfig,
    obj: &ObjectnessCtx,
) -> Result<(Var, LossBreakdown), MatchError> {
    let layers = fwd.layers.len();
    let obj_mask = objectness_layer_mask(etop, layers);
    let sup_mask = supervised_layer_mask(etop, layers);
    let norm = (gt.len() as f64).max(1.0);
    let w = &cfg.weights;
    let zero = g.constant(Tensor::scalar(T::zero()));
    let mut total = zero;
    let mut breakdown = LossBreakdown::default();
    for (l, lv) in fwd.layers.iter().enumerate() {
        let LayerVars {
            logits,
            boxes,
            embeddings,
            ..
        } = *lv;
        let matches = match_predictions(g.value(logits), g.value(boxes), gt, w)?;
        let mut entry = LayerLoss {
            supervised: sup_mask[l],
            matches: matches.clone(),
            ..LayerLoss::default()
        };
        if sup_mask[l] {
            let (t, parts) = set_loss(g, logits, boxes, gt, &matches, columns, w, norm);
            [entry.l_class, entry.l_l1, entry.l_giou] = parts;
            total = g.add(total, t);
        }
        if obj_mask[l] {
            let value = if matches.is_empty() {
                0.0
            } else {
                let rows: Vec<usize> = matches.iter().map(|m| m.0).collect();
                let src = if etop.detach_objectness { g.detach(embeddings) } else { embeddings };
                let z = g.gather_rows(src, &rows);
                let lo = objectness_loss(g, z, obj.stats, obj.factor);
                let lo = g.scale(lo, T::of(1.0 / norm));
                let v = g.value(lo).data()[0].as_f64();
                let weighted = g.scale(lo, T::of(cfg.objectness_weight));
                total = g.add(total, weighted);
                v
            };
            entry.l_obj = Some(value);
        }
        breakdown.layers.push(entry);
    }
    if cfg.encoder_aux {
        if let Some(enc) = &fwd.encoder {
            let matches = match_predictions(g.value(enc.logits), g.value(enc.boxes), gt, w)?;
            let (t, parts) = set_loss(g, enc.logits, enc.boxes, gt, &matches, columns, w, norm);
            total = g.add(total, t);
            breakdown.encoder = Some(LayerLoss {
                l_class: parts[0],
                l_l1: parts[1],
                l_giou: parts[2],
                l_obj: None,
                supervised: true,
                matches,
            });
        }
    }
    breakdown.total = g.value(total).data()[0].as_f64();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::giou;

    #[test]
    fn giou_rows_match_scalar() {
        let a = [0.4, 0.5, 0.2, 0.3, 0.6, 0.6, 0.1, 0.1];
        let b = [0.45, 0.5, 0.25, 0.2, 0.1, 0.1, 0.1, 0.1];
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(&[2, 4], a.to_vec()));
        let r = giou_rows(&mut g, p, &Tensor::new(&[2, 4], b.to_vec()));
        let v = g.value(r).data().to_vec();
        for i in 0..2 {
            let want = giou(a[4 * i..4 * i + 4].try_into().unwrap(), b[4 * i..4 * i + 4].try_into().unwrap());
            assert!((v[i] - want).abs() < 1e-12);
        }
    }
}
