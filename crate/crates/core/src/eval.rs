//! mAP@0.5 over previously / currently / all known classes and unknown recall.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::boxes::iou;
use crate::detector::{ForwardCtx, Model, Origin};
use crate::etop::{assemble_inference, Detection, EtopConfig, EtopError, UnknownRule};
use crate::numerics::Real;
use crate::objectness::{GaussianStats, ObjectnessError};
use crate::shapeworld::{Scene, TaskClasses};
use crate::tdqi::{origin_attribution, Attribution};

/// Label emitted for a candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Known(usize),
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub image: usize,
    pub query: usize,
    pub label: Label,
    pub confidence: f64,
    pub bbox: [f64; 4],
    pub origin: Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    /// Candidates kept per image after ranking all `(query, label)` pairs.
    pub top_n: usize,
    /// Optional further cap on unknown candidates per image for U-Recall.
    #[serde(default)]
    pub u_recall_top_k: Option<usize>,
    /// Objectness is `exp(-temperature / d · d²)` at inference.
    pub temperature: f64,
    pub unknown_rule: UnknownRule,
    /// Confidence threshold for origin attribution.
    pub attribution_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            top_n: 100,
            u_recall_top_k: None,
            temperature: 1.3,
            unknown_rule: UnknownRule::Factorized,
            attribution_threshold: 0.0,
        }
    }
}

/// Ranks every `(query, known class)` and `(query, unknown)` pair of one
/// image and keeps the best `top_n`. Ties go to the lower query, then to the
/// lower column.
pub fn image_candidates(image: usize, dets: &[Detection], known: &[bool], top_n: usize) -> Vec<Candidate> {
    let mut all = Vec::with_capacity(dets.len() * (known.len() + 1));
    for d in dets {
        for (c, &on) in known.iter().enumerate() {
            if on {
                all.push((d, Label::Known(c), d.confidences[c]));
            }
        }
        all.push((d, Label::Unknown, d.unknown_confidence));
    }
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.query.cmp(&b.0.query)).then(a.1.cmp(&b.1)));
    all.into_iter()
        .take(top_n)
        .map(|(d, label, confidence)| Candidate {
            image,
            query: d.query,
            label,
            confidence,
            bbox: d.bbox,
            origin: d.origin,
        })
        .collect()
}

/// A scored box of one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub image: usize,
    pub confidence: f64,
    pub bbox: [f64; 4],
}

/// True-positive flags in descending-confidence order (stable in input
/// order). A detection is matched to the highest-IoU ground truth of its
/// image; it is a true positive iff that IoU reaches the threshold and the
/// ground truth is still free.
pub fn greedy_matches(dets: &[Scored], gts: &[(usize, [f64; 4])], thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|&i| {
            let d = &dets[i];
            let mut best = (-1.0, usize::MAX);
            for (j, (img, b)) in gts.iter().enumerate() {
                if *img == d.image {
                    let o = iou(d.bbox, *b);
                    if o > best.0 {
                        best = (o, j);
                    }
                }
            }
            if best.1 != usize::MAX && best.0 >= thr && !used[best.1] {
                used[best.1] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// All-point interpolated average precision; `None` without ground truth.
pub fn compute_ap(dets: &[Scored], gts: &[(usize, [f64; 4])], thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let tp = greedy_matches(dets, gts, thr);
    let n = gts.len() as f64;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // Precision envelope, then area under the step curve.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// Fraction of unknown ground truth matched by unknown-labelled detections;
/// `None` without unknown ground truth. At most `top_k` detections per image
/// (by confidence) take part.
pub fn compute_u_recall(dets: &[Scored], gts: &[(usize, [f64; 4])], thr: f64, top_k: Option<usize>) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let kept: Vec<Scored> = match top_k {
        None => dets.to_vec(),
        Some(k) => {
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&a, &b| {
                dets[a]
                    .image
                    .cmp(&dets[b].image)
                    .then(dets[b].confidence.total_cmp(&dets[a].confidence))
                    .then(a.cmp(&b))
            });
            let mut out = Vec::new();
            let mut count = 0;
            let mut last = usize::MAX;
            for i in order {
                if dets[i].image != last {
                    last = dets[i].image;
                    count = 0;
                }
                if count < k {
                    out.push(dets[i]);
                    count += 1;
                }
            }
            out
        }
    };
    let hits = greedy_matches(&kept, gts, thr).iter().filter(|&&t| t).count();
    Some(hits as f64 / gts.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassGroup {
    Previous,
    Current,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub group: ClassGroup,
    pub ap: Option<f64>,
    pub num_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub images: usize,
    pub candidates: usize,
    pub known: usize,
    pub unknown: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_prev: Option<f64>,
    pub map_curr: Option<f64>,
    pub map_both: Option<f64>,
    pub per_class: Vec<ClassAp>,
    pub detections: DetectionStats,
    pub attribution: Attribution,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Metrics over per-image candidates. `scenes[i]` owns `candidates` with
/// `image == i`.
pub fn report_from_candidates(scenes: &[Scene], candidates: &[Candidate], classes: &TaskClasses, opts: &EvalOptions) -> EvalReport {
    let prev = classes.previous();
    let mut per_class = Vec::new();
    for &c in &classes.known {
        let dets: Vec<Scored> = candidates
            .iter()
            .filter(|d| d.label == Label::Known(c))
            .map(|d| Scored {
                image: d.image,
                confidence: d.confidence,
                bbox: d.bbox,
            })
            .collect();
        let gts: Vec<(usize, [f64; 4])> = scenes
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.annotations.iter().filter(|a| a.class_id == c).map(move |a| (i, a.bbox)))
            .collect();
        per_class.push(ClassAp {
            class_id: c,
            group: if prev.contains(&c) { ClassGroup::Previous } else { ClassGroup::Current },
            ap: compute_ap(&dets, &gts, opts.iou_threshold),
            num_gt: gts.len(),
        });
    }
    let group_mean = |grp: Option<ClassGroup>| mean(per_class.iter().filter(|a| grp.map_or(true, |g| a.group == g)).filter_map(|a| a.ap));
    let unknown_dets: Vec<Scored> = candidates
        .iter()
        .filter(|d| d.label == Label::Unknown)
        .map(|d| Scored {
            image: d.image,
            confidence: d.confidence,
            bbox: d.bbox,
        })
        .collect();
    let unknown_gts: Vec<(usize, [f64; 4])> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.annotations.iter().filter(|a| !classes.is_known(a.class_id)).map(move |a| (i, a.bbox)))
        .collect();
    let u_recall = if classes.unknown.is_empty() {
        None
    } else {
        compute_u_recall(&unknown_dets, &unknown_gts, opts.iou_threshold, opts.u_recall_top_k)
    };
    let tagged: Vec<(bool, Origin, f64)> = candidates.iter().map(|d| (d.label == Label::Unknown, d.origin, d.confidence)).collect();
    EvalReport {
        task_id: classes.task_id,
        u_recall,
        map_prev: if prev.is_empty() { None } else { group_mean(Some(ClassGroup::Previous)) },
        map_curr: group_mean(Some(ClassGroup::Current)),
        map_both: group_mean(None),
        per_class,
        detections: DetectionStats {
            images: scenes.len(),
            candidates: candidates.len(),
            known: candidates.len() - unknown_dets.len(),
            unknown: unknown_dets.len(),
        },
        attribution: origin_attribution(&tagged, opts.attribution_threshold),
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Objectness(#[from] ObjectnessError),
    #[error(transparent)]
    Etop(#[from] EtopError),
}

/// Runs the model over `scenes` and ranks candidates per image.
pub fn predict_candidates<T: Real>(
    model: &Model<T>,
    stats: &GaussianStats,
    etop: &EtopConfig,
    scenes: &[Scene],
    classes: &TaskClasses,
    opts: &EvalOptions,
) -> Result<Vec<Candidate>, EvalError> {
    let cfg = model.config();
    let known: Vec<bool> = (0..cfg.num_classes).map(|c| classes.is_known(c)).collect();
    let factor = stats.factor()?;
    let ctx = ForwardCtx {
        known: &known,
        etop,
        stats: Some((stats, &factor)),
    };
    let tau = opts.temperature / cfg.embed_dim as f64;
    let mut out = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let outputs = model.infer(&s.image::<T>(), &ctx);
        let dets = assemble_inference(&outputs, etop, &known, tau, opts.unknown_rule)?;
        out.extend(image_candidates(i, &dets, &known, opts.top_n));
    }
    Ok(out)
}

pub fn report_task<T: Real>(
    model: &Model<T>,
    stats: &GaussianStats,
    etop: &EtopConfig,
    scenes: &[Scene],
    classes: &TaskClasses,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<Candidate>), EvalError> {
    let cands = predict_candidates(model, stats, etop, scenes, classes, opts)?;
    Ok((report_from_candidates(scenes, &cands, classes, opts), cands))
}
