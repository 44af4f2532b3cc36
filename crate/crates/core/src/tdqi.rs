//! Task-decoupled query initialisation: the first `n_qs` decoder queries come
//! from the best-scoring encoder proposals (ranked on known classes only),
//! the remaining `n_lq` are learnable.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::detector::{box_logits, Origin};
use crate::numerics::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdqiConfig {
    pub n_qs: usize,
    pub n_lq: usize,
    /// Skip the selection path entirely and decode learnable queries only.
    #[serde(default)]
    pub bypass: bool,
    /// Selected queries take their positions from proposals but their
    /// content from a learnable table.
    #[serde(default)]
    pub mixed_selection: bool,
}

impl Default for TdqiConfig {
    fn default() -> Self {
        Self {
            n_qs: 20,
            n_lq: 80,
            bypass: false,
            mixed_selection: false,
        }
    }
}

impl TdqiConfig {
    pub fn total(&self) -> usize {
        self.n_qs + self.n_lq
    }

    /// Queries that actually come from selection in this build.
    pub fn selected(&self) -> usize {
        if self.bypass {
            0
        } else {
            self.n_qs
        }
    }

    /// Learnable queries; a bypassed build decodes only learnable queries.
    pub fn learnable(&self) -> usize {
        if self.bypass {
            self.total()
        } else {
            self.n_lq
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum TdqiError {
    #[error("cannot select {k} of {tokens} tokens")]
    TooMany { k: usize, tokens: usize },
    #[error("selection produced {found} proposals, expected {expected}")]
    Count { expected: usize, found: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectedProposal {
    pub token_index: usize,
    pub score: f64,
    pub bbox: [f64; 4],
    /// Projected encoder feature of the token.
    pub content: Vec<f64>,
}

/// Ranking key per token: the largest score among enabled columns.
pub fn ranking_scores(scores: &[f64], width: usize, columns: &[bool]) -> Vec<f64> {
    assert_eq!(columns.len(), width);
    scores
        .chunks(width)
        .map(|row| {
            row.iter()
                .zip(columns)
                .filter(|(_, &on)| on)
                .map(|(&s, _)| s)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Top-`k` tokens of a `tokens x width` score matrix ranked by the maximum
/// over enabled columns; ties go to the lower token index. Returns
/// `(token, key)` in descending key order.
pub fn query_select_masked(scores: &[f64], width: usize, k: usize, columns: &[bool]) -> Result<Vec<(usize, f64)>, TdqiError> {
    let tokens = if width == 0 { 0 } else { scores.len() / width };
    if k > tokens {
        return Err(TdqiError::TooMany { k, tokens });
    }
    let keys = ranking_scores(scores, width, columns);
    let mut order: Vec<usize> = (0..tokens).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).map(|t| (t, keys[t])).collect())
}

/// Selection over the first `known` columns; later columns (including the
/// unknown/background column) never influence the ranking.
pub fn query_select(scores: &[f64], width: usize, k: usize, known: usize) -> Result<Vec<(usize, f64)>, TdqiError> {
    let columns: Vec<bool> = (0..width).map(|c| c < known).collect();
    query_select_masked(scores, width, k, &columns)
}

/// Decoder query batch on a graph. Reference boxes are carried as clamped
/// logits so refinement stays in logit space.
pub struct QueryBatch {
    /// `N x d`.
    pub content: Var,
    /// `N x 4`.
    pub ref_logits: Var,
    pub origins: Vec<Origin>,
}

/// Concatenates selected queries ahead of the learnable ones. Selected
/// reference boxes enter as constants: they are not differentiated through
/// the selection.
pub fn init_queries<T: Real>(
    g: &mut Graph<T>,
    selected: &[SelectedProposal],
    selected_content: Option<Var>,
    learnable_content: Option<Var>,
    learnable_ref_logits: Option<Var>,
) -> Result<QueryBatch, TdqiError> {
    let n_lq = learnable_content.map_or(0, |v| g.shape(v)[0]);
    let mut origins = vec![Origin::QuerySelected; selected.len()];
    origins.extend(core::iter::repeat(Origin::Learnable).take(n_lq));
    let sel = if selected.is_empty() {
        None
    } else {
        let content = selected_content.ok_or(TdqiError::Count {
            expected: selected.len(),
            found: 0,
        })?;
        let rows = g.shape(content)[0];
        if rows != selected.len() {
            return Err(TdqiError::Count {
                expected: selected.len(),
                found: rows,
            });
        }
        let boxes: Vec<f64> = selected.iter().flat_map(|p| p.bbox).collect();
        let logits = g.constant(box_logits(&Tensor::<T>::from_f64(&[selected.len(), 4], &boxes)));
        Some((content, logits))
    };
    let (content, ref_logits) = match (sel, learnable_content.zip(learnable_ref_logits)) {
        (Some((sc, sr)), Some((lc, lr))) => (g.concat_rows(&[sc, lc]), g.concat_rows(&[sr, lr])),
        (Some(s), None) => s,
        (None, Some(l)) => l,
        (None, None) => {
            return Err(TdqiError::Count { expected: 1, found: 0 });
        }
    };
    Ok(QueryBatch {
        content,
        ref_logits,
        origins,
    })
}

/// Share of detections per origin, for known and unknown detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginShares {
    pub query_selected: f64,
    pub learnable: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// `None` when there are no known detections.
    pub known: Option<OriginShares>,
    pub unknown: Option<OriginShares>,
}

fn shares(origins: impl Iterator<Item = Origin>) -> Option<OriginShares> {
    let (mut qs, mut lq) = (0usize, 0usize);
    for o in origins {
        match o {
            Origin::QuerySelected => qs += 1,
            Origin::Learnable => lq += 1,
        }
    }
    let n = qs + lq;
    (n > 0).then(|| OriginShares {
        query_selected: qs as f64 / n as f64,
        learnable: lq as f64 / n as f64,
        count: n,
    })
}

/// Attribution over `(is_unknown, origin, confidence)` detections at or above
/// `threshold`.
pub fn origin_attribution(detections: &[(bool, Origin, f64)], threshold: f64) -> Attribution {
    let kept = || detections.iter().filter(|d| d.2 >= threshold);
    Attribution {
        known: shares(kept().filter(|d| !d.0).map(|d| d.1)),
        unknown: shares(kept().filter(|d| d.0).map(|d| d.1)),
    }
}
