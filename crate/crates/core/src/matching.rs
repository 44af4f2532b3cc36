//! Minimum-cost bipartite assignment and the detection matching cost.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::boxes::giou;
use crate::numerics::sigmoid;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum MatchError {
    #[error("cost entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("cost matrix has {len} entries, expected {rows}x{cols}")]
    Shape { len: usize, rows: usize, cols: usize },
}

/// Weights of the matching cost; the detection loss reuses them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Optimal assignment of a `rows x cols` row-major cost matrix.
///
/// Returns `min(rows, cols)` pairs `(row, col)` sorted by row. Among all
/// optimal assignments the one whose sorted pair list is lexicographically
/// smallest is returned.
pub fn hungarian_match(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<(usize, usize)>, MatchError> {
    if cost.len() != rows * cols {
        return Err(MatchError::Shape {
            len: cost.len(),
            rows,
            cols,
        });
    }
    if let Some(k) = cost.iter().position(|c| !c.is_finite()) {
        return Err(MatchError::NonFinite {
            row: k / cols,
            col: k % cols,
        });
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transposed { cost[j * cols + i] } else { cost[i * cols + j] };
    let (u, v) = solve_duals(n, m, at);

    let scale = cost.iter().fold(1.0f64, |a, &c| a.max(c.abs()));
    let tol = 1e-9 * scale;
    // Map the duals back onto original rows/columns.
    let (row_pot, col_pot): (Vec<f64>, Vec<f64>) = if transposed { (v.clone(), u.clone()) } else { (u.clone(), v.clone()) };
    let tight = |i: usize, j: usize| cost[i * cols + j] - row_pot[i] - col_pot[j] <= tol;
    // Every vertex on the smaller side is matched; on the larger side a
    // strictly negative potential forces saturation.
    let required_row: Vec<bool> = (0..rows)
        .map(|i| !transposed || row_pot[i] < -tol)
        .collect();
    let required_col: Vec<bool> = (0..cols).map(|j| transposed || col_pot[j] < -tol).collect();

    let mut row_done = vec![false; rows];
    let mut col_used = vec![false; cols];
    let mut pairs = Vec::with_capacity(n);
    for i in 0..rows {
        row_done[i] = true;
        let mut chosen = None;
        for j in 0..cols {
            if col_used[j] || !tight(i, j) {
                continue;
            }
            col_used[j] = true;
            if completable(rows, cols, &row_done, &col_used, &required_row, &required_col, &tight) {
                chosen = Some(j);
                break;
            }
            col_used[j] = false;
        }
        if let Some(j) = chosen {
            pairs.push((i, j));
        }
        if pairs.len() == n {
            break;
        }
    }
    debug_assert_eq!(pairs.len(), n);
    Ok(pairs)
}

/// Shortest-augmenting-path Hungarian method on an `n x m` matrix, `n <= m`.
/// Returns row and column potentials with `u_i + v_j <= c_ij` and `v_j <= 0`.
fn solve_duals(n: usize, m: usize, at: impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (u[1..].to_vec(), v[1..].to_vec())
}

/// Whether the undecided rows and unused columns admit a matching on tight
/// edges that covers every required vertex among them. By the
/// Mendelsohn-Dulmage theorem it suffices to cover each side separately.
#[allow(clippy::too_many_arguments)]
fn completable(
    rows: usize,
    cols: usize,
    row_done: &[bool],
    col_used: &[bool],
    required_row: &[bool],
    required_col: &[bool],
    tight: &impl Fn(usize, usize) -> bool,
) -> bool {
    let free_rows: Vec<usize> = (0..rows).filter(|&i| !row_done[i]).collect();
    let free_cols: Vec<usize> = (0..cols).filter(|&j| !col_used[j]).collect();
    let adj: Vec<Vec<usize>> = free_rows
        .iter()
        .map(|&i| (0..free_cols.len()).filter(|&b| tight(i, free_cols[b])).collect())
        .collect();
    let need_rows: Vec<usize> = (0..free_rows.len()).filter(|&a| required_row[free_rows[a]]).collect();
    if !covers(&adj, free_cols.len(), &need_rows) {
        return false;
    }
    let mut adj_t = vec![Vec::new(); free_cols.len()];
    for (a, list) in adj.iter().enumerate() {
        for &b in list {
            adj_t[b].push(a);
        }
    }
    let need_cols: Vec<usize> = (0..free_cols.len()).filter(|&b| required_col[free_cols[b]]).collect();
    covers(&adj_t, free_rows.len(), &need_cols)
}

/// Kuhn's augmenting paths: can every left vertex in `need` be matched?
fn covers(adj: &[Vec<usize>], right: usize, need: &[usize]) -> bool {
    fn augment(a: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &b in &adj[a] {
            if seen[b] {
                continue;
            }
            seen[b] = true;
            if owner[b].map_or(true, |o| augment(o, adj, seen, owner)) {
                owner[b] = Some(a);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; right];
    for &a in need {
        let mut seen = vec![false; right];
        if !augment(a, adj, &mut seen, &mut owner) {
            return false;
        }
    }
    true
}

/// Focal-style classification cost of predicting class `c` with logit `x`.
pub fn focal_class_cost(x: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let neg = (1.0 - alpha) * Float::powf(p, gamma) * -Float::ln(1.0 - p + 1e-8);
    let pos = alpha * Float::powf(1.0 - p, gamma) * -Float::ln(p + 1e-8);
    pos - neg
}

/// Matching cost between `n` predictions and the ground truth, `n x G`
/// row-major. `logits` is `n x k` with class ids indexing its columns;
/// `boxes` is `n x 4` in `(cx, cy, w, h)`.
pub fn match_cost(logits: &[f64], k: usize, boxes: &[f64], gt: &[(usize, [f64; 4])], w: &CostWeights) -> Vec<f64> {
    let n = boxes.len() / 4;
    assert_eq!(logits.len(), n * k, "match_cost: logits shape");
    let g = gt.len();
    let mut out = vec![0.0; n * g];
    for i in 0..n {
        let b = [boxes[4 * i], boxes[4 * i + 1], boxes[4 * i + 2], boxes[4 * i + 3]];
        for (j, &(class, gb)) in gt.iter().enumerate() {
            assert!(class < k, "match_cost: class {} outside {} columns", class, k);
            let cls = focal_class_cost(logits[i * k + class], w.focal_alpha, w.focal_gamma);
            let l1: f64 = (0..4).map(|t| (b[t] - gb[t]).abs()).sum();
            out[i * g + j] = w.class * cls + w.l1 * l1 - w.giou * giou(b, gb);
        }
    }
    out
}
