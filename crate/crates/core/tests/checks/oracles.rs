//! Math-core results against independent oracles. Each check panics on
//! failure.

use owod_core::boxes::{giou, iou};
use owod_core::eval::{compute_ap, compute_u_recall, Scored};
use owod_core::matching::{hungarian_match, match_cost, CostWeights};
use owod_core::numerics::{sigmoid, Graph, Tensor};
use owod_core::objectness::{ema_update, mahalanobis_sq, GaussianStats};
use owod_core::shapeworld::{build_task_splits, generate_scene, ProtocolSpec, SceneParams, SceneSpec};
use owod_core::tdqi::query_select;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gauss-Jordan inverse with partial pivoting.
fn explicit_inverse(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs())).unwrap();
        for k in 0..n {
            m.swap(col * n + k, piv * n + k);
            inv.swap(col * n + k, piv * n + k);
        }
        let p = m[col * n + col];
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                for k in 0..n {
                    m[r * n + k] -= f * m[col * n + k];
                    inv[r * n + k] -= f * inv[col * n + k];
                }
            }
        }
    }
    inv
}

fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let b: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut s = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            s[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 };
        }
    }
    s
}

pub fn mahalanobis_matches_explicit_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let d = 1 + trial % 16;
        let mut st = GaussianStats::new(d, 0.1, 1e-6);
        st.cov = random_spd(&mut rng, d);
        st.mean = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut reg = st.cov.clone();
        for i in 0..d {
            reg[i * d + i] += st.eps;
        }
        let inv = explicit_inverse(&reg, d);
        let diff: Vec<f64> = q.iter().zip(&st.mean).map(|(a, b)| a - b).collect();
        let want: f64 = (0..d).map(|i| (0..d).map(|j| diff[i] * inv[i * d + j] * diff[j]).sum::<f64>()).sum();
        let got = mahalanobis_sq(&st, &q).unwrap();
        worst = worst.max((got - want).abs() / want.abs().max(1e-300));
    }
    assert!(worst <= 1e-10, "worst relative error {worst:e}");
}

pub fn ema_two_step_closed_form() {
    // Hand-computed batch moments (biased covariance).
    // B1 = {(0,0), (2,0), (1,3)}: mean (1,1); cov [[2/3, 0], [0, 2]].
    // B2 = {(4,2), (2,2)}: mean (3,2); cov [[1, 0], [0, 0]].
    let b1 = [0.0, 0.0, 2.0, 0.0, 1.0, 3.0];
    let b2 = [4.0, 2.0, 2.0, 2.0];
    let rho = 0.25;
    let s0 = GaussianStats::new(2, rho, 1e-6);
    let s1 = ema_update(&s0, &b1).unwrap();
    assert_eq!(s1.mean, vec![1.0, 1.0]);
    assert_eq!(s1.cov, vec![2.0 / 3.0, 0.0, 0.0, 2.0]);
    let s2 = ema_update(&s1, &b2).unwrap();
    let want_mean = [(1.0 - rho) * 1.0 + rho * 3.0, (1.0 - rho) * 1.0 + rho * 2.0];
    let want_cov = [(1.0 - rho) * (2.0 / 3.0) + rho * 1.0, 0.0, 0.0, (1.0 - rho) * 2.0];
    assert_eq!(s2.mean, want_mean.to_vec());
    assert_eq!(s2.cov, want_cov.to_vec());
    assert_eq!(s2.step_count, 2);
    // Momentum one tracks the latest batch exactly.
    let one = ema_update(&ema_update(&GaussianStats::new(2, 1.0, 1e-6), &b1).unwrap(), &b2).unwrap();
    assert_eq!(one.mean, vec![3.0, 2.0]);
    assert_eq!(one.cov, vec![1.0, 0.0, 0.0, 0.0]);
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum cost over every injective assignment of the smaller side.
fn brute_force_min(cost: &[f64], rows: usize, cols: usize) -> f64 {
    let (n, m) = (rows.min(cols), rows.max(cols));
    let at = |i: usize, j: usize| if rows <= cols { cost[i * cols + j] } else { cost[j * cols + i] };
    let mut best = f64::INFINITY;
    // Choose which `n` of the `m` larger-side indices are used, in order.
    for p in permutations(m) {
        let c: f64 = (0..n).map(|i| at(i, p[i])).sum();
        best = best.min(c);
    }
    best
}

pub fn hungarian_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..500 {
        let rows = rng.gen_range(1..=7);
        let cols = rng.gen_range(1..=7);
        let integer = trial % 2 == 0;
        let cost: Vec<f64> = (0..rows * cols)
            .map(|_| if integer { rng.gen_range(0..10) as f64 } else { rng.gen_range(-5.0..5.0) })
            .collect();
        let pairs = hungarian_match(&cost, rows, cols).unwrap();
        assert_eq!(pairs.len(), rows.min(cols));
        let mut seen_r = vec![false; rows];
        let mut seen_c = vec![false; cols];
        for &(r, c) in &pairs {
            assert!(!seen_r[r] && !seen_c[c], "assignment is not injective");
            seen_r[r] = true;
            seen_c[c] = true;
        }
        let total: f64 = pairs.iter().map(|&(r, c)| cost[r * cols + c]).sum();
        let best = brute_force_min(&cost, rows, cols);
        assert!((total - best).abs() <= 1e-9, "trial {trial}: {rows}x{cols} got {total}, optimum {best}");
    }
}

pub fn hungarian_tie_break_is_lexicographic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..300 {
        let n = rng.gen_range(1..=5);
        let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0..3) as f64).collect();
        let got = hungarian_match(&cost, n, n).unwrap();
        let best = brute_force_min(&cost, n, n);
        let want = permutations(n)
            .into_iter()
            .filter(|p| ((0..n).map(|i| cost[i * n + p[i]]).sum::<f64>() - best).abs() < 1e-9)
            .min()
            .unwrap();
        let got_cols: Vec<usize> = got.iter().map(|p| p.1).collect();
        assert_eq!(got_cols, want);
    }
}

/// gIoU straight from the corner-form definition.
fn giou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ax0, ay0, ax1, ay1) = (a[0] - a[2] / 2.0, a[1] - a[3] / 2.0, a[0] + a[2] / 2.0, a[1] + a[3] / 2.0);
    let (bx0, by0, bx1, by1) = (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    inter / union - (hull - union) / hull
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let w = rng.gen_range(0.02..0.6);
    let h = rng.gen_range(0.02..0.6);
    [rng.gen_range(w / 2.0..1.0 - w / 2.0), rng.gen_range(h / 2.0..1.0 - h / 2.0), w, h]
}

pub fn giou_matches_corner_oracle() {
    assert_eq!(giou([0.3, 0.3, 0.2, 0.1], [0.3, 0.3, 0.2, 0.1]), 1.0);
    assert!(giou([0.25, 0.5, 0.5, 0.5], [0.75, 0.5, 0.5, 0.5]).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let g = giou(a, b);
        assert!((g - giou_oracle(a, b)).abs() < 1e-12);
        assert!(g > -1.0 && g <= 1.0);
    }
}

/// Sigmoid focal loss of one logit, written from probabilities.
fn focal_oracle(x: f64, t: f64, alpha: f64, gamma: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    let ce = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    let pt = p * t + (1.0 - p) * (1.0 - t);
    let at = alpha * t + (1.0 - alpha) * (1.0 - t);
    at * (1.0 - pt).powf(gamma) * ce
}

pub fn focal_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.gen_range(1..8);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let ts: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let (alpha, gamma) = (rng.gen_range(0.1..0.9), [0.0, 1.0, 2.0, 2.5][rng.gen_range(0..4)]);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[n, 1], xs.clone()));
        let l = g.sigmoid_focal_sum(x, &ts, &[true], alpha, gamma);
        let got = g.value(l).data()[0];
        let want: f64 = xs.iter().zip(&ts).map(|(&x, &t)| focal_oracle(x, t, alpha, gamma)).sum();
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
    // Saturated correct logits.
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 2], vec![20.0, -20.0]));
    let l = g.sigmoid_focal_sum(x, &[1.0, 0.0], &[true, true], 0.25, 2.0);
    assert!(g.value(l).data()[0] < 1e-6);
    // gamma = 0, alpha = 0.5 is half the binary cross-entropy.
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[1, 2], vec![0.7, -1.3]));
    let l = g.sigmoid_focal_sum(x, &[1.0, 0.0], &[true, true], 0.5, 0.0);
    let bce = -sigmoid(0.7f64).ln() - (1.0 - sigmoid(-1.3f64)).ln();
    assert!((g.value(l).data()[0] - 0.5 * bce).abs() < 1e-12);
}

pub fn match_cost_hand_case() {
    // 3 predictions x 2 GT with unit weights on the box terms and no class term.
    let w = CostWeights {
        class: 0.0,
        l1: 1.0,
        giou: 1.0,
        ..CostWeights::default()
    };
    let boxes = [0.5, 0.5, 0.2, 0.2, 0.25, 0.5, 0.5, 0.5, 0.8, 0.8, 0.1, 0.1];
    let gt = [(0, [0.5, 0.5, 0.2, 0.2]), (1, [0.75, 0.5, 0.5, 0.5])];
    let c = match_cost(&[0.0; 6], 2, &boxes, &gt, &w);
    // Pred 0 vs GT 0: identical → 0 - 1.
    assert!((c[0] + 1.0).abs() < 1e-12);
    // Pred 1 vs GT 1: touching halves, |dcx| = 0.5, gIoU 0.
    assert!((c[3] - 0.5).abs() < 1e-12);
    // Pred 0 vs GT 1: L1 = 0.25 + 0 + 0.3 + 0.3; intersection 0.1 x 0.2,
    // union 0.04 + 0.25 - 0.02, hull 0.6 x 0.5.
    let want = 0.85 - (0.02 / 0.27 - (0.3 - 0.27) / 0.3);
    assert!((c[1] - want).abs() < 1e-12, "{} vs {}", c[1], want);
    assert!(match_cost(&[0.0; 6], 2, &boxes, &[], &w).is_empty());
    // A confident exact prediction is its row's strict minimum.
    let w = CostWeights::default();
    let logits = [-5.0, -5.0, 8.0, -8.0, -5.0, -5.0];
    let c = match_cost(&logits, 2, &boxes, &[(0, [0.25, 0.5, 0.5, 0.5])], &w);
    assert!(c[1] < c[0] && c[1] < c[2]);
}

/// Average precision from every prefix of the ranking, recomputing matches
/// from scratch each time, and the envelope as a max over later ranks.
fn brute_force_ap(dets: &[Scored], gts: &[(usize, [f64; 4])], thr: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut pr = Vec::new();
    for k in 1..=order.len() {
        let mut taken = vec![false; gts.len()];
        let mut tp = 0;
        for &i in &order[..k] {
            let d = dets[i];
            let best = (0..gts.len())
                .filter(|&j| gts[j].0 == d.image)
                .map(|j| (iou(d.bbox, gts[j].1), j))
                .fold(None, |acc: Option<(f64, usize)>, x| match acc {
                    Some(a) if a.0 >= x.0 => Some(a),
                    _ => Some(x),
                });
            if let Some((o, j)) = best {
                if o >= thr && !taken[j] {
                    taken[j] = true;
                    tp += 1;
                }
            }
        }
        pr.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..pr.len() {
        let p_env = pr[k..].iter().map(|x| x.1).fold(0.0, f64::max);
        ap += (pr[k].0 - prev_r) * p_env;
        prev_r = pr[k].0;
    }
    ap
}

pub fn ap_matches_exhaustive_matcher() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Boxes on a coarse grid so exact overlaps, duplicates and misses are common.
    let grid = |rng: &mut ChaCha8Rng| {
        [
            0.2 + 0.15 * rng.gen_range(0..4) as f64,
            0.2 + 0.15 * rng.gen_range(0..4) as f64,
            0.2 + 0.1 * rng.gen_range(0..2) as f64,
            0.2,
        ]
    };
    for _ in 0..5000 {
        let nd = rng.gen_range(0..=5);
        let ng = rng.gen_range(1..=3);
        let images = rng.gen_range(1..=2);
        let dets: Vec<Scored> = (0..nd)
            .map(|_| Scored {
                image: rng.gen_range(0..images),
                confidence: rng.gen_range(0..4) as f64 / 4.0,
                bbox: grid(&mut rng),
            })
            .collect();
        let gts: Vec<(usize, [f64; 4])> = (0..ng).map(|_| (rng.gen_range(0..images), grid(&mut rng))).collect();
        let got = compute_ap(&dets, &gts, 0.5).unwrap();
        let want = brute_force_ap(&dets, &gts, 0.5);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}: {dets:?} {gts:?}");
        // Rank-based: positive rescaling leaves AP unchanged.
        let scaled: Vec<Scored> = dets.iter().map(|d| Scored { confidence: d.confidence * 0.3, ..*d }).collect();
        assert_eq!(compute_ap(&scaled, &gts, 0.5), Some(got));
    }
}

pub fn u_recall_threshold_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..300 {
        let gts: Vec<(usize, [f64; 4])> = (0..4).map(|_| (rng.gen_range(0..2), random_box(&mut rng))).collect();
        let dets: Vec<Scored> = (0..8)
            .map(|i| {
                let b = if i < 4 && rng.gen_bool(0.6) { gts[i].1 } else { random_box(&mut rng) };
                Scored {
                    image: if i < 4 { gts[i].0 } else { rng.gen_range(0..2) },
                    confidence: rng.gen_range(0.0..1.0),
                    bbox: b,
                }
            })
            .collect();
        let mut last = f64::INFINITY;
        for t in [0.0, 0.2, 0.4, 0.6, 0.8, 1.1] {
            let kept: Vec<Scored> = dets.iter().copied().filter(|d| d.confidence >= t).collect();
            let r = compute_u_recall(&kept, &gts, 0.5, None).unwrap();
            assert!(r <= last);
            last = r;
        }
    }
}

/// Box of the rendered pixels that differ from a noise-free background,
/// found by scanning the image of a one-object scene.
pub fn boxes_match_pixel_extent() {
    let params = SceneParams {
        noise: 0.0,
        count_range: [1, 1],
        ..SceneParams::default()
    };
    for class in 0..6 {
        for seed in 0..20 {
            let spec = SceneSpec::uniform(params.clone(), vec![class]);
            let s = generate_scene(&spec, seed, "x").unwrap();
            let (w, h) = (s.width, s.height);
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            for y in 0..h {
                for x in 0..w {
                    if s.pixels[y * w + x] != s.pixels[0] {
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
            }
            let b = s.annotations[0].bbox;
            let px = [b[0] * w as f64, b[1] * h as f64, b[2] * w as f64, b[3] * h as f64];
            let want = [(x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0, (x1 - x0) as f64, (y1 - y0) as f64];
            for k in 0..4 {
                assert!((px[k] - want[k]).abs() <= 1.0, "class {class} seed {seed}: {px:?} vs {want:?}");
            }
        }
    }
    // Five shapes in one scene. Placement does not depend on the noise level,
    // so the noise-free rendering has the same annotations and paints each
    // object in one flat grey level: label 8-connected components of equal
    // value and compare each box with the component it overlaps most.
    let params = SceneParams {
        count_range: [5, 5],
        ..SceneParams::default()
    };
    let spec = SceneSpec::uniform(params.clone(), vec![0, 1, 2, 3, 4, 5]);
    let noisy = generate_scene(&spec, 7, "x").unwrap();
    let flat = SceneSpec::uniform(SceneParams { noise: 0.0, ..params }, vec![0, 1, 2, 3, 4, 5]);
    let s = generate_scene(&flat, 7, "x").unwrap();
    assert_eq!(s.annotations, noisy.annotations);
    assert_eq!(s.annotations.len(), 5);
    let (w, h) = (s.width, s.height);
    let fg: Vec<bool> = s.pixels.iter().map(|&p| p > 0).collect();
    let mut label = vec![usize::MAX; w * h];
    let mut extents: Vec<[usize; 4]> = Vec::new();
    for start in 0..w * h {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        let id = extents.len();
        let mut ext = [w, h, 0, 0];
        let mut stack = vec![start];
        label[start] = id;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            ext = [ext[0].min(x), ext[1].min(y), ext[2].max(x + 1), ext[3].max(y + 1)];
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if fg[j] && label[j] == usize::MAX && s.pixels[j] == s.pixels[i] {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        extents.push(ext);
    }
    for a in &s.annotations {
        let b = a.bbox;
        let (x0, y0) = ((b[0] - b[2] / 2.0) * w as f64, (b[1] - b[3] / 2.0) * h as f64);
        let (x1, y1) = ((b[0] + b[2] / 2.0) * w as f64, (b[1] + b[3] / 2.0) * h as f64);
        let mut votes = vec![0usize; extents.len()];
        for y in y0.round() as usize..y1.round() as usize {
            for x in x0.round() as usize..x1.round() as usize {
                if label[y * w + x] != usize::MAX {
                    votes[label[y * w + x]] += 1;
                }
            }
        }
        let best = (0..votes.len()).max_by_key(|&i| votes[i]).unwrap();
        let e = extents[best];
        let got = [x0, y0, x1, y1];
        for k in 0..4 {
            assert!((got[k] - e[k] as f64).abs() <= 1.0, "box {got:?} vs pixel extent {e:?}");
        }
    }
}

pub fn task_one_training_has_no_later_labels() {
    let protocol = ProtocolSpec {
        train_per_task: 120,
        val_per_task: 10,
        test_per_task: 10,
        ..ProtocolSpec::default()
    };
    let tasks = build_task_splits(&protocol).unwrap();
    for s in &tasks[0].train {
        assert!(s.annotations.iter().all(|a| a.class_id < 2), "{}", s.scene_id);
    }
    for t in &tasks {
        for s in &t.train {
            assert!(s.annotations.iter().all(|a| t.classes.introduced.contains(&a.class_id)));
        }
    }
}

pub fn query_select_equals_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let width = 7;
        let known = rng.gen_range(1..width);
        let scores: Vec<f64> = (0..64 * width).map(|_| (rng.gen_range(0..50) as f64) / 50.0).collect();
        let got = query_select(&scores, width, 20, known).unwrap();
        let mut keyed: Vec<(f64, usize)> = (0..64)
            .map(|t| (scores[t * width..t * width + known].iter().cloned().fold(f64::MIN, f64::max), t))
            .collect();
        keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = keyed.iter().take(20).map(|k| k.1).collect();
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), want);
    }
}

pub const ALL: &[(&str, fn())] = &[
    ("mahalanobis_matches_explicit_inverse", mahalanobis_matches_explicit_inverse),
    ("ema_two_step_closed_form", ema_two_step_closed_form),
    ("hungarian_equals_brute_force", hungarian_equals_brute_force),
    ("hungarian_tie_break_is_lexicographic", hungarian_tie_break_is_lexicographic),
    ("giou_matches_corner_oracle", giou_matches_corner_oracle),
    ("focal_matches_scalar_oracle", focal_matches_scalar_oracle),
    ("match_cost_hand_case", match_cost_hand_case),
    ("ap_matches_exhaustive_matcher", ap_matches_exhaustive_matcher),
    ("u_recall_threshold_monotone", u_recall_threshold_monotone),
    ("boxes_match_pixel_extent", boxes_match_pixel_extent),
    ("task_one_training_has_no_later_labels", task_one_training_has_no_later_labels),
    ("query_select_equals_full_sort", query_select_equals_full_sort),
];
