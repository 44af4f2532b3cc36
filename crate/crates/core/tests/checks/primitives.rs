//! Finite-difference checks for every differentiable primitive, in f64.
//! Each check panics on failure.

use owod_core::numerics::linalg::Cholesky;
use owod_core::numerics::{grad_check, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Contracts an arbitrary-shaped output against fixed weights so every output
/// entry gets a distinct adjoint.
fn project(g: &mut Graph<f64>, y: Var) -> Var {
    let n = g.value(y).len();
    let w = Tensor::from_fn(g.value(y).shape(), |i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4 + 1.0 / (n as f64 + 1.0));
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.sum(p)
}

fn assert_checks<F>(name: &str, f: F, params: &[Tensor<f64>])
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let report = grad_check(f, params, EPS, TOL).unwrap();
    assert!(report.passed(), "{name}: {report:?}");
}

pub fn matmul_identity_and_gradient() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let x = g.param(Tensor::from_fn(&[3, 2], |i| i as f64));
    let y = g.matmul(eye, x);
    assert_eq!(g.value(y), g.value(x));
    let s = g.sum(y);
    let grads = g.backward(s);
    assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4], 1.0);
    let b = rand_tensor(&mut rng, &[4, 2], 1.0);
    assert_checks(
        "matmul",
        |g, p| {
            let y = g.matmul(p[0], p[1]);
            project(g, y)
        },
        &[a, b],
    );
}

pub fn linear_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = [
        rand_tensor(&mut rng, &[5, 3], 1.0),
        rand_tensor(&mut rng, &[3, 4], 1.0),
        rand_tensor(&mut rng, &[4], 1.0),
    ];
    assert_checks(
        "linear",
        |g, p| {
            let y = g.linear(p[0], p[1], Some(p[2]));
            project(g, y)
        },
        &params,
    );
}

pub fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3], 1.0);
    let b = Tensor::from_fn(&[2, 3], |_| rng.gen_range(0.5..2.0));
    let row = rand_tensor(&mut rng, &[3], 1.0);
    assert_checks(
        "add/sub/mul/div",
        |g, p| {
            let s = g.add(p[0], p[1]);
            let d = g.sub(s, p[1]);
            let m = g.mul(d, p[1]);
            let q = g.div(m, p[1]);
            let q = g.mul(q, p[0]);
            project(g, q)
        },
        &[a.clone(), b.clone()],
    );
    assert_checks(
        "add_row/mul_row",
        |g, p| {
            let y = g.add_row(p[0], p[1]);
            let y = g.mul_row(y, p[1]);
            project(g, y)
        },
        &[a.clone(), row],
    );
    assert_checks(
        "exp/log/scale/add_scalar/square",
        |g, p| {
            let l = g.log(p[1]);
            let e = g.exp(p[0]);
            let y = g.add(l, e);
            let y = g.scale(y, 0.7);
            let y = g.add_scalar(y, -0.3);
            let y = g.square(y);
            project(g, y)
        },
        &[a.clone(), b.clone()],
    );
    // Keep entries away from the kinks of abs/relu/max/min.
    let away = Tensor::from_f64(&[2, 3], &[0.5, -0.7, 1.2, -0.3, 0.9, -1.1]);
    let other = Tensor::from_f64(&[2, 3], &[0.1, 0.2, -0.4, 0.6, -0.5, 0.3]);
    assert_checks(
        "relu/abs/max/min/neg",
        |g, p| {
            let r = g.relu(p[0]);
            let a = g.abs(p[0]);
            let hi = g.maximum(p[0], p[1]);
            let lo = g.minimum(p[0], p[1]);
            let n = g.neg(lo);
            let y = g.add(r, a);
            let y = g.add(y, hi);
            let y = g.add(y, n);
            project(g, y)
        },
        &[away, other],
    );
    assert_checks(
        "mean",
        |g, p| {
            let s = g.square(p[0]);
            g.mean(s)
        },
        &[a],
    );
}

pub fn sigmoid_value_and_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).data(), &[0.5]);
    let grads = g.backward(y);
    assert_eq!(grads.get(x).unwrap(), &[0.25]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    assert_checks(
        "sigmoid",
        |g, p| {
            let y = g.sigmoid(p[0]);
            project(g, y)
        },
        &[rand_tensor(&mut rng, &[3, 3], 3.0)],
    );
}

pub fn sum_of_sigmoid_of_wx() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = rand_tensor(&mut rng, &[4, 6], 1.0);
    let x = rand_tensor(&mut rng, &[6, 1], 1.0);
    assert_checks(
        "sigmoid(Wx)",
        |g, p| {
            let y = g.matmul(p[0], p[1]);
            let y = g.sigmoid(y);
            g.sum(y)
        },
        &[w, x],
    );
}

pub fn softmax_and_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    assert_checks(
        "softmax",
        |g, p| {
            let y = g.softmax_groups(p[0], 4);
            project(g, y)
        },
        &[rand_tensor(&mut rng, &[3, 8], 2.0)],
    );
    let params = [
        rand_tensor(&mut rng, &[4, 6], 2.0),
        rand_tensor(&mut rng, &[6], 1.0),
        rand_tensor(&mut rng, &[6], 1.0),
    ];
    assert_checks(
        "layer_norm",
        |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], 1e-5);
            project(g, y)
        },
        &params,
    );
}

pub fn attention_over_three_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = [
        rand_tensor(&mut rng, &[3, 8], 1.0),
        rand_tensor(&mut rng, &[3, 8], 1.0),
        rand_tensor(&mut rng, &[3, 8], 1.0),
    ];
    for heads in [1, 2] {
        assert_checks(
            "attention",
            |g, p| {
                let y = g.attention(p[0], p[1], p[2], heads);
                project(g, y)
            },
            &params,
        );
    }
    // Cross-attention with a different key count.
    let q = rand_tensor(&mut rng, &[2, 4], 1.0);
    let kv = rand_tensor(&mut rng, &[5, 4], 1.0);
    assert_checks(
        "cross attention",
        |g, p| {
            let y = g.attention(p[0], p[1], p[1], 2);
            project(g, y)
        },
        &[q, kv],
    );
}

pub fn single_query_attends_to_single_value() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::from_f64(&[1, 4], &[0.3, -1.0, 2.0, 0.1]));
    let k = g.constant(Tensor::from_f64(&[1, 4], &[1.0, 1.0, 1.0, 1.0]));
    let v = g.constant(Tensor::from_f64(&[1, 4], &[5.0, 6.0, 7.0, 8.0]));
    let y = g.attention(q, k, v, 2);
    for (a, b) in g.value(y).data().iter().zip([5.0, 6.0, 7.0, 8.0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

pub fn conv2d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = [
        rand_tensor(&mut rng, &[2, 5, 6], 1.0),
        rand_tensor(&mut rng, &[3, 2 * 9], 0.5),
        rand_tensor(&mut rng, &[3], 0.5),
    ];
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        assert_checks(
            "conv2d",
            |g, p| {
                let y = g.conv2d(p[0], p[1], p[2], 3, stride, pad);
                project(g, y)
            },
            &params,
        );
    }
}

pub fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&mut rng, &[4, 3], 1.0);
    let b = rand_tensor(&mut rng, &[2, 3], 1.0);
    assert_checks(
        "gather/concat/slice/transpose/reshape",
        |g, p| {
            let r = g.gather_rows(p[0], &[3, 0, 3]);
            let c = g.concat_rows(&[r, p[1]]);
            let s = g.slice_cols(c, 1, 3);
            let cc = g.concat_cols(&[s, c]);
            let t = g.transpose(cc);
            let t = g.reshape(t, &[25]);
            let t = g.reshape(t, &[5, 5]);
            let sq = g.square(t);
            project(g, sq)
        },
        &[a, b],
    );
}

fn hand_blend(map: &[f64], h: usize, w: usize, d: usize, x: f64, y: f64) -> Vec<f64> {
    let x0 = x.floor();
    let y0 = y.floor();
    let mut out = vec![0.0; d];
    for (cx, cy, wt) in [
        (x0, y0, (1.0 - (x - x0)) * (1.0 - (y - y0))),
        (x0 + 1.0, y0, (x - x0) * (1.0 - (y - y0))),
        (x0, y0 + 1.0, (1.0 - (x - x0)) * (y - y0)),
        (x0 + 1.0, y0 + 1.0, (x - x0) * (y - y0)),
    ] {
        if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
            continue;
        }
        let idx = (cy as usize * w + cx as usize) * d;
        for j in 0..d {
            out[j] += wt * map[idx + j];
        }
    }
    out
}

pub fn bilinear_sampling_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (h, w, d) = (3, 4, 2);
    let map = rand_tensor(&mut rng, &[h, w, d], 1.0);
    let mut g = Graph::<f64>::new();
    let m = g.constant(map.clone());
    let pts = g.constant(Tensor::from_f64(&[3, 2], &[1.0, 2.0, 0.3, 0.7, -0.5, 1.5]));
    let y = g.bilinear_sample(m, pts);
    let out = g.value(y).data();
    // Grid point (x=1, y=2) reads row 2, column 1 exactly.
    assert_eq!(&out[0..2], &map.data()[(2 * w + 1) * d..(2 * w + 2) * d]);
    let blend = hand_blend(map.data(), h, w, d, 0.3, 0.7);
    for j in 0..d {
        assert!((out[2 + j] - blend[j]).abs() < 1e-14);
    }
    let outside = hand_blend(map.data(), h, w, d, -0.5, 1.5);
    for j in 0..d {
        assert!((out[4 + j] - outside[j]).abs() < 1e-14);
    }

    let mut g = Graph::<f64>::new();
    let m = g.constant(Tensor::from_f64(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.constant(Tensor::from_f64(&[1, 2], &[0.5, 0.5]));
    let y = g.bilinear_sample(m, p);
    assert_eq!(g.value(y).data(), &[2.5]);
}

pub fn bilinear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let map = rand_tensor(&mut rng, &[4, 5, 3], 1.0);
    let pts = Tensor::from_f64(&[4, 2], &[0.3, 0.7, 3.6, 2.2, -0.4, 1.3, 4.2, 3.5]);
    assert_checks(
        "bilinear",
        |g, p| {
            let y = g.bilinear_sample(p[0], p[1]);
            project(g, y)
        },
        &[map.clone(), pts.clone()],
    );

    // The map gradient of a single sample equals its interpolation weights.
    let mut g = Graph::<f64>::new();
    let m = g.param(Tensor::from_fn(&[2, 2, 1], |i| i as f64));
    let p = g.constant(Tensor::from_f64(&[1, 2], &[0.25, 0.5]));
    let y = g.bilinear_sample(m, p);
    let s = g.sum(y);
    let grads = g.backward(s);
    assert_eq!(grads.get(m).unwrap(), &[0.375, 0.125, 0.375, 0.125]);
}

pub fn deformable_attention_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (h, w, d, heads, points, n) = (4, 5, 4, 2, 3, 3);
    let value = rand_tensor(&mut rng, &[h * w, d], 1.0);
    let locs = Tensor::from_fn(&[n, heads * points * 2], |_| rng.gen_range(0.02..0.98));
    let weights = Tensor::from_fn(&[n, heads * points], |_| rng.gen_range(0.0..1.0));
    assert_checks(
        "deform",
        |g, p| {
            let y = g.deform_attention(p[0], h, w, p[1], p[2], heads, points);
            project(g, y)
        },
        &[value, locs, weights],
    );
}

pub fn mahalanobis_matches_explicit_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = 4;
    let a = rand_tensor(&mut rng, &[d, d], 1.0);
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = (0..d).map(|k| a.data()[i * d + k] * a.data()[j * d + k]).sum::<f64>();
        }
        cov[i * d + i] += 0.5;
    }
    let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let chol = Cholesky::factor(&cov, d, 0.0).unwrap();
    let x = rand_tensor(&mut rng, &[3, d], 1.0);
    assert_checks(
        "mahalanobis",
        |g, p| {
            let y = g.mahalanobis_sq(p[0], &mean, &chol);
            project(g, y)
        },
        &[x],
    );
}

pub fn focal_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let logits = rand_tensor(&mut rng, &[4, 5], 3.0);
    let targets: Vec<f64> = (0..20).map(|i| if i % 6 == 0 { 1.0 } else { 0.0 }).collect();
    let mask = [true, true, false, true, true];
    assert_checks(
        "focal",
        |g, p| g.sigmoid_focal_sum(p[0], &targets, &mask, 0.25, 2.0),
        &[logits],
    );
}

pub fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let d = g.detach(x);
    let y = g.mul(x, d);
    let grads = g.backward(y);
    assert_eq!(grads.get(x).unwrap(), &[2.0]);
    assert!(!g.needs_grad(d));
}

pub fn l1_loss_gradient() {
    let pred = Tensor::new(&[2, 4], vec![0.3, 0.4, 0.2, 0.25, 0.7, 0.6, 0.3, 0.1]);
    let gt = Tensor::new(&[2, 4], vec![0.35, 0.38, 0.15, 0.3, 0.62, 0.66, 0.22, 0.17]);
    assert_checks("l1", |g, p| owod_core::loss::l1_loss(g, p[0], &gt), &[pred]);
}

/// Overlapping, disjoint and nested box pairs, away from the kinks of the
/// min/max corners.
pub fn giou_loss_gradient() {
    let pred = Tensor::new(&[3, 4], vec![0.40, 0.45, 0.30, 0.22, 0.20, 0.25, 0.10, 0.12, 0.51, 0.49, 0.40, 0.38]);
    let gt = Tensor::new(&[3, 4], vec![0.47, 0.41, 0.26, 0.31, 0.70, 0.75, 0.14, 0.18, 0.50, 0.52, 0.20, 0.16]);
    assert_checks("giou", |g, p| owod_core::loss::giou_loss(g, p[0], &gt), &[pred]);
}

pub fn objectness_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let d = 6;
    let a = rand_tensor(&mut rng, &[d, d], 1.0);
    let mut stats = owod_core::objectness::GaussianStats::new(d, 0.1, 1e-6);
    for i in 0..d {
        for j in 0..d {
            stats.cov[i * d + j] = (0..d).map(|k| a.data()[i * d + k] * a.data()[j * d + k]).sum::<f64>();
        }
        stats.cov[i * d + i] += 0.3;
    }
    stats.mean = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    stats.step_count = 1;
    let factor = stats.factor().unwrap();
    let q = rand_tensor(&mut rng, &[4, d], 1.5);
    assert_checks(
        "objectness loss",
        |g, p| owod_core::objectness::objectness_loss(g, p[0], &stats, &factor),
        &[q],
    );
}

pub const ALL: &[(&str, fn())] = &[
    ("matmul_identity_and_gradient", matmul_identity_and_gradient),
    ("linear_with_bias", linear_with_bias),
    ("elementwise_ops", elementwise_ops),
    ("sigmoid_value_and_gradient", sigmoid_value_and_gradient),
    ("sum_of_sigmoid_of_wx", sum_of_sigmoid_of_wx),
    ("softmax_and_layer_norm", softmax_and_layer_norm),
    ("attention_over_three_tokens", attention_over_three_tokens),
    ("single_query_attends_to_single_value", single_query_attends_to_single_value),
    ("conv2d_gradient", conv2d_gradient),
    ("structural_ops", structural_ops),
    ("bilinear_sampling_values", bilinear_sampling_values),
    ("bilinear_gradients", bilinear_gradients),
    ("deformable_attention_gradient", deformable_attention_gradient),
    ("mahalanobis_matches_explicit_quadratic_form", mahalanobis_matches_explicit_quadratic_form),
    ("focal_sum_gradient", focal_sum_gradient),
    ("l1_loss_gradient", l1_loss_gradient),
    ("giou_loss_gradient", giou_loss_gradient),
    ("objectness_loss_gradient", objectness_loss_gradient),
    ("detach_blocks_gradient", detach_blocks_gradient),
];
