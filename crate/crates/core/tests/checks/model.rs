//! End-to-end gradient checks and structural invariants of the detector,
//! the query initialisation and the objectness schedule. Each check panics
//! on failure.

use owod_core::detector::{ForwardCtx, Model, ModelConfig, Pinned};
use owod_core::etop::{EtopConfig, Schedule};
use owod_core::loss::{detection_loss, LossConfig, ObjectnessCtx};
use owod_core::matching::CostWeights;
use owod_core::numerics::{grad_check_sampled, Graph, Tensor};
use owod_core::objectness::GaussianStats;
use owod_core::protocol::{train_step, ObjectnessConfig, OptimConfig, StepConfig, TrainState};
use owod_core::shapeworld::{generate_scene, Scene, SceneParams, SceneSpec, TaskClasses};
use owod_core::tdqi::{query_select, TdqiConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;

/// The small detector used by the gradient and structure checks.
pub fn tiny_config(queries: usize) -> ModelConfig {
    ModelConfig {
        image_width: 32,
        image_height: 32,
        embed_dim: 16,
        backbone_channels: [4, 8],
        backbone_strides: [2, 2, 1],
        encoder_layers: 2,
        decoder_layers: 6,
        num_queries: queries,
        heads: 2,
        points: 2,
        ffn_dim: 32,
        num_classes: 6,
        anchor_size: 0.25,
    }
}

pub fn tiny_scene(seed: u64, count: usize) -> Scene {
    let params = SceneParams {
        width: 32,
        height: 32,
        size_range: [8, 12],
        count_range: [count, count],
        ..SceneParams::default()
    };
    generate_scene(&SceneSpec::uniform(params, vec![0, 1]), seed, "tiny").unwrap()
}

pub fn task_one() -> TaskClasses {
    TaskClasses {
        task_id: 1,
        known: vec![0, 1],
        introduced: vec![0, 1],
        unknown: vec![2, 3, 4, 5],
    }
}

/// Initialised statistics with a random well-conditioned covariance.
pub fn random_stats(d: usize, seed: u64) -> GaussianStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = GaussianStats::new(d, 0.1, 1e-6);
    let b: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-0.5..0.5)).collect();
    for i in 0..d {
        for j in 0..d {
            s.cov[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
        }
    }
    s.mean = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
    s.step_count = 1;
    s
}

/// Constant inputs of an unperturbed forward pass, replayed by every
/// finite-difference evaluation.
fn pin(model: &Model<f64>, image: &Tensor<f64>, ctx: &ForwardCtx) -> Pinned {
    let mut g = Graph::new();
    let pv = model.register(&mut g, false);
    model.forward(&mut g, &pv, image, ctx).pinned()
}

fn known_mask() -> (Vec<bool>, Vec<bool>) {
    let known = vec![true, true, false, false, false, false];
    let mut columns = known.clone();
    columns.push(true);
    (known, columns)
}

/// Total loss of one 32x32 scene with `G = 2` through every parameter.
pub fn end_to_end_gradient() {
    let cfg = tiny_config(10);
    let tdqi = TdqiConfig {
        n_qs: 4,
        n_lq: 6,
        ..TdqiConfig::default()
    };
    let mut model = Model::<f64>::new(&cfg, &tdqi, 3);
    // Move zero-initialised heads off their symmetric start so every path
    // carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in model.params_mut().tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.05..0.05);
        }
    }
    let scene = tiny_scene(2, 2);
    let image = scene.image::<f64>();
    let gt: Vec<(usize, [f64; 4])> = scene.annotations.iter().map(|a| (a.class_id, a.bbox)).collect();
    assert_eq!(gt.len(), 2);
    let stats = random_stats(cfg.embed_dim, 5);
    let factor = stats.factor().unwrap();
    let etop = EtopConfig::default();
    let loss_cfg = LossConfig {
        objectness_weight: 0.01,
        ..LossConfig::default()
    };
    let (known, columns) = known_mask();
    let params: Vec<Tensor<f64>> = model.params().tensors().to_vec();
    let pinned = pin(
        &model,
        &image,
        &ForwardCtx {
            known: &known,
            etop: &etop,
            stats: Some((&stats, &factor)),
        },
    );
    let report = grad_check_sampled(
        |g, pv| {
            let ctx = ForwardCtx {
                known: &known,
                etop: &etop,
                stats: Some((&stats, &factor)),
            };
            let fwd = model.forward_pinned(g, pv, &image, &ctx, Some(&pinned));
            let obj = ObjectnessCtx {
                stats: &stats,
                factor: &factor,
            };
            detection_loss(g, &fwd, &gt, &columns, &loss_cfg, &etop, &obj).unwrap().0
        },
        &params,
        GRAD_EPS,
        GRAD_TOL,
        4,
        6,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {:e}: {:?}", report.max_rel_err, report.per_parameter.iter().filter(|p| p.max_rel_err > GRAD_TOL).collect::<Vec<_>>());
}

/// The loss on a d = 16, N = 10, G = 2 instance, perturbing only the
/// decoder heads' inputs: gradient wrt the final embeddings' projection.
pub fn detection_loss_gradient_through_heads() {
    let cfg = tiny_config(10);
    let tdqi = TdqiConfig {
        n_qs: 0,
        n_lq: 10,
        ..TdqiConfig::default()
    };
    let model = Model::<f64>::new(&cfg, &tdqi, 8);
    let scene = tiny_scene(9, 2);
    let image = scene.image::<f64>();
    let gt: Vec<(usize, [f64; 4])> = scene.annotations.iter().map(|a| (a.class_id, a.bbox)).collect();
    let stats = random_stats(cfg.embed_dim, 10);
    let factor = stats.factor().unwrap();
    let etop = EtopConfig {
        schedule: Schedule::None,
        ..EtopConfig::default()
    };
    let (known, columns) = known_mask();
    let loss_cfg = LossConfig::default();
    let heads: Vec<usize> = (0..cfg.decoder_layers)
        .flat_map(|l| {
            let names = model.params().names();
            model
                .decoder_layer_param_ids(l)
                .into_iter()
                .filter(move |&i| names[i].contains(".class.") || names[i].contains(".box."))
        })
        .collect();
    let params: Vec<Tensor<f64>> = heads.iter().map(|&i| model.params().get(i).clone()).collect();
    let pinned = pin(
        &model,
        &image,
        &ForwardCtx {
            known: &known,
            etop: &etop,
            stats: Some((&stats, &factor)),
        },
    );
    let report = grad_check_sampled(
        |g, sub| {
            let mut pv = model.register(g, false);
            for (k, &i) in heads.iter().enumerate() {
                pv[i] = sub[k];
            }
            let ctx = ForwardCtx {
                known: &known,
                etop: &etop,
                stats: Some((&stats, &factor)),
            };
            let fwd = model.forward_pinned(g, &pv, &image, &ctx, Some(&pinned));
            let obj = ObjectnessCtx {
                stats: &stats,
                factor: &factor,
            };
            detection_loss(g, &fwd, &gt, &columns, &loss_cfg, &etop, &obj).unwrap().0
        },
        &params,
        GRAD_EPS,
        GRAD_TOL,
        8,
        11,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {:e}", report.max_rel_err);
}

/// Objectness tensors exist exactly on layers `<= n`, with values in (0, 1],
/// and every box lies strictly inside the unit square.
pub fn objectness_present_exactly_up_to_stop_layer() {
    let cfg = tiny_config(10);
    let tdqi = TdqiConfig {
        n_qs: 4,
        n_lq: 6,
        ..TdqiConfig::default()
    };
    let model = Model::<f64>::new(&cfg, &tdqi, 12);
    let image = tiny_scene(13, 2).image::<f64>();
    let stats = random_stats(cfg.embed_dim, 14);
    let factor = stats.factor().unwrap();
    let (known, _) = known_mask();
    for n in 1..=cfg.decoder_layers {
        for schedule in [Schedule::Etop, Schedule::Dol] {
            if schedule == Schedule::Dol && n == cfg.decoder_layers {
                continue;
            }
            let etop = EtopConfig {
                stop_layer: n,
                schedule,
                detach_objectness: false,
            };
            let ctx = ForwardCtx {
                known: &known,
                etop: &etop,
                stats: Some((&stats, &factor)),
            };
            let out = model.infer(&image, &ctx);
            assert_eq!(out.layers.len(), cfg.decoder_layers);
            for (l, layer) in out.layers.iter().enumerate() {
                assert_eq!(layer.objectness.is_some(), l < n, "n = {n}, layer {}", l + 1);
                assert_eq!(layer.distance_sq.is_some(), l < n);
                if let Some(o) = &layer.objectness {
                    assert!(o.data().iter().all(|&v| v > 0.0 && v <= 1.0));
                }
                assert!(layer.boxes.data().iter().all(|&b| b > 0.0 && b < 1.0));
                assert_eq!(layer.class_logits.shape(), &[10, 7]);
            }
        }
    }
    let all = EtopConfig {
        stop_layer: 2,
        schedule: Schedule::None,
        detach_objectness: false,
    };
    let ctx = ForwardCtx {
        known: &known,
        etop: &all,
        stats: Some((&stats, &factor)),
    };
    assert!(model.infer(&image, &ctx).layers.iter().all(|l| l.objectness.is_some()));
}

/// With only the objectness loss active, decoder layers after the stop
/// layer receive exactly zero gradient.
pub fn objectness_gradient_stops_at_stop_layer() {
    let cfg = tiny_config(10);
    let tdqi = TdqiConfig {
        n_qs: 4,
        n_lq: 6,
        ..TdqiConfig::default()
    };
    let model = Model::<f64>::new(&cfg, &tdqi, 15);
    let scene = tiny_scene(16, 2);
    let gt: Vec<(usize, [f64; 4])> = scene.annotations.iter().map(|a| (a.class_id, a.bbox)).collect();
    let stats = random_stats(cfg.embed_dim, 17);
    let factor = stats.factor().unwrap();
    let (known, columns) = known_mask();
    let only_obj = LossConfig {
        weights: CostWeights {
            class: 0.0,
            l1: 0.0,
            giou: 0.0,
            ..CostWeights::default()
        },
        objectness_weight: 1.0,
        encoder_aux: false,
    };
    for n in 1..=cfg.decoder_layers {
        let etop = EtopConfig {
            stop_layer: n,
            ..EtopConfig::default()
        };
        let mut g = Graph::new();
        let pv = model.register(&mut g, true);
        let ctx = ForwardCtx {
            known: &known,
            etop: &etop,
            stats: Some((&stats, &factor)),
        };
        let fwd = model.forward(&mut g, &pv, &scene.image(), &ctx);
        let obj = ObjectnessCtx {
            stats: &stats,
            factor: &factor,
        };
        let (loss, bd) = detection_loss(&mut g, &fwd, &gt, &columns, &only_obj, &etop, &obj).unwrap();
        assert_eq!(bd.layers.iter().filter(|l| l.l_obj.is_some()).count(), n);
        let grads = g.backward(loss);
        for l in 0..cfg.decoder_layers {
            let ids = model.decoder_layer_param_ids(l);
            let touched = ids
                .iter()
                .any(|&i| grads.get(pv[i]).map_or(false, |gr| gr.iter().any(|&x| x != 0.0)));
            if l >= n {
                assert!(!touched, "n = {n}: layer {} received objectness gradient", l + 1);
            } else {
                assert!(touched, "n = {n}: layer {} received no gradient", l + 1);
            }
        }
    }
}

/// Box-head parameters of layer `l` reach later boxes only through values.
pub fn refinement_is_detached_between_layers() {
    let cfg = tiny_config(6);
    let tdqi = TdqiConfig {
        n_qs: 2,
        n_lq: 4,
        ..TdqiConfig::default()
    };
    let model = Model::<f64>::new(&cfg, &tdqi, 18);
    let (known, _) = known_mask();
    let etop = EtopConfig::default();
    let mut g = Graph::new();
    let pv = model.register(&mut g, true);
    let ctx = ForwardCtx {
        known: &known,
        etop: &etop,
        stats: None,
    };
    let fwd = model.forward(&mut g, &pv, &tiny_scene(19, 2).image(), &ctx);
    let names = model.params().names().to_vec();
    for l in 0..cfg.decoder_layers - 1 {
        let later = fwd.layers[l + 1].boxes;
        let s = g.sum(later);
        let grads = g.backward(s);
        for i in model.decoder_layer_param_ids(l) {
            if names[i].contains(".box.") {
                let reached = grads.get(pv[i]).map_or(false, |gr| gr.iter().any(|&x| x != 0.0));
                assert!(!reached, "{} reaches layer {} boxes", names[i], l + 2);
            }
        }
    }
}

/// Perturbing only the unknown column never changes the selection.
pub fn selection_ignores_unknown_column() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..1000 {
        let tokens = rng.gen_range(1..80);
        let width = rng.gen_range(2..8);
        let known = rng.gen_range(1..width);
        let k = rng.gen_range(0..=tokens);
        let mut scores: Vec<f64> = (0..tokens * width).map(|_| rng.gen_range(0.0..1.0)).collect();
        let before = query_select(&scores, width, k, known).unwrap();
        for t in 0..tokens {
            for c in known..width {
                scores[t * width + c] = rng.gen_range(0.0..1.0);
            }
        }
        assert_eq!(query_select(&scores, width, k, known).unwrap(), before);
    }
}

/// `N_qs = 0` and the bypassed build agree bit for bit, in the forward pass
/// and through training steps.
pub fn zero_selection_equals_bypass() {
    let cfg = ModelConfig {
        num_queries: 12,
        ..tiny_config(12)
    };
    let zero = TdqiConfig {
        n_qs: 0,
        n_lq: 12,
        ..TdqiConfig::default()
    };
    let bypass = TdqiConfig {
        bypass: true,
        ..zero.clone()
    };
    let a = Model::<f64>::new(&cfg, &zero, 21);
    let b = Model::<f64>::new(&cfg, &bypass, 21);
    assert_eq!(a.params(), b.params());
    let (known, _) = known_mask();
    let etop = EtopConfig::default();
    let stats = random_stats(cfg.embed_dim, 22);
    let factor = stats.factor().unwrap();
    let ctx = ForwardCtx {
        known: &known,
        etop: &etop,
        stats: Some((&stats, &factor)),
    };
    let image = tiny_scene(23, 3).image::<f64>();
    assert_eq!(a.infer(&image, &ctx), b.infer(&image, &ctx));

    let obj = ObjectnessConfig::default();
    let mut sa = TrainState::new(&cfg, &zero, &obj, OptimConfig::default(), 24);
    let mut sb = TrainState::new(&cfg, &bypass, &obj, OptimConfig::default(), 24);
    let step = StepConfig {
        loss: LossConfig::default(),
        etop,
        objectness: obj,
    };
    let batch: Vec<Scene> = (0..2).map(|i| tiny_scene(25 + i, 2)).collect();
    for _ in 0..3 {
        let la = train_step(&mut sa, &batch, &task_one(), &step, 1e-3).unwrap();
        let lb = train_step(&mut sb, &batch, &task_one(), &step, 1e-3).unwrap();
        assert_eq!(la, lb);
    }
    assert_eq!(sa.model.params(), sb.model.params());
    assert_eq!(sa.stats, sb.stats);
}

/// Replaying a pass's own constants reproduces its outputs.
pub fn pinned_replay_matches_forward() {
    let cfg = tiny_config(10);
    let tdqi = TdqiConfig {
        n_qs: 4,
        n_lq: 6,
        ..TdqiConfig::default()
    };
    let model = Model::<f64>::new(&cfg, &tdqi, 30);
    let image = tiny_scene(31, 2).image::<f64>();
    let (known, _) = known_mask();
    let etop = EtopConfig::default();
    let ctx = ForwardCtx {
        known: &known,
        etop: &etop,
        stats: None,
    };
    let mut g = Graph::new();
    let pv = model.register(&mut g, false);
    let free = model.forward(&mut g, &pv, &image, &ctx);
    let pinned = free.pinned();
    let replay = model.forward_pinned(&mut g, &pv, &image, &ctx, Some(&pinned));
    assert_eq!(replay.selected, free.selected);
    for (a, b) in free.layers.iter().zip(&replay.layers) {
        for (x, y) in g.value(a.boxes).data().iter().zip(g.value(b.boxes).data()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(g.value(a.logits).data().len(), g.value(b.logits).data().len());
        for (x, y) in g.value(a.logits).data().iter().zip(g.value(b.logits).data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

pub const GRADIENT: &[(&str, fn())] = &[
    ("end_to_end_gradient", end_to_end_gradient),
    ("detection_loss_gradient_through_heads", detection_loss_gradient_through_heads),
    ("pinned_replay_matches_forward", pinned_replay_matches_forward),
];

pub const STRUCTURE: &[(&str, fn())] = &[
    ("objectness_present_exactly_up_to_stop_layer", objectness_present_exactly_up_to_stop_layer),
    ("objectness_gradient_stops_at_stop_layer", objectness_gradient_stops_at_stop_layer),
    ("refinement_is_detached_between_layers", refinement_is_detached_between_layers),
    ("selection_ignores_unknown_column", selection_ignores_unknown_column),
    ("zero_selection_equals_bypass", zero_selection_equals_bypass),
];
