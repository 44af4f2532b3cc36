//! Deterministic synthetic detection scenes: bright shapes on a noisy dark
//! background, plus the incremental task protocol over their classes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::iou;
use crate::numerics::{Real, Tensor};

/// Renderable archetypes; class id `c` draws `SHAPES[c % 6]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disc,
    Triangle,
    Cross,
    Ring,
    Bar,
}

pub const SHAPES: [Shape; 6] = [Shape::Square, Shape::Disc, Shape::Triangle, Shape::Cross, Shape::Ring, Shape::Bar];

impl Shape {
    pub fn for_class(class_id: usize) -> Shape {
        SHAPES[class_id % SHAPES.len()]
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disc => "disc",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Bar => "bar",
        }
    }

    /// Coverage test at local coordinates `(u, v)` in `[0, 1]^2`.
    fn covers(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            Shape::Square | Shape::Bar => true,
            Shape::Disc => r2 <= 0.25,
            Shape::Triangle => v >= 2.0 * du.abs(),
            Shape::Cross => du.abs() <= 0.17 || dv.abs() <= 0.17,
            Shape::Ring => (0.0756..=0.25).contains(&r2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "class")]
    pub class_id: usize,
    /// `(cx, cy, w, h)` normalised by the image size.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum AnnotationError {
    #[error("class {class} outside [0, {num_classes})")]
    Class { class: usize, num_classes: usize },
    #[error("box {bbox:?} has a non-positive or non-finite size")]
    Size { bbox: [f64; 4] },
    #[error("box {bbox:?} extends outside the unit square")]
    Bounds { bbox: [f64; 4] },
}

impl Annotation {
    pub fn validate(&self, num_classes: usize) -> Result<(), AnnotationError> {
        let b = self.bbox;
        if self.class_id >= num_classes {
            return Err(AnnotationError::Class {
                class: self.class_id,
                num_classes,
            });
        }
        if !b.iter().all(|x| x.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
            return Err(AnnotationError::Size { bbox: b });
        }
        const SLACK: f64 = 1e-9;
        let lo = [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0];
        let hi = [b[0] + b[2] / 2.0, b[1] + b[3] / 2.0];
        if lo.iter().any(|&x| x < -SLACK) || hi.iter().any(|&x| x > 1.0 + SLACK) {
            return Err(AnnotationError::Bounds { bbox: b });
        }
        Ok(())
    }
}

/// One grayscale image with its annotations. Pixels are stored quantised to
/// 8 bits so the on-disk PNG round-trips exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub annotations: Vec<Annotation>,
}

impl Scene {
    /// Image as a `1 x H x W` tensor with values in `[0, 1]`.
    pub fn image<T: Real>(&self) -> Tensor<T> {
        let data = self.pixels.iter().map(|&p| T::of(p as f64 / 255.0)).collect();
        Tensor::new(&[1, self.height, self.width], data)
    }

    pub fn flipped_horizontally(&self) -> Scene {
        let mut out = self.clone();
        for y in 0..self.height {
            out.pixels[y * self.width..(y + 1) * self.width].reverse();
        }
        for a in &mut out.annotations {
            a.bbox[0] = 1.0 - a.bbox[0];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    /// Inclusive shape side-length range in pixels.
    pub size_range: [usize; 2],
    /// Inclusive object-count range.
    pub count_range: [usize; 2],
    /// Amplitude of the uniform background and foreground noise.
    pub noise: f64,
    pub intensity_range: [f64; 2],
    /// Maximum pairwise IoU between placed objects.
    pub max_iou: f64,
    pub max_attempts: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            size_range: [10, 22],
            count_range: [2, 5],
            noise: 0.1,
            intensity_range: [0.5, 1.0],
            max_iou: 0.3,
            max_attempts: 200,
        }
    }
}

/// What to draw: scene geometry plus the classes to sample from.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub params: SceneParams,
    pub classes: Vec<usize>,
    /// Relative sampling weight per entry of `classes`.
    pub class_weights: Vec<f64>,
}

impl SceneSpec {
    pub fn uniform(params: SceneParams, classes: Vec<usize>) -> Self {
        let class_weights = vec![1.0; classes.len()];
        Self {
            params,
            classes,
            class_weights,
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum SceneError {
    #[error("shape size range {range:?} does not fit a {width}x{height} image")]
    SizeDoesNotFit { range: [usize; 2], width: usize, height: usize },
    #[error("invalid scene parameters: {0}")]
    Invalid(&'static str),
    #[error("placed {placed} of {wanted} objects within {attempts} attempts")]
    PlacementFailed { placed: usize, wanted: usize, attempts: usize },
}

const MIN_SIDE: usize = 6;

fn check_spec(spec: &SceneSpec) -> Result<(), SceneError> {
    let p = &spec.params;
    let [lo, hi] = p.size_range;
    if lo > hi || lo < MIN_SIDE || hi > p.width.min(p.height) {
        return Err(SceneError::SizeDoesNotFit {
            range: p.size_range,
            width: p.width,
            height: p.height,
        });
    }
    if p.count_range[0] > p.count_range[1] {
        return Err(SceneError::Invalid("count range is reversed"));
    }
    if spec.classes.is_empty() || spec.classes.len() != spec.class_weights.len() {
        return Err(SceneError::Invalid("class list empty or weights misaligned"));
    }
    if spec.class_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || spec.class_weights.iter().all(|&w| w == 0.0) {
        return Err(SceneError::Invalid("class weights must be finite, nonnegative and not all zero"));
    }
    let [ilo, ihi] = p.intensity_range;
    if !(0.0..=1.0).contains(&ilo) || !(0.0..=1.0).contains(&ihi) || ilo > ihi {
        return Err(SceneError::Invalid("intensity range must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&p.noise) || !(0.0..=1.0).contains(&p.max_iou) {
        return Err(SceneError::Invalid("noise and max_iou must lie in [0, 1]"));
    }
    Ok(())
}

/// A rasterised object: pixel mask in a `w x h` window at `(x0, y0)`.
struct Placed {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    mask: Vec<bool>,
    value: f64,
}

fn rasterise(shape: Shape, w: usize, h: usize) -> Vec<bool> {
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            mask[y * w + x] = shape.covers(u, v);
        }
    }
    mask
}

/// Tight normalised box around the set pixels of a placed mask.
fn mask_box(p: &Placed, width: usize, height: usize) -> [f64; 4] {
    let (mut xmin, mut ymin, mut xmax, mut ymax) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..p.h {
        for x in 0..p.w {
            if p.mask[y * p.w + x] {
                xmin = xmin.min(x);
                xmax = xmax.max(x);
                ymin = ymin.min(y);
                ymax = ymax.max(y);
            }
        }
    }
    let (x0, x1) = ((p.x0 + xmin) as f64, (p.x0 + xmax + 1) as f64);
    let (y0, y1) = ((p.y0 + ymin) as f64, (p.y0 + ymax + 1) as f64);
    [
        (x0 + x1) / 2.0 / width as f64,
        (y0 + y1) / 2.0 / height as f64,
        (x1 - x0) / width as f64,
        (y1 - y0) / height as f64,
    ]
}

/// Renders one scene. The result is a pure function of `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64, scene_id: &str) -> Result<Scene, SceneError> {
    check_spec(spec)?;
    let p = &spec.params;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picker = WeightedIndex::new(&spec.class_weights).map_err(|_| SceneError::Invalid("class weights"))?;
    let wanted = rng.gen_range(p.count_range[0]..=p.count_range[1]);

    let mut placed: Vec<Placed> = Vec::with_capacity(wanted);
    let mut annotations = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while placed.len() < wanted {
        if attempts == p.max_attempts {
            return Err(SceneError::PlacementFailed {
                placed: placed.len(),
                wanted,
                attempts,
            });
        }
        attempts += 1;
        let class_id = spec.classes[picker.sample(&mut rng)];
        let shape = Shape::for_class(class_id);
        let side = rng.gen_range(p.size_range[0]..=p.size_range[1]);
        let (w, h) = if shape == Shape::Bar {
            let short = (side / 3).max(3);
            if rng.gen_bool(0.5) {
                (side, short)
            } else {
                (short, side)
            }
        } else {
            (side, side)
        };
        let x0 = rng.gen_range(0..=p.width - w);
        let y0 = rng.gen_range(0..=p.height - h);
        let value = rng.gen_range(p.intensity_range[0]..=p.intensity_range[1]);
        let candidate = Placed {
            x0,
            y0,
            w,
            h,
            mask: rasterise(shape, w, h),
            value,
        };
        let bbox = mask_box(&candidate, p.width, p.height);
        if annotations.iter().any(|a: &Annotation| iou(a.bbox, bbox) > p.max_iou) {
            continue;
        }
        placed.push(candidate);
        annotations.push(Annotation { class_id, bbox });
    }

    let mut image = vec![0.0f64; p.width * p.height];
    for v in image.iter_mut() {
        *v = p.noise * rng.gen::<f64>();
    }
    for obj in &placed {
        for y in 0..obj.h {
            for x in 0..obj.w {
                if obj.mask[y * obj.w + x] {
                    let jitter = p.noise * (rng.gen::<f64>() - 0.5);
                    image[(obj.y0 + y) * p.width + obj.x0 + x] = (obj.value + jitter).clamp(0.0, 1.0);
                }
            }
        }
    }
    let pixels = image.iter().map(|&v| num_traits::Float::round(v * 255.0) as u8).collect();
    Ok(Scene {
        scene_id: scene_id.into(),
        seed,
        width: p.width,
        height: p.height,
        pixels,
        annotations,
    })
}

/// Known / introduced / unknown class sets of one task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskClasses {
    pub task_id: usize,
    pub known: Vec<usize>,
    pub introduced: Vec<usize>,
    pub unknown: Vec<usize>,
}

impl TaskClasses {
    /// Classes known before this task.
    pub fn previous(&self) -> Vec<usize> {
        self.known.iter().copied().filter(|c| !self.introduced.contains(c)).collect()
    }

    pub fn is_known(&self, class_id: usize) -> bool {
        self.known.contains(&class_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub num_classes: usize,
    pub class_groups: Vec<Vec<usize>>,
    pub scene: SceneParams,
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub test_per_task: usize,
    /// Sampling weight of a task's introduced classes relative to the others
    /// in its training scenes.
    pub introduced_weight: f64,
    pub master_seed: u64,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            class_groups: vec![vec![0, 1], vec![2, 3], vec![4, 5]],
            scene: SceneParams::default(),
            train_per_task: 600,
            val_per_task: 100,
            test_per_task: 200,
            introduced_weight: 3.0,
            master_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("protocol has no class groups")]
    NoGroups,
    #[error("class group {0} is empty")]
    EmptyGroup(usize),
    #[error("class {class} appears in groups {first} and {second}")]
    Overlap { class: usize, first: usize, second: usize },
    #[error("class {class} outside [0, {num_classes})")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("task {task}, {split} scene {index}: {source}")]
    Scene {
        task: usize,
        split: &'static str,
        index: usize,
        source: SceneError,
    },
}

pub fn task_class_sets(groups: &[Vec<usize>], num_classes: usize) -> Result<Vec<TaskClasses>, ProtocolError> {
    if groups.is_empty() {
        return Err(ProtocolError::NoGroups);
    }
    let mut owner: Vec<Option<usize>> = vec![None; num_classes];
    for (gi, g) in groups.iter().enumerate() {
        if g.is_empty() {
            return Err(ProtocolError::EmptyGroup(gi));
        }
        for &c in g {
            if c >= num_classes {
                return Err(ProtocolError::ClassOutOfRange { class: c, num_classes });
            }
            if let Some(first) = owner[c] {
                return Err(ProtocolError::Overlap {
                    class: c,
                    first,
                    second: gi,
                });
            }
            owner[c] = Some(gi);
        }
    }
    let mut known: Vec<usize> = Vec::new();
    Ok(groups
        .iter()
        .enumerate()
        .map(|(t, g)| {
            known.extend_from_slice(g);
            known.sort_unstable();
            let mut introduced = g.clone();
            introduced.sort_unstable();
            let mut unknown: Vec<usize> = groups[t + 1..].iter().flatten().copied().collect();
            unknown.sort_unstable();
            TaskClasses {
                task_id: t + 1,
                known: known.clone(),
                introduced,
                unknown,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub classes: TaskClasses,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl TaskSpec {
    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of one scene, derived from the master seed and its position.
pub fn scene_seed(master: u64, task_id: usize, split: Split, index: usize) -> u64 {
    let s = splitmix(master);
    let s = splitmix(s ^ task_id as u64);
    let s = splitmix(s ^ split as u64);
    splitmix(s ^ index as u64)
}

pub fn scene_id(task_id: usize, split: Split, index: usize) -> String {
    format!("t{}-{}-{:04}", task_id, split.name(), index)
}

/// Generates every task's splits. Training scenes draw all protocol classes
/// (introduced ones up-weighted) but keep labels only for the introduced
/// classes; validation and test scenes keep every label.
pub fn build_task_splits(protocol: &ProtocolSpec) -> Result<Vec<TaskSpec>, ProtocolError> {
    let sets = task_class_sets(&protocol.class_groups, protocol.num_classes)?;
    let mut all: Vec<usize> = protocol.class_groups.iter().flatten().copied().collect();
    all.sort_unstable();
    let mut tasks = Vec::with_capacity(sets.len());
    for classes in sets {
        let t = classes.task_id;
        let weights = all
            .iter()
            .map(|c| if classes.introduced.contains(c) { protocol.introduced_weight } else { 1.0 })
            .collect();
        let train_spec = SceneSpec {
            params: protocol.scene.clone(),
            classes: all.clone(),
            class_weights: weights,
        };
        let eval_spec = SceneSpec::uniform(protocol.scene.clone(), all.clone());
        let mut splits: [Vec<Scene>; 3] = Default::default();
        for (slot, split) in splits.iter_mut().zip(Split::ALL) {
            let (spec, count) = match split {
                Split::Train => (&train_spec, protocol.train_per_task),
                Split::Val => (&eval_spec, protocol.val_per_task),
                Split::Test => (&eval_spec, protocol.test_per_task),
            };
            for i in 0..count {
                let seed = scene_seed(protocol.master_seed, t, split, i);
                let mut scene = generate_scene(spec, seed, &scene_id(t, split, i)).map_err(|source| ProtocolError::Scene {
                    task: t,
                    split: split.name(),
                    index: i,
                    source,
                })?;
                if split == Split::Train {
                    scene.annotations.retain(|a| classes.introduced.contains(&a.class_id));
                }
                slot.push(scene);
            }
        }
        let [train, val, test] = splits;
        tasks.push(TaskSpec {
            classes,
            train,
            val,
            test,
        });
    }
    Ok(tasks)
}
