use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use super::gemm::matmul_into;
use super::kernels::{self, ConvGeom, DeformGeom};
use super::linalg::Cholesky;
use super::{sigmoid, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Max(Var, Var),
    Min(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    SoftmaxGroups { x: Var, group: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    GatherRows { x: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Bilinear { map: Var, points: Var },
    Deform { value: Var, locs: Var, weights: Var, geom: DeformGeom },
    /// Adjoint is a fixed per-row direction scaled by the upstream entry.
    RowScaled { x: Var, direction: Vec<T> },
    /// Scalar loss whose adjoint wrt `x` was precomputed in the forward pass.
    ScalarLoss { x: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode tape over dense tensors.
///
/// Every op appends a node; [`Graph::backward`] walks them in reverse. Shape
/// errors are programming errors and panic.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn mat_dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        assert_eq!(t.shape().len(), 2, "expected a matrix, got shape {:?}", t.shape());
        (t.shape()[0], t.shape()[1])
    }

    /// Gradient-free copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.mat_dims(a);
        let (k2, n) = self.mat_dims(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![T::zero(); m * n];
        matmul_into(&mut out, self.value(a).data(), self.value(b).data(), m, k, n, false, false, false);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `x * w + b` with `x: n x i`, `w: i x o`, `b: o`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = self.mat_dims(x);
        let (i2, o) = self.mat_dims(w);
        assert_eq!(i, i2, "linear: input width {} vs weight rows {}", i, i2);
        let mut out = vec![T::zero(); n * o];
        matmul_into(&mut out, self.value(x).data(), self.value(w).data(), n, i, o, false, false, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o, "linear: bias length");
            for row in out.chunks_mut(o.max(1)) {
                for (y, &bb) in row.iter_mut().zip(bias) {
                    *y += bb;
                }
            }
        }
        let parents: Vec<Var> = core::iter::once(x).chain(core::iter::once(w)).chain(b).collect();
        self.push(Tensor::new(&[n, o], out), Op::Linear { x, w, b }, &parents)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shapes differ");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| if x >= y { x } else { y });
        self.push(v, Op::Max(a, b), &[a, b])
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_map(a, b, |x, y| if x <= y { x } else { y });
        self.push(v, Op::Min(a, b), &[a, b])
    }

    /// Adds the vector `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let c = self.value(x).cols();
        assert_eq!(self.value(row).len(), c, "add_row: width");
        let r = self.value(row).data().to_vec();
        let t = self.value(x);
        let data = t.data().iter().enumerate().map(|(i, &v)| v + r[i % c]).collect();
        let v = Tensor::new(t.shape(), data);
        self.push(v, Op::AddRow(x, row), &[x, row])
    }

    /// Multiplies every row of `x` elementwise by `row`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let c = self.value(x).cols();
        assert_eq!(self.value(row).len(), c, "mul_row: width");
        let r = self.value(row).data().to_vec();
        let t = self.value(x);
        let data = t.data().iter().enumerate().map(|(i, &v)| v * r[i % c]).collect();
        let v = Tensor::new(t.shape(), data);
        self.push(v, Op::MulRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.map(x, |a| a * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let v = self.map(x, |a| a + c);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| if a > T::zero() { a } else { T::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.exp());
        self.push(v, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.ln());
        self.push(v, Op::Log(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.abs());
        self.push(v, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a * a);
        self.push(v, Op::Square(x), &[x])
    }

    /// Sum of all entries as a one-element tensor (0 for an empty input).
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Softmax over each run of `group` consecutive entries.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Var {
        assert!(group > 0 && self.value(x).len() % group == 0, "softmax group size");
        let mut v = self.value(x).clone();
        kernels::softmax_groups_inplace(v.data_mut(), group);
        self.push(v, Op::SoftmaxGroups { x, group }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let d = self.value(x).cols();
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let (y, xhat, rstd) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            d,
            T::of(eps),
        );
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::new(&shape, y), Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Multi-head scaled dot-product attention: `q: n x d`, `k, v: m x d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (n, d) = self.mat_dims(q);
        let (m, dk) = self.mat_dims(k);
        assert_eq!(d, dk, "attention: q/k width");
        assert_eq!(self.mat_dims(v), (m, d), "attention: v shape");
        assert!(heads > 0 && d % heads == 0, "attention: heads must divide width");
        let (out, probs) =
            kernels::attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), n, m, d, heads);
        self.push(Tensor::new(&[n, d], out), Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// 2-D convolution of `x: C x H x W` with `w: O x (C*k*k)` and bias `b: O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d expects C x H x W input");
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], kernel, stride, pad);
        let (o, patch) = self.mat_dims(w);
        assert_eq!(patch, geom.patch(), "conv2d weight width");
        assert_eq!(self.value(b).len(), o, "conv2d bias length");
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let ohw = geom.out_len();
        let mut out = vec![T::zero(); o * ohw];
        matmul_into(&mut out, self.value(w).data(), &cols, o, patch, ohw, false, false, false);
        let bias = self.value(b).data();
        for (row, &bb) in out.chunks_mut(ohw.max(1)).zip(bias) {
            for y in row.iter_mut() {
                *y += bb;
            }
        }
        self.push(
            Tensor::new(&[o, geom.out_h, geom.out_w], out),
            Op::Conv2d { x, w, b, geom, cols },
            &[x, w, b],
        )
    }

    /// Selects rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let (r, c) = self.mat_dims(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            assert!(i < r, "gather_rows: index {} out of {} rows", i, r);
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(Tensor::new(&[index.len(), c], out), Op::GatherRows { x, index: index.to_vec() }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.mat_dims(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.mat_dims(p);
            assert_eq!(pc, c, "concat_rows: widths differ");
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(&[rows, c], out), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.mat_dims(x);
        assert!(start <= end && end <= c, "slice_cols range");
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push(Tensor::new(&[r, w], out), Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.mat_dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.mat_dims(p);
                assert_eq!(pr, r, "concat_cols: rows differ");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::new(&[r, total], out), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.mat_dims(x);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(&[c, r], out), Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape);
        self.push(v, Op::Reshape(x), &[x])
    }

    /// Bilinear sampling of `map: H x W x d` at `points: n x 2` given as
    /// continuous pixel coordinates `(x, y)`; neighbours outside the grid read
    /// as zero.
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Var {
        let ms = self.value(map).shape().to_vec();
        assert_eq!(ms.len(), 3, "bilinear_sample expects H x W x d");
        let (h, w, d) = (ms[0], ms[1], ms[2]);
        let (n, two) = self.mat_dims(points);
        assert_eq!(two, 2);
        let src = self.value(map).data();
        let pts = self.value(points).data();
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            for c in kernels::bilinear_corners(pts[2 * i], pts[2 * i + 1], w, h).iter().flatten() {
                for j in 0..d {
                    out[i * d + j] += c.weight * src[c.index * d + j];
                }
            }
        }
        self.push(Tensor::new(&[n, d], out), Op::Bilinear { map, points }, &[map, points])
    }

    /// Deformable attention read-out.
    ///
    /// `value` is `(height*width) x d` in row-major grid order; `locs` is
    /// `n x (heads*points*2)` normalised `(x, y)` pairs and `weights` is
    /// `n x (heads*points)`.
    pub fn deform_attention(
        &mut self,
        value: Var,
        height: usize,
        width: usize,
        locs: Var,
        weights: Var,
        heads: usize,
        points: usize,
    ) -> Var {
        let (hw, d) = self.mat_dims(value);
        assert_eq!(hw, height * width, "deform_attention: value rows");
        assert!(heads > 0 && d % heads == 0);
        let (n, lw) = self.mat_dims(locs);
        assert_eq!(lw, heads * points * 2, "deform_attention: locs width");
        assert_eq!(self.mat_dims(weights), (n, heads * points), "deform_attention: weights shape");
        let geom = DeformGeom {
            height,
            width,
            dim: d,
            heads,
            points,
        };
        let out =
            kernels::deform_forward(self.value(value).data(), self.value(locs).data(), self.value(weights).data(), n, &geom);
        self.push(
            Tensor::new(&[n, d], out),
            Op::Deform {
                value,
                locs,
                weights,
                geom,
            },
            &[value, locs, weights],
        )
    }

    /// Squared Mahalanobis distance of every row of `x` to `mean` under the
    /// factorised (regularised) covariance. Output has one entry per row.
    pub fn mahalanobis_sq(&mut self, x: Var, mean: &[f64], factor: &Cholesky) -> Var {
        let (m, d) = self.mat_dims(x);
        assert_eq!(mean.len(), d);
        assert_eq!(factor.dim(), d);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m);
        let mut direction = vec![T::zero(); m * d];
        let mut diff = vec![0.0f64; d];
        for i in 0..m {
            for j in 0..d {
                diff[j] = src[i * d + j].as_f64() - mean[j];
            }
            let solved = factor.solve(&diff);
            let dist: f64 = diff.iter().zip(&solved).map(|(a, b)| a * b).sum();
            out.push(T::of(dist.max(0.0)));
            for j in 0..d {
                direction[i * d + j] = T::of(2.0 * solved[j]);
            }
        }
        self.push(Tensor::new(&[m], out), Op::RowScaled { x, direction }, &[x])
    }

    /// Sigmoid focal loss summed over the entries whose column is enabled in
    /// `column_mask`. `targets` has the shape of `logits` with entries in {0, 1}.
    pub fn sigmoid_focal_sum(&mut self, logits: Var, targets: &[T], column_mask: &[bool], alpha: f64, gamma: f64) -> Var {
        let (n, c) = self.mat_dims(logits);
        assert_eq!(targets.len(), n * c, "focal: target shape");
        assert_eq!(column_mask.len(), c, "focal: column mask width");
        let x = self.value(logits).data();
        let mut total = 0.0f64;
        let mut grad = vec![T::zero(); n * c];
        for i in 0..n {
            for j in 0..c {
                if !column_mask[j] {
                    continue;
                }
                let (l, g) = focal_term(x[i * c + j].as_f64(), targets[i * c + j].as_f64(), alpha, gamma);
                total += l;
                grad[i * c + j] = T::of(g);
            }
        }
        self.push(Tensor::scalar(T::of(total)), Op::ScalarLoss { x: logits, grad }, &[logits])
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Grads<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one(); self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Grads { grads }
    }

    fn want(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let len_of = |v: Var| self.nodes[v.0].value.len();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.mat_dims(*a);
                let n = self.mat_dims(*b).1;
                if self.want(*a) {
                    let da = slot(grads, *a, m * k);
                    matmul_into(da, g, val(*b), m, n, k, false, true, true);
                }
                if self.want(*b) {
                    let db = slot(grads, *b, k * n);
                    matmul_into(db, val(*a), g, k, m, n, true, false, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, inp) = self.mat_dims(*x);
                let o = self.mat_dims(*w).1;
                if self.want(*x) {
                    let dx = slot(grads, *x, n * inp);
                    matmul_into(dx, g, val(*w), n, o, inp, false, true, true);
                }
                if self.want(*w) {
                    let dw = slot(grads, *w, inp * o);
                    matmul_into(dw, val(*x), g, inp, n, o, true, false, true);
                }
                if let Some(b) = b {
                    if self.want(*b) {
                        let db = slot(grads, *b, o);
                        for row in g.chunks(o.max(1)) {
                            for (d, &r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.want(*a) {
                    for (d, &x) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if self.want(*b) {
                    for (d, &x) in slot(grads, *b, g.len()).iter_mut().zip(g) {
                        *d += sign * x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.want(*a) {
                    let vb = val(*b).to_vec();
                    for ((d, &x), y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                }
                if self.want(*b) {
                    let va = val(*a).to_vec();
                    for ((d, &x), y) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b).to_vec();
                if self.want(*a) {
                    for ((d, &x), &y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(&vb) {
                        *d += x / y;
                    }
                }
                if self.want(*b) {
                    let out = node.value.data();
                    for (((d, &x), &y), &q) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(&vb).zip(out) {
                        *d -= x * q / y;
                    }
                }
            }
            Op::Max(a, b) | Op::Min(a, b) => {
                let is_max = matches!(node.op, Op::Max(..));
                let pick_a: Vec<bool> = val(*a)
                    .iter()
                    .zip(val(*b))
                    .map(|(&x, &y)| if is_max { x >= y } else { x <= y })
                    .collect();
                if self.want(*a) {
                    for ((d, &x), &p) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(&pick_a) {
                        if p {
                            *d += x;
                        }
                    }
                }
                if self.want(*b) {
                    for ((d, &x), &p) in slot(grads, *b, g.len()).iter_mut().zip(g).zip(&pick_a) {
                        if !p {
                            *d += x;
                        }
                    }
                }
            }
            Op::AddRow(x, row) | Op::MulRow(x, row) => {
                let c = self.value(*x).cols();
                let is_mul = matches!(node.op, Op::MulRow(..));
                if self.want(*x) {
                    let r = val(*row).to_vec();
                    let dx = slot(grads, *x, g.len());
                    for (idx, (d, &gg)) in dx.iter_mut().zip(g).enumerate() {
                        *d += if is_mul { gg * r[idx % c] } else { gg };
                    }
                }
                if self.want(*row) {
                    let xv = val(*x).to_vec();
                    let dr = slot(grads, *row, c);
                    for (idx, &gg) in g.iter().enumerate() {
                        dr[idx % c] += if is_mul { gg * xv[idx] } else { gg };
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.want(*x) {
                    for (d, &gg) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += gg * *c;
                    }
                }
            }
            Op::AddScalar(x) => {
                if self.want(*x) {
                    for (d, &gg) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += gg;
                    }
                }
            }
            Op::Relu(x) | Op::Sigmoid(x) | Op::Exp(x) | Op::Log(x) | Op::Abs(x) | Op::Square(x) => {
                if !self.want(*x) {
                    return;
                }
                let xv = val(*x).to_vec();
                let out = node.value.data();
                let deriv = |k: usize| -> T {
                    let a = xv[k];
                    match node.op {
                        Op::Relu(_) => {
                            if a > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Op::Sigmoid(_) => out[k] * (T::one() - out[k]),
                        Op::Exp(_) => out[k],
                        Op::Log(_) => T::one() / a,
                        Op::Abs(_) => {
                            if a > T::zero() {
                                T::one()
                            } else if a < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                        _ => a + a,
                    }
                };
                let dx = slot(grads, *x, g.len());
                for (k, (d, &gg)) in dx.iter_mut().zip(g).enumerate() {
                    *d += gg * deriv(k);
                }
            }
            Op::Sum(x) => {
                if self.want(*x) {
                    let n = len_of(*x);
                    for d in slot(grads, *x, n).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SoftmaxGroups { x, group } => {
                if self.want(*x) {
                    let y = node.value.data();
                    let dx = slot(grads, *x, g.len());
                    kernels::softmax_groups_backward(y, g, *group, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*x).cols();
                let gam = val(*gamma).to_vec();
                let mut dx = self.want(*x).then(|| vec![T::zero(); g.len()]);
                let mut dg = self.want(*gamma).then(|| vec![T::zero(); d]);
                let mut db = self.want(*beta).then(|| vec![T::zero(); d]);
                kernels::layer_norm_backward(g, xhat, rstd, &gam, d, dx.as_deref_mut(), dg.as_deref_mut(), db.as_deref_mut());
                add_into(grads, *x, dx);
                add_into(grads, *gamma, dg);
                add_into(grads, *beta, db);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (n, d) = self.mat_dims(*q);
                let m = self.mat_dims(*k).0;
                let mut dq = self.want(*q).then(|| vec![T::zero(); n * d]);
                let mut dk = self.want(*k).then(|| vec![T::zero(); m * d]);
                let mut dv = self.want(*v).then(|| vec![T::zero(); m * d]);
                kernels::attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    g,
                    n,
                    m,
                    d,
                    *heads,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                add_into(grads, *q, dq);
                add_into(grads, *k, dk);
                add_into(grads, *v, dv);
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (o, patch) = self.mat_dims(*w);
                let ohw = geom.out_len();
                if self.want(*w) {
                    let dw = slot(grads, *w, o * patch);
                    matmul_into(dw, g, cols, o, ohw, patch, false, true, true);
                }
                if self.want(*b) {
                    let db = slot(grads, *b, o);
                    for (d, row) in db.iter_mut().zip(g.chunks(ohw.max(1))) {
                        *d += row.iter().copied().sum::<T>();
                    }
                }
                if self.want(*x) {
                    let mut dcols = vec![T::zero(); patch * ohw];
                    matmul_into(&mut dcols, val(*w), g, patch, o, ohw, true, false, false);
                    let n = len_of(*x);
                    kernels::col2im(&dcols, geom, slot(grads, *x, n));
                }
            }
            Op::GatherRows { x, index } => {
                if self.want(*x) {
                    let (r, c) = self.mat_dims(*x);
                    let dx = slot(grads, *x, r * c);
                    for (row, &src) in index.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += g[row * c + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len_of(p);
                    if self.want(p) {
                        for (d, &gg) in slot(grads, p, n).iter_mut().zip(&g[offset..offset + n]) {
                            *d += gg;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                if self.want(*x) {
                    let (r, c) = self.mat_dims(*x);
                    let w = node.value.cols();
                    let dx = slot(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..w {
                            dx[i * c + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.want(p) {
                        let dp = slot(grads, p, r * w);
                        for i in 0..r {
                            for j in 0..w {
                                dp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                if self.want(*x) {
                    let (r, c) = self.mat_dims(*x);
                    let dx = slot(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.want(*x) {
                    for (d, &gg) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += gg;
                    }
                }
            }
            Op::Bilinear { map, points } => {
                let ms = self.value(*map).shape().to_vec();
                let (h, w, d) = (ms[0], ms[1], ms[2]);
                let pts = val(*points).to_vec();
                let src = val(*map).to_vec();
                let n = pts.len() / 2;
                let mut dmap = self.want(*map).then(|| vec![T::zero(); h * w * d]);
                let mut dpts = self.want(*points).then(|| vec![T::zero(); n * 2]);
                for i in 0..n {
                    for c in kernels::bilinear_corners(pts[2 * i], pts[2 * i + 1], w, h).iter().flatten() {
                        let gi = &g[i * d..(i + 1) * d];
                        if let Some(dm) = dmap.as_deref_mut() {
                            for j in 0..d {
                                dm[c.index * d + j] += c.weight * gi[j];
                            }
                        }
                        if let Some(dp) = dpts.as_deref_mut() {
                            let dot: T = gi.iter().zip(&src[c.index * d..(c.index + 1) * d]).map(|(&a, &b)| a * b).sum();
                            dp[2 * i] += c.dw_dx * dot;
                            dp[2 * i + 1] += c.dw_dy * dot;
                        }
                    }
                }
                add_into(grads, *map, dmap);
                add_into(grads, *points, dpts);
            }
            Op::Deform {
                value,
                locs,
                weights,
                geom,
            } => {
                let n = self.mat_dims(*locs).0;
                let mut dv = self.want(*value).then(|| vec![T::zero(); len_of(*value)]);
                let mut dl = self.want(*locs).then(|| vec![T::zero(); len_of(*locs)]);
                let mut dw = self.want(*weights).then(|| vec![T::zero(); len_of(*weights)]);
                kernels::deform_backward(
                    val(*value),
                    val(*locs),
                    val(*weights),
                    g,
                    n,
                    geom,
                    dv.as_deref_mut(),
                    dl.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                add_into(grads, *value, dv);
                add_into(grads, *locs, dl);
                add_into(grads, *weights, dw);
            }
            Op::RowScaled { x, direction } => {
                if self.want(*x) {
                    let d = self.value(*x).cols();
                    let dx = slot(grads, *x, direction.len());
                    for (row, &gg) in g.iter().enumerate() {
                        for j in 0..d {
                            dx[row * d + j] += gg * direction[row * d + j];
                        }
                    }
                }
            }
            Op::ScalarLoss { x, grad } => {
                if self.want(*x) {
                    for (d, &gg) in slot(grads, *x, grad.len()).iter_mut().zip(grad) {
                        *d += g[0] * gg;
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: Option<Vec<T>>) {
    if let Some(delta) = delta {
        match &mut grads[v.0] {
            Some(existing) => {
                for (d, x) in existing.iter_mut().zip(delta) {
                    *d += x;
                }
            }
            empty => *empty = Some(delta),
        }
    }
}

/// Sigmoid focal loss of a single logit and its derivative.
pub(crate) fn focal_term(x: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    let ce = x.max(0.0) - x * t + Float::ln_1p(Float::exp(-x.abs()));
    let p_t = p * t + (1.0 - p) * (1.0 - t);
    let alpha_t = if alpha >= 0.0 { alpha * t + (1.0 - alpha) * (1.0 - t) } else { 1.0 };
    let m = 1.0 - p_t;
    let modulator = if gamma == 0.0 { 1.0 } else { Float::powf(m, gamma) };
    let loss = alpha_t * ce * modulator;
    let dce = p - t;
    let dm = p * (1.0 - p) * (1.0 - 2.0 * t);
    let dmod = if gamma == 0.0 || m <= 0.0 {
        0.0
    } else {
        gamma * Float::powf(m, gamma - 1.0) * dm
    };
    (loss, alpha_t * (dce * modulator + ce * dmod))
}

