//! Forward/adjoint kernels behind the fused graph operations.

use alloc::vec;
use alloc::vec::Vec;

use super::gemm::gemm_strided;
use super::Real;

/// One neighbour of a bilinear sample: flat index into the `height x width`
/// grid, its interpolation weight and the weight's partial derivatives with
/// respect to the sample's pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corner<T> {
    pub index: usize,
    pub weight: T,
    pub dw_dx: T,
    pub dw_dy: T,
}

/// Bilinear neighbours of the continuous pixel location `(x, y)`; `x` runs
/// along the width. Neighbours that fall outside the grid are `None`, which
/// is zero padding.
pub fn bilinear_corners<T: Real>(x: T, y: T, width: usize, height: usize) -> [Option<Corner<T>>; 4] {
    if !x.is_finite() || !y.is_finite() {
        return [None; 4];
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let one = T::one();
    let ix = x0.to_i64().unwrap_or(i64::MIN / 2);
    let iy = y0.to_i64().unwrap_or(i64::MIN / 2);
    let spec = [
        (ix, iy, (one - fx) * (one - fy), -(one - fy), -(one - fx)),
        (ix + 1, iy, fx * (one - fy), one - fy, -fx),
        (ix, iy + 1, (one - fx) * fy, -fy, one - fx),
        (ix + 1, iy + 1, fx * fy, fy, fx),
    ];
    let mut out = [None; 4];
    for (slot, &(cx, cy, weight, dw_dx, dw_dy)) in out.iter_mut().zip(spec.iter()) {
        if cx >= 0 && cy >= 0 && (cx as usize) < width && (cy as usize) < height {
            *slot = Some(Corner {
                index: cy as usize * width + cx as usize,
                weight,
                dw_dx,
                dw_dy,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && kernel >= 1);
        assert!(height + 2 * pad >= kernel && width + 2 * pad >= kernel, "conv kernel larger than padded input");
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        }
    }

    pub fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ohw = g.out_len();
    let mut cols = vec![T::zero(); g.patch() * ohw];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &x[(c * g.height + iy as usize) * g.width..];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ohw = g.out_len();
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + iy as usize) * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dx[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise layer normalisation. Returns (output, normalised input, 1/std).
pub(crate) fn layer_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = if d == 0 { 0 } else { x.len() / d };
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

pub(crate) fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    d: usize,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let rows = rstd.len();
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for j in 0..d {
                dg[j] += dy[r * d + j] * xhat[r * d + j];
            }
        }
    }
    if let Some(db) = dbeta {
        for r in 0..rows {
            for j in 0..d {
                db[j] += dy[r * d + j];
            }
        }
    }
    if let Some(dx) = dx {
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for j in 0..d {
                let g = dy[r * d + j] * gamma[j];
                mean_g += g;
                mean_gx += g * xhat[r * d + j];
            }
            mean_g *= inv_d;
            mean_gx *= inv_d;
            for j in 0..d {
                let g = dy[r * d + j] * gamma[j];
                dx[r * d + j] += rstd[r] * (g - mean_g - xhat[r * d + j] * mean_gx);
            }
        }
    }
}

/// In-place softmax over contiguous groups of `group` entries.
pub(crate) fn softmax_groups_inplace<T: Real>(x: &mut [T], group: usize) {
    for chunk in x.chunks_mut(group) {
        let max = chunk.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in chunk.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in chunk.iter_mut() {
            *v /= total;
        }
    }
}

pub(crate) fn softmax_groups_backward<T: Real>(y: &[T], dy: &[T], group: usize, dx: &mut [T]) {
    for ((yc, gc), xc) in y.chunks(group).zip(dy.chunks(group)).zip(dx.chunks_mut(group)) {
        let dot: T = yc.iter().zip(gc).map(|(&a, &b)| a * b).sum();
        for j in 0..yc.len() {
            xc[j] += yc[j] * (gc[j] - dot);
        }
    }
}

/// Multi-head scaled dot-product attention. Returns (output `n x d`, probabilities `heads x n x m`).
pub(crate) fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = vec![T::zero(); heads * n * m];
    let mut out = vec![T::zero(); n * d];
    for h in 0..heads {
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        gemm_strided(n, dh, m, scale, &q[h * dh..], (d, 1), &k[h * dh..], (1, d), T::zero(), p, (m, 1));
        softmax_groups_inplace(p, m);
        gemm_strided(n, m, dh, T::one(), p, (m, 1), &v[h * dh..], (d, 1), T::zero(), &mut out[h * dh..], (d, 1));
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    n: usize,
    m: usize,
    d: usize,
    heads: usize,
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
    mut dv: Option<&mut [T]>,
) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dp = vec![T::zero(); n * m];
    let mut ds = vec![T::zero(); n * m];
    for h in 0..heads {
        let p = &probs[h * n * m..(h + 1) * n * m];
        if let Some(dv) = dv.as_deref_mut() {
            gemm_strided(m, n, dh, T::one(), p, (1, m), &dout[h * dh..], (d, 1), T::one(), &mut dv[h * dh..], (d, 1));
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        gemm_strided(n, dh, m, T::one(), &dout[h * dh..], (d, 1), &v[h * dh..], (1, d), T::zero(), &mut dp, (m, 1));
        for x in ds.iter_mut() {
            *x = T::zero();
        }
        softmax_groups_backward(p, &dp, m, &mut ds);
        if let Some(dq) = dq.as_deref_mut() {
            gemm_strided(n, m, dh, scale, &ds, (m, 1), &k[h * dh..], (d, 1), T::one(), &mut dq[h * dh..], (d, 1));
        }
        if let Some(dk) = dk.as_deref_mut() {
            gemm_strided(m, n, dh, scale, &ds, (1, m), &q[h * dh..], (d, 1), T::one(), &mut dk[h * dh..], (d, 1));
        }
    }
}

/// Geometry of a deformable sampling op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct DeformGeom {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub points: usize,
}

impl DeformGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    #[inline]
    fn pixel<T2: Real>(&self, lx: T2, ly: T2) -> (T2, T2) {
        let half = T2::of(0.5);
        (lx * T2::of(self.width as f64) - half, ly * T2::of(self.height as f64) - half)
    }
}

/// `out[i, head] = sum_p weight[i, head, p] * bilinear(value[head], loc[i, head, p])`.
/// Locations are normalised to `[0, 1]` with pixel centres at `(j + 0.5) / width`.
pub(crate) fn deform_forward<T: Real>(value: &[T], locs: &[T], weights: &[T], n: usize, g: &DeformGeom) -> Vec<T> {
    let dh = g.head_dim();
    let hp = g.heads * g.points;
    let mut out = vec![T::zero(); n * g.dim];
    for i in 0..n {
        for h in 0..g.heads {
            let o = &mut out[i * g.dim + h * dh..i * g.dim + (h + 1) * dh];
            for p in 0..g.points {
                let slot = h * g.points + p;
                let a = weights[i * hp + slot];
                let (x, y) = g.pixel(locs[(i * hp + slot) * 2], locs[(i * hp + slot) * 2 + 1]);
                for c in bilinear_corners(x, y, g.width, g.height).iter().flatten() {
                    let coef = a * c.weight;
                    let src = &value[c.index * g.dim + h * dh..c.index * g.dim + (h + 1) * dh];
                    for (dst, &s) in o.iter_mut().zip(src) {
                        *dst += coef * s;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_backward<T: Real>(
    value: &[T],
    locs: &[T],
    weights: &[T],
    dout: &[T],
    n: usize,
    g: &DeformGeom,
    mut dvalue: Option<&mut [T]>,
    mut dlocs: Option<&mut [T]>,
    mut dweights: Option<&mut [T]>,
) {
    let dh = g.head_dim();
    let hp = g.heads * g.points;
    let sx = T::of(g.width as f64);
    let sy = T::of(g.height as f64);
    for i in 0..n {
        for h in 0..g.heads {
            let go = &dout[i * g.dim + h * dh..i * g.dim + (h + 1) * dh];
            for p in 0..g.points {
                let slot = h * g.points + p;
                let a = weights[i * hp + slot];
                let (x, y) = g.pixel(locs[(i * hp + slot) * 2], locs[(i * hp + slot) * 2 + 1]);
                let mut da = T::zero();
                let mut dx = T::zero();
                let mut dy = T::zero();
                for c in bilinear_corners(x, y, g.width, g.height).iter().flatten() {
                    let base = c.index * g.dim + h * dh;
                    let dot: T = go.iter().zip(&value[base..base + dh]).map(|(&u, &v)| u * v).sum();
                    da += c.weight * dot;
                    dx += c.dw_dx * dot;
                    dy += c.dw_dy * dot;
                    if let Some(dv) = dvalue.as_deref_mut() {
                        let coef = a * c.weight;
                        for (dst, &u) in dv[base..base + dh].iter_mut().zip(go) {
                            *dst += coef * u;
                        }
                    }
                }
                if let Some(dw) = dweights.as_deref_mut() {
                    dw[i * hp + slot] += da;
                }
                if let Some(dl) = dlocs.as_deref_mut() {
                    dl[(i * hp + slot) * 2] += a * dx * sx;
                    dl[(i * hp + slot) * 2 + 1] += a * dy * sy;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corners_at_grid_point_select_single_cell() {
        let cs = bilinear_corners(1.0f64, 2.0, 4, 3);
        let live: Vec<_> = cs.iter().flatten().filter(|c| c.weight != 0.0).collect();
        assert_eq!(live.len(), 1);
        assert_eq!(live[0].index, 2 * 4 + 1);
        assert_eq!(live[0].weight, 1.0);
    }

    #[test]
    fn corners_far_outside_are_empty() {
        assert!(bilinear_corners(-1.5f64, 0.0, 4, 4).iter().all(|c| c.is_none()));
        assert!(bilinear_corners(0.0f64, 4.0, 4, 4).iter().all(|c| c.is_none()));
        assert!(bilinear_corners(f64::NAN, 0.0, 4, 4).iter().all(|c| c.is_none()));
    }

    #[test]
    fn conv_geometry_halves_with_stride_two() {
        let g = ConvGeom::new(3, 64, 64, 3, 2, 1);
        assert_eq!((g.out_h, g.out_w), (32, 32));
    }
}
