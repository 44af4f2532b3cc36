//! Axis-aligned box geometry on normalised `(cx, cy, w, h)` boxes.

/// `(cx, cy, w, h)` to `(x0, y0, x1, y1)`.
#[inline]
pub fn to_corners(b: [f64; 4]) -> [f64; 4] {
    [b[0] - 0.5 * b[2], b[1] - 0.5 * b[3], b[0] + 0.5 * b[2], b[1] + 0.5 * b[3]]
}

#[inline]
pub fn from_corners(c: [f64; 4]) -> [f64; 4] {
    [0.5 * (c[0] + c[2]), 0.5 * (c[1] + c[3]), c[2] - c[0], c[3] - c[1]]
}

#[inline]
fn area(c: [f64; 4]) -> f64 {
    (c[2] - c[0]).max(0.0) * (c[3] - c[1]).max(0.0)
}

/// Intersection and union of two corner-form boxes.
fn inter_union(a: [f64; 4], b: [f64; 4]) -> (f64, f64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    (inter, area(a) + area(b) - inter)
}

pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (i, u) = inter_union(to_corners(a), to_corners(b));
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

/// Generalised IoU, in `(-1, 1]`.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (ca, cb) = (to_corners(a), to_corners(b));
    let (i, u) = inter_union(ca, cb);
    let hull = [ca[0].min(cb[0]), ca[1].min(cb[1]), ca[2].max(cb[2]), ca[3].max(cb[3])];
    let c = area(hull);
    if u <= 0.0 || c <= 0.0 {
        return 0.0;
    }
    i / u - (c - u) / c
}
