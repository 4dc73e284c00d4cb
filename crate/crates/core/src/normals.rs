//! Normal channels from neighbouring pixels of the range image.
//!
//! For each valid pixel the horizontal and vertical tangents are central
//! differences of the neighbouring 3D points, falling back to a one-sided
//! difference against the pixel itself when one neighbour is empty. The
//! normal is their normalized cross product, oriented toward the sensor.

use crate::projection::RangeImage;

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn point(img: &RangeImage, row: usize, col: usize) -> Vec3 {
    let p = img.xyz(row, col);
    [p[0] as f64, p[1] as f64, p[2] as f64]
}

/// Tangent from the `before`/`after` neighbours of `center`.
fn tangent(center: Vec3, before: Option<Vec3>, after: Option<Vec3>) -> Option<Vec3> {
    match (before, after) {
        (Some(b), Some(a)) => Some(sub(a, b)),
        (None, Some(a)) => Some(sub(a, center)),
        (Some(b), None) => Some(sub(center, b)),
        (None, None) => None,
    }
}

/// Unit normal at one pixel, or zero when it is undefined.
pub fn normal_at(img: &RangeImage, row: usize, col: usize) -> [f32; 3] {
    if !img.is_valid(row, col) {
        return [0.0; 3];
    }
    let (h, w) = (img.height(), img.width());
    let neighbour = |r: Option<usize>, c: Option<usize>| match (r, c) {
        (Some(r), Some(c)) if r < h && c < w && img.is_valid(r, c) => Some(point(img, r, c)),
        _ => None,
    };
    let p = point(img, row, col);
    let dh = tangent(
        p,
        neighbour(Some(row), col.checked_sub(1)),
        neighbour(Some(row), Some(col + 1)),
    );
    let dv = tangent(
        p,
        neighbour(row.checked_sub(1), Some(col)),
        neighbour(Some(row + 1), Some(col)),
    );
    let (Some(dh), Some(dv)) = (dh, dv) else {
        return [0.0; 3];
    };
    let mut n = cross(dh, dv);
    let len = dot(n, n).sqrt();
    if !(len > 1e-12) {
        return [0.0; 3];
    }
    let sign = if dot(n, p) > 0.0 { -1.0 } else { 1.0 };
    for v in n.iter_mut() {
        *v *= sign / len;
    }
    [n[0] as f32, n[1] as f32, n[2] as f32]
}

/// Returns `img` with channels n1..n3 filled.
pub fn compute_normals(img: &RangeImage) -> RangeImage {
    let mut out = img.clone();
    for row in 0..img.height() {
        for col in 0..img.width() {
            out.set_normal(row, col, normal_at(img, row, col));
        }
    }
    out
}
