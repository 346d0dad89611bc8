//! Ground-truth manipulation-region masks from facial landmarks.
//!
//! Pixel `(x, y)` is sampled at the point `(x, y)` and belongs to the mask
//! when that point lies inside the hull or on its boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance for the on-boundary test.
const EPS: f64 = 1e-9;

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    /// `[x, y]` in pixel coordinates.
    pub points: Vec<Point>,
    /// `[height, width]`.
    pub image_size: [usize; 2],
}

impl LandmarkSet {
    /// Points clamped into the image rectangle.
    pub fn clamped(&self) -> Vec<Point> {
        let [h, w] = self.image_size;
        let (mx, my) = (w.saturating_sub(1) as f64, h.saturating_sub(1) as f64);
        self.points.iter().map(|p| [p[0].clamp(0.0, mx), p[1].clamp(0.0, my)]).collect()
    }
}

/// `(b − a) × (c − a)`; positive when `a, b, c` turn counter-clockwise.
pub fn cross(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Monotone-chain convex hull in counter-clockwise order, collinear points dropped.
///
/// "Counter-clockwise" is with respect to a y-up frame; in image coordinates
/// (y down) the same list runs clockwise on screen.
pub fn convex_hull(points: &[Point]) -> Result<Vec<Point>> {
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::DegenerateHull("non-finite landmark coordinate".into()));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return Err(Error::DegenerateHull(format!("{} distinct points", pts.len())));
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        return Err(Error::DegenerateHull("all points are collinear".into()));
    }
    Ok(hull)
}

/// Whether `p` is inside or on the boundary of a counter-clockwise convex polygon.
pub fn contains(hull: &[Point], p: Point) -> bool {
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= -EPS)
}

/// Scanline fill of a convex polygon into a `[1, h, w]` binary mask.
pub fn rasterize(hull: &[Point], image_size: [usize; 2]) -> Tensor {
    let [h, w] = image_size;
    let mut data = vec![0.0f32; h * w];
    let n = hull.len();
    for y in 0..h {
        let yf = y as f64;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let (a, b) = (hull[i], hull[(i + 1) % n]);
            let (ymin, ymax) = (a[1].min(b[1]), a[1].max(b[1]));
            if yf < ymin - EPS || yf > ymax + EPS {
                continue;
            }
            if (b[1] - a[1]).abs() <= EPS {
                lo = lo.min(a[0].min(b[0]));
                hi = hi.max(a[0].max(b[0]));
            } else {
                let t = ((yf - a[1]) / (b[1] - a[1])).clamp(0.0, 1.0);
                let x = a[0] + t * (b[0] - a[0]);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
        if lo > hi {
            continue;
        }
        let x0 = (lo - EPS).ceil().max(0.0) as usize;
        let x1 = (hi + EPS).floor();
        if x1 < 0.0 {
            continue;
        }
        let x1 = (x1 as usize).min(w.saturating_sub(1));
        for x in x0..=x1 {
            if x < w && contains(hull, [x as f64, yf]) {
                data[y * w + x] = 1.0;
            }
        }
    }
    Tensor::new(&[1, h, w], data).expect("mask shape")
}

/// Clamp, hull and rasterize.
pub fn mask_from_landmarks(lm: &LandmarkSet) -> Result<Tensor> {
    let hull = convex_hull(&lm.clamped())?;
    Ok(rasterize(&hull, lm.image_size))
}

/// Area of a simple polygon by the shoelace formula.
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}
