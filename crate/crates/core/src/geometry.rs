//! Planar geometry: points, range multilateration and robust location
//! estimators (coordinate-wise and weighted L1 medians).

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Anchor triangles with a smaller area than this (m²) are treated as collinear.
pub const DEGENERATE_AREA: f64 = 1e-6;
/// Solver stops once a step is shorter than this (m).
pub const STEP_TOLERANCE: f64 = 1e-9;
/// Iteration cap for the range solver.
pub const MAX_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("anchor geometry is degenerate (collinear or coincident anchors)")]
    DegenerateGeometry,
    #[error("solver did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("empty point set")]
    EmptySet,
    #[error("all weights are zero")]
    AllZeroWeights,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// A point (or displacement) in the plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dot(&self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: Point2) -> f64 {
        (*self - other).norm()
    }

    pub fn distance_squared(&self, other: Point2) -> f64 {
        let d = *self - other;
        d.dot(d)
    }

    /// Rotate by `angle` radians about the origin.
    pub fn rotated(&self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Points paired with nonnegative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPointSet {
    points: Vec<Point2>,
    weights: Vec<f64>,
}

impl WeightedPointSet {
    pub fn new(points: Vec<Point2>, weights: Vec<f64>) -> Result<Self, GeometryError> {
        if points.len() != weights.len() {
            return Err(GeometryError::LengthMismatch {
                left: points.len(),
                right: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(GeometryError::InvalidInput(format!(
                "weight {w} is not a finite nonnegative value"
            )));
        }
        Ok(Self { points, weights })
    }

    /// Every point with weight one.
    pub fn uniform(points: Vec<Point2>) -> Self {
        let weights = vec![1.0; points.len()];
        Self { points, weights }
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Σ ω ‖x − m‖₁ evaluated at `m`.
    pub fn l1_objective(&self, m: Point2) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * ((p.x - m.x).abs() + (p.y - m.y).abs()))
            .sum()
    }
}

/// Twice the signed area of the triangle (a, b, c).
fn cross(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// True when every triangle spanned by the anchors has area below
/// [`DEGENERATE_AREA`].
pub fn is_degenerate(anchors: &[Point2]) -> bool {
    let n = anchors.len();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if 0.5 * cross(anchors[i], anchors[j], anchors[k]).abs() >= DEGENERATE_AREA {
                    return false;
                }
            }
        }
    }
    true
}

fn check_inputs(anchors: &[Point2], ranges: &[f64], weights: Option<&[f64]>) -> Result<(), GeometryError> {
    if anchors.len() != ranges.len() {
        return Err(GeometryError::LengthMismatch {
            left: anchors.len(),
            right: ranges.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != anchors.len() {
            return Err(GeometryError::LengthMismatch {
                left: anchors.len(),
                right: w.len(),
            });
        }
        if w.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(GeometryError::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
    }
    if anchors.len() < 3 {
        return Err(GeometryError::InvalidInput(format!(
            "need at least 3 anchors, got {}",
            anchors.len()
        )));
    }
    if anchors.iter().any(|a| !a.is_finite()) {
        return Err(GeometryError::InvalidInput("anchor coordinates must be finite".into()));
    }
    if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(GeometryError::InvalidInput(
            "ranges must be finite and nonnegative".into(),
        ));
    }
    Ok(())
}

/// Closed-form starting point: subtract one range equation from the others
/// and solve the weighted normal equations of the resulting linear system.
fn linearized_solution(anchors: &[Point2], ranges: &[f64], weights: &[f64]) -> Option<Point2> {
    // Reference equation: the most heavily weighted anchor.
    let r = (0..anchors.len()).max_by(|&a, &b| weights[a].total_cmp(&weights[b]).then(b.cmp(&a)))?;
    let z0 = anchors[r];
    let d0 = ranges[r];
    let k0 = z0.dot(z0) - d0 * d0;
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in (0..anchors.len()).filter(|&i| i != r) {
        let z = anchors[i];
        let row = (z - z0) * 2.0;
        let rhs = z.dot(z) - ranges[i] * ranges[i] - k0;
        let w = weights[i];
        a11 += w * row.x * row.x;
        a12 += w * row.x * row.y;
        a22 += w * row.y * row.y;
        b1 += w * row.x * rhs;
        b2 += w * row.y * rhs;
    }
    let det = a11 * a22 - a12 * a12;
    let scale = (a11 * a11 + a22 * a22 + 2.0 * a12 * a12).max(f64::MIN_POSITIVE);
    if det.abs() <= 1e-14 * scale {
        return None;
    }
    let p = Point2::new((a22 * b1 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det);
    p.is_finite().then_some(p)
}

fn weighted_cost(anchors: &[Point2], ranges: &[f64], weights: &[f64], p: Point2) -> f64 {
    anchors
        .iter()
        .zip(ranges)
        .zip(weights)
        .map(|((z, d), w)| {
            let r = p.distance(*z) - d;
            w * r * r
        })
        .sum()
}

/// Levenberg–Marquardt on Σ ω (‖p − z‖ − d)², started from the linearized
/// solution. Returns the converged point.
fn solve_ranges(anchors: &[Point2], ranges: &[f64], weights: &[f64]) -> Result<Point2, GeometryError> {
    let active: Vec<Point2> = anchors
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(a, _)| *a)
        .collect();
    if active.len() < 3 || is_degenerate(&active) {
        return Err(GeometryError::DegenerateGeometry);
    }
    let mut p = linearized_solution(anchors, ranges, weights).ok_or(GeometryError::DegenerateGeometry)?;
    let mut cost = weighted_cost(anchors, ranges, weights, p);
    let mut damping = 1e-6;

    for _ in 0..MAX_ITERATIONS {
        let (mut h11, mut h12, mut h22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        // Full Hessian: the Gauss-Newton term plus the residual curvature term,
        // which matters when large residuals make Gauss-Newton crawl.
        let (mut c11, mut c12, mut c22) = (0.0, 0.0, 0.0);
        for ((z, d), w) in anchors.iter().zip(ranges).zip(weights) {
            let diff = p - *z;
            let dist = diff.norm();
            // The residual gradient is undefined exactly on an anchor; that
            // term contributes no direction information there.
            let (jx, jy) = if dist > 0.0 {
                (diff.x / dist, diff.y / dist)
            } else {
                (0.0, 0.0)
            };
            let r = dist - d;
            h11 += w * jx * jx;
            h12 += w * jx * jy;
            h22 += w * jy * jy;
            g1 += w * jx * r;
            g2 += w * jy * r;
            if dist > 0.0 {
                let k = w * r / dist;
                c11 += k * (1.0 - jx * jx);
                c12 -= k * jx * jy;
                c22 += k * (1.0 - jy * jy);
            }
        }
        let (f11, f12, f22) = (h11 + c11, h12 + c12, h22 + c22);
        if f11 > 0.0 && f22 > 0.0 && f11 * f22 - f12 * f12 > 0.0 {
            (h11, h12, h22) = (f11, f12, f22);
        }

        let mut accepted = None;
        for _ in 0..40 {
            let d11 = h11 + damping * h11.max(1e-12);
            let d22 = h22 + damping * h22.max(1e-12);
            let det = d11 * d22 - h12 * h12;
            if det.abs() < f64::MIN_POSITIVE {
                damping *= 10.0;
                continue;
            }
            let step = Point2::new(-(d22 * g1 - h12 * g2) / det, -(d11 * g2 - h12 * g1) / det);
            let candidate = p + step;
            let candidate_cost = weighted_cost(anchors, ranges, weights, candidate);
            if candidate_cost <= cost {
                accepted = Some((candidate, candidate_cost, step.norm()));
                damping = (damping * 0.1).max(1e-12);
                break;
            }
            if step.norm() < STEP_TOLERANCE {
                // Already at the floating-point floor of the objective.
                return Ok(p);
            }
            damping *= 10.0;
        }

        match accepted {
            Some((candidate, candidate_cost, step_norm)) => {
                p = candidate;
                cost = candidate_cost;
                if step_norm < STEP_TOLERANCE {
                    return Ok(p);
                }
            }
            None => return Ok(p),
        }
    }
    Err(GeometryError::NoConvergence {
        iterations: MAX_ITERATIONS,
    })
}

/// Least-squares position from anchor ranges: minimizes Σ (‖p − zₙ‖ − dₙ)².
pub fn multilaterate(anchors: &[Point2], ranges: &[f64]) -> Result<Point2, GeometryError> {
    check_inputs(anchors, ranges, None)?;
    let weights = vec![1.0; anchors.len()];
    solve_ranges(anchors, ranges, &weights)
}

/// Weighted variant minimizing Σ ωₙ (‖p − zₙ‖ − dₙ)². Zero-weight anchors are
/// ignored for the degeneracy test.
pub fn weighted_multilaterate(anchors: &[Point2], ranges: &[f64], weights: &[f64]) -> Result<Point2, GeometryError> {
    check_inputs(anchors, ranges, Some(weights))?;
    solve_ranges(anchors, ranges, weights)
}

fn sort_values(values: &mut [f64]) {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
}

/// Scalar median; the mean of the two middle order statistics for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    sort_values(&mut v);
    Some(median_of_sorted(&v))
}

fn median_of_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-axis median of a point set.
pub fn coordinate_median(points: &[Point2]) -> Result<Point2, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::EmptySet);
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let mut ys: Vec<f64> = points.iter().map(|p| p.y).collect();
    sort_values(&mut xs);
    sort_values(&mut ys);
    Ok(Point2::new(median_of_sorted(&xs), median_of_sorted(&ys)))
}

/// Minimizer of Σ ωᵢ |xᵢ − m|.
///
/// Picks the lowest order statistic whose cumulative weight reaches half the
/// total. When the objective is flat to its right (cumulative weight exactly
/// balanced), the minimizers form an interval up to the next positively
/// weighted value and its midpoint is returned.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> Result<f64, GeometryError> {
    if values.len() != weights.len() {
        return Err(GeometryError::LengthMismatch {
            left: values.len(),
            right: weights.len(),
        });
    }
    if values.is_empty() {
        return Err(GeometryError::EmptySet);
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let n = order.len();

    // below[k] = weight of the k+1 smallest values; above[k] = weight of the
    // rest. Both are accumulated from their own end so that symmetric weight
    // patterns compare bit-exactly.
    let mut below = vec![0.0; n];
    let mut acc = 0.0;
    for (k, &i) in order.iter().enumerate() {
        acc += weights[i];
        below[k] = acc;
    }
    let mut above = vec![0.0; n];
    acc = 0.0;
    for k in (0..n).rev() {
        above[k] = acc;
        acc += weights[order[k]];
    }
    if !(acc > 0.0) {
        return Err(GeometryError::AllZeroWeights);
    }

    let k = (0..n)
        .find(|&k| below[k] >= above[k])
        .expect("the last prefix always carries the full weight");
    let lower = values[order[k]];
    if below[k] == above[k] {
        if let Some(&j) = order[k + 1..].iter().find(|&&j| weights[j] > 0.0) {
            return Ok((lower + values[j]) / 2.0);
        }
    }
    Ok(lower)
}

/// Weighted L1 median of a planar point set. The L1 norm separates per axis,
/// so this is the per-axis weighted median.
pub fn weighted_l1_median(set: &WeightedPointSet) -> Result<Point2, GeometryError> {
    if set.is_empty() {
        return Err(GeometryError::EmptySet);
    }
    let xs: Vec<f64> = set.points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = set.points.iter().map(|p| p.y).collect();
    Ok(Point2::new(
        weighted_median(&xs, &set.weights)?,
        weighted_median(&ys, &set.weights)?,
    ))
}
