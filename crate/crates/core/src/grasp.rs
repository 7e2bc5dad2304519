//! Grasp scoring and the oriented-rectangle grasp success test.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_ANGLE_TOL_DEG: f64 = 30.0;
pub const DEFAULT_JACCARD_MIN: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraspError {
    #[error("grasp score {0} outside (0, 1]")]
    ScoreOutOfRange(f64),
    #[error("no grasp candidates")]
    Empty,
    #[error("no ground-truth grasp rectangles")]
    NoGroundTruth,
}

/// Planar grasp rectangle. `theta_deg` is kept in `(-90, 90]`; a rectangle
/// rotated by 180° is the same grasp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RectRepr")]
pub struct GraspRect {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta_deg: f64,
}

#[derive(Deserialize)]
struct RectRepr {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta_deg: f64,
}

impl From<RectRepr> for GraspRect {
    fn from(r: RectRepr) -> Self {
        GraspRect::new(r.cx, r.cy, r.w, r.h, r.theta_deg)
    }
}

/// Maps any angle onto `(-90, 90]`.
pub fn normalize_theta(theta_deg: f64) -> f64 {
    let t = theta_deg.rem_euclid(180.0);
    if t > 90.0 {
        t - 180.0
    } else {
        t
    }
}

/// Angle between two grasp orientations, modulo 180°, in `[0, 90]`.
pub fn angular_deviation(a_deg: f64, b_deg: f64) -> f64 {
    let d = (a_deg - b_deg).rem_euclid(180.0);
    d.min(180.0 - d)
}

impl GraspRect {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta_deg: f64) -> Self {
        GraspRect { cx, cy, w, h, theta_deg: normalize_theta(theta_deg) }
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.theta_deg].iter().all(|v| v.is_finite())
            && self.w > 0.0
            && self.h > 0.0
            && self.w.is_finite()
            && self.h.is_finite()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners in counter-clockwise order (y up).
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta_deg.to_radians().sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .map(|(x, y)| [self.cx + x * c - y * s, self.cy + x * s + y * c])
    }

    /// Same rectangle under a rigid motion: rotate by `angle_deg` about the
    /// origin, then translate.
    pub fn transformed(&self, angle_deg: f64, tx: f64, ty: f64) -> GraspRect {
        let (s, c) = angle_deg.to_radians().sin_cos();
        GraspRect::new(
            self.cx * c - self.cy * s + tx,
            self.cx * s + self.cy * c + ty,
            self.w,
            self.h,
            self.theta_deg + angle_deg,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    pub rect: GraspRect,
    pub score: f64,
    /// Position (m) and roll/pitch/yaw (rad), carried through untouched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose6d: Option<[f64; 6]>,
}

impl GraspCandidate {
    pub fn new(rect: GraspRect, score: f64) -> Self {
        GraspCandidate { rect, score, pose6d: None }
    }
}

fn check_scores(candidates: &[GraspCandidate]) -> Result<(), GraspError> {
    match candidates.iter().find(|g| !(g.score > 0.0 && g.score <= 1.0)) {
        Some(g) => Err(GraspError::ScoreOutOfRange(g.score)),
        None => Ok(()),
    }
}

/// `-ln(max score)`, or `+inf` for an empty set so the region can never be
/// selected.
pub fn grasp_energy(candidates: &[GraspCandidate]) -> Result<f64, GraspError> {
    match best_grasp(candidates) {
        Ok((_, g)) => Ok(-g.score.ln() + 0.0),
        Err(GraspError::Empty) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

/// Highest-scoring candidate and its index; ties go to the lowest index.
pub fn best_grasp(candidates: &[GraspCandidate]) -> Result<(usize, &GraspCandidate), GraspError> {
    check_scores(candidates)?;
    let mut best: Option<(usize, &GraspCandidate)> = None;
    for (i, g) in candidates.iter().enumerate() {
        if best.is_none_or(|(_, b)| g.score > b.score) {
            best = Some((i, g));
        }
    }
    best.ok_or(GraspError::Empty)
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice.abs() / 2.0
}

/// Keeps the part of `poly` left of the directed line `a → b`.
fn clip_halfplane(poly: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let s = poly[i];
        let e = poly[(i + 1) % poly.len()];
        let (ds, de) = (side(s), side(e));
        if ds >= 0.0 {
            out.push(s);
        }
        if (ds >= 0.0) != (de >= 0.0) {
            let t = ds / (ds - de);
            out.push([s[0] + (e[0] - s[0]) * t, s[1] + (e[1] - s[1]) * t]);
        }
    }
    out
}

/// Intersection area of two oriented rectangles by clipping one against
/// the four edges of the other.
pub fn rect_intersection_area(a: &GraspRect, b: &GraspRect) -> f64 {
    let clip = b.corners();
    let mut poly = a.corners().to_vec();
    for i in 0..4 {
        poly = clip_halfplane(&poly, clip[i], clip[(i + 1) % 4]);
        if poly.len() < 3 {
            return 0.0;
        }
    }
    polygon_area(&poly)
}

/// Jaccard index (intersection over union) of two oriented rectangles.
pub fn rect_jaccard(a: &GraspRect, b: &GraspRect) -> f64 {
    let inter = rect_intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspCriteria {
    pub angle_tol_deg: f64,
    pub jaccard_min: f64,
}

impl Default for GraspCriteria {
    fn default() -> Self {
        GraspCriteria { angle_tol_deg: DEFAULT_ANGLE_TOL_DEG, jaccard_min: DEFAULT_JACCARD_MIN }
    }
}

impl GraspCriteria {
    /// Angular deviation at most the tolerance and Jaccard strictly above
    /// the minimum.
    pub fn matches(&self, pred: &GraspRect, gt: &GraspRect) -> bool {
        angular_deviation(pred.theta_deg, gt.theta_deg) <= self.angle_tol_deg
            && rect_jaccard(pred, gt) > self.jaccard_min
    }
}

/// True when `pred` matches at least one ground-truth rectangle.
pub fn grasp_success(
    pred: &GraspRect,
    gt: &[GraspRect],
    criteria: GraspCriteria,
) -> Result<bool, GraspError> {
    if gt.is_empty() {
        return Err(GraspError::NoGroundTruth);
    }
    Ok(gt.iter().any(|g| criteria.matches(pred, g)))
}
