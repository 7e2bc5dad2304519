//! Scene candidates: regions of interest with boxes, grasps and embeddings.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::grasp::{GraspCandidate, GraspRect};
use crate::kb::normalize_ident;

/// Axis-aligned box: top-left corner plus extent, in pixels. Serialized as
/// `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneCandidate {
    pub roi_id: String,
    pub bbox: BBox,
    #[serde(default)]
    pub grasps: Vec<GraspCandidate>,
    pub embedding_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub verb: String,
    pub target_roi_id: String,
    pub target_bbox: BBox,
    pub gt_grasp_rects: Vec<GraspRect>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub candidates: Vec<SceneCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

/// One broken scene invariant, located by a field path such as
/// `candidates[2].grasps[0].score`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for SceneIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl Scene {
    pub fn candidate(&self, roi_id: &str) -> Option<&SceneCandidate> {
        self.candidates.iter().find(|c| c.roi_id == roi_id)
    }

    pub fn validate(&self) -> Vec<SceneIssue> {
        let mut issues = Vec::new();
        let mut issue = |path: String, message: &str| {
            issues.push(SceneIssue { path, message: message.to_string() })
        };
        if self.candidates.is_empty() {
            issue("candidates".into(), "scene has no candidates");
        }
        let mut seen = HashSet::new();
        for (i, c) in self.candidates.iter().enumerate() {
            let at = format!("candidates[{i}]");
            if !seen.insert(c.roi_id.as_str()) {
                issue(format!("{at}.roi_id"), "duplicate roi_id");
            }
            if !c.bbox.is_valid() {
                issue(format!("{at}.bbox"), "box needs finite coordinates and positive extent");
            }
            for (j, g) in c.grasps.iter().enumerate() {
                if !(g.score > 0.0 && g.score <= 1.0) {
                    issue(format!("{at}.grasps[{j}].score"), "grasp score must be in (0, 1]");
                }
                if !g.rect.is_valid() {
                    issue(format!("{at}.grasps[{j}].rect"), "rectangle needs positive extent");
                }
            }
            if let Some(label) = &c.hypothesis_label {
                if normalize_ident(label).is_err() {
                    issue(format!("{at}.hypothesis_label"), "not a valid identifier");
                }
            }
        }
        if let Some(gt) = &self.ground_truth {
            if self.candidate(&gt.target_roi_id).is_none() {
                issue("ground_truth.target_roi_id".into(), "target_roi_id is not a candidate");
            }
            if normalize_ident(&gt.verb).is_err() {
                issue("ground_truth.verb".into(), "not a valid identifier");
            }
            if !gt.target_bbox.is_valid() {
                issue("ground_truth.target_bbox".into(), "box needs finite coordinates and positive extent");
            }
            for (j, r) in gt.gt_grasp_rects.iter().enumerate() {
                if !r.is_valid() {
                    issue(format!("ground_truth.gt_grasp_rects[{j}]"), "rectangle needs positive extent");
                }
            }
        }
        issues
    }
}
