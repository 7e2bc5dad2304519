//! Grounding service: a versioned knowledge base, a scene store and an
//! embedding table behind an HTTP API.
//!
//! Edits are serialized through a single writer and every committed batch
//! is recorded in an audit log. Queries run against an immutable snapshot
//! of the requested version, so they never see a half-applied batch.

mod http;

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use affground_core::dataio::{self, DataError};
use affground_core::engine::{explain, ground, EnergyWeights, GroundError, GroundingConfig, HypothesisMode};
use affground_core::kb::{EdgeEdit, KbError, KnowledgeBase, PathCombiner};
use affground_core::percept::EmbeddingTable;
use affground_core::scene::Scene;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use http::{router, serve};

/// Number of knowledge-base versions that stay queryable.
pub const RETAINED_VERSIONS: usize = 32;

pub const DEFAULT_PORT: u16 = 8731;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    NotFound,
    Conflict,
    Unprocessable,
}

impl ErrorKind {
    pub fn status(self) -> u16 {
        match self {
            ErrorKind::NotFound => 404,
            ErrorKind::Conflict => 409,
            ErrorKind::Unprocessable => 422,
        }
    }

    fn code(self) -> &'static str {
        match self {
            ErrorKind::NotFound => "not_found",
            ErrorKind::Conflict => "conflict",
            ErrorKind::Unprocessable => "unprocessable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct ApiError {
    pub kind: ErrorKind,
    pub message: String,
}

impl ApiError {
    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError { kind: ErrorKind::NotFound, message: message.into() }
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        ApiError { kind: ErrorKind::Conflict, message: message.into() }
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        ApiError { kind: ErrorKind::Unprocessable, message: message.into() }
    }

    pub fn body(&self) -> Value {
        json!({ "error": { "status": self.kind.status(), "code": self.kind.code(), "message": self.message } })
    }
}

impl From<GroundError> for ApiError {
    fn from(e: GroundError) -> Self {
        match &e {
            GroundError::Kb(k) if k.is_not_found() => ApiError::not_found(e.to_string()),
            GroundError::UnknownRoi(_) => ApiError::not_found(e.to_string()),
            _ => ApiError::unprocessable(e.to_string()),
        }
    }
}

impl From<KbError> for ApiError {
    /// Any invalid edit is a 422, unknown endpoints included.
    fn from(e: KbError) -> Self {
        ApiError::unprocessable(e.to_string())
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Layout(String),
}

/// A grounding query. Exactly one of `scene_id` and `scene` must be given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<Scene>,
    pub verb: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<EnergyWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kb_version: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<HypothesisMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combiner: Option<PathCombiner>,
    #[serde(default)]
    pub explain: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WhatIfRequest {
    #[serde(default)]
    pub edits: Vec<EdgeEdit>,
    #[serde(flatten)]
    pub query: GroundRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub timestamp: String,
    pub edits: Vec<EdgeEdit>,
    pub old_version: u64,
    pub new_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOutcome {
    pub old_version: u64,
    pub new_version: u64,
}

struct KbState {
    base: Arc<KnowledgeBase>,
    /// Oldest first; the last entry is current.
    history: VecDeque<Arc<KnowledgeBase>>,
    audit: Vec<AuditEntry>,
}

pub struct Service {
    kb: RwLock<KbState>,
    scenes: BTreeMap<String, Scene>,
    embeddings: EmbeddingTable,
    defaults: GroundingConfig,
}

impl Service {
    pub fn new(kb: KnowledgeBase, scenes: Vec<Scene>, embeddings: EmbeddingTable) -> Self {
        let kb = Arc::new(kb);
        Service {
            kb: RwLock::new(KbState {
                base: kb.clone(),
                history: VecDeque::from([kb]),
                audit: Vec::new(),
            }),
            scenes: scenes.into_iter().map(|s| (s.scene_id.clone(), s)).collect(),
            embeddings,
            defaults: GroundingConfig::default(),
        }
    }

    /// Grounding defaults for requests that name no mode, temperature or
    /// combiner.
    pub fn with_defaults(mut self, defaults: GroundingConfig) -> Self {
        self.defaults = defaults;
        self
    }

    /// Loads `kb.json`, `embeddings.bin` or `embeddings.json`, and every
    /// `scenes/*.json` from a data directory.
    pub fn load(dir: &Path) -> Result<Service, LoadError> {
        let kb = dataio::load_kb_file(&dir.join("kb.json"))?;
        let emb_path = ["embeddings.bin", "embeddings.json"]
            .iter()
            .map(|f| dir.join(f))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                LoadError::Layout(format!("{}: no embeddings.bin or embeddings.json", dir.display()))
            })?;
        let embeddings = dataio::load_embeddings_file(&emb_path)?;
        let scene_dir: PathBuf = dir.join("scenes");
        let scenes = if scene_dir.is_dir() { dataio::load_scene_dir(&scene_dir)? } else { Vec::new() };
        Ok(Service::new(kb, scenes, embeddings))
    }

    pub fn current_kb(&self) -> Arc<KnowledgeBase> {
        self.kb.read().history.back().expect("history is never empty").clone()
    }

    pub fn kb_version(&self) -> u64 {
        self.current_kb().version()
    }

    /// A retained version, or 409.
    pub fn kb_at(&self, version: Option<u64>) -> Result<Arc<KnowledgeBase>, ApiError> {
        let state = self.kb.read();
        match version {
            None => Ok(state.history.back().expect("history is never empty").clone()),
            Some(v) => state.history.iter().find(|kb| kb.version() == v).cloned().ok_or_else(|| {
                let (lo, hi) = (state.history[0].version(), state.history.back().unwrap().version());
                ApiError::conflict(format!("kb_version {v} is not retained (available {lo}..={hi})"))
            }),
        }
    }

    pub fn scene_ids(&self) -> Vec<&str> {
        self.scenes.keys().map(String::as_str).collect()
    }

    pub fn scene(&self, id: &str) -> Result<&Scene, ApiError> {
        self.scenes.get(id).ok_or_else(|| ApiError::not_found(format!("unknown scene `{id}`")))
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        self.kb.read().audit.clone()
    }

    fn resolve_scene<'a>(&'a self, req: &'a GroundRequest) -> Result<&'a Scene, ApiError> {
        match (&req.scene_id, &req.scene) {
            (Some(id), None) => self.scene(id),
            (None, Some(scene)) => Ok(scene),
            (Some(_), Some(_)) => Err(ApiError::unprocessable("give either scene_id or scene, not both")),
            (None, None) => Err(ApiError::unprocessable("missing scene_id or inline scene")),
        }
    }

    fn run(&self, req: &GroundRequest, kb: &KnowledgeBase, transient: bool) -> Result<Value, ApiError> {
        let scene = self.resolve_scene(req)?;
        let weights = req.weights.unwrap_or_default();
        let config = GroundingConfig {
            mode: req.mode.unwrap_or(self.defaults.mode),
            temperature: req.temperature.unwrap_or(self.defaults.temperature),
            combiner: req.combiner.unwrap_or(self.defaults.combiner),
        };
        let result = ground(scene, &req.verb, kb, &self.embeddings, &weights, &config)?;
        let explanations = if req.explain {
            Some(
                result
                    .ranked
                    .iter()
                    .map(|b| explain(&result, &b.roi_id))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        Ok(json!({
            "result": dataio::result_value(&result, explanations.as_deref()),
            "transient": transient,
        }))
    }

    /// Grounds against the requested version, or the current one.
    pub fn handle_ground(&self, req: &GroundRequest) -> Result<Value, ApiError> {
        let kb = self.kb_at(req.kb_version)?;
        self.run(req, &kb, false)
    }

    /// Applies a batch atomically: either every edit commits as one new
    /// version or nothing changes.
    pub fn handle_kb_patch(&self, edits: &[EdgeEdit]) -> Result<PatchOutcome, ApiError> {
        if edits.is_empty() {
            return Err(ApiError::unprocessable("edit batch is empty"));
        }
        let mut state = self.kb.write();
        let current = state.history.back().expect("history is never empty").clone();
        let next = current.apply_edits(edits)?;
        let outcome = PatchOutcome { old_version: current.version(), new_version: next.version() };
        state.audit.push(AuditEntry {
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true),
            edits: edits.to_vec(),
            old_version: outcome.old_version,
            new_version: outcome.new_version,
        });
        state.history.push_back(Arc::new(next));
        while state.history.len() > RETAINED_VERSIONS {
            state.history.pop_front();
        }
        Ok(outcome)
    }

    /// Grounds against the current (or requested) version plus `edits`
    /// without committing anything.
    pub fn handle_whatif(&self, req: &WhatIfRequest) -> Result<Value, ApiError> {
        let base = self.kb_at(req.query.kb_version)?;
        let kb = if req.edits.is_empty() { base } else { Arc::new(base.apply_edits(&req.edits)?) };
        self.run(&req.query, &kb, true)
    }

    /// Rebuilds the current knowledge base from the starting one and the
    /// audit log.
    pub fn replay(&self) -> Result<KnowledgeBase, KbError> {
        let state = self.kb.read();
        state
            .audit
            .iter()
            .try_fold((*state.base).clone(), |kb, entry| kb.apply_edits(&entry.edits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use affground_core::percept::EmbeddingVector;
    use affground_core::{BBox, GraspCandidate, GraspRect, SceneCandidate};

    fn service() -> Service {
        let kb = KnowledgeBase::builder()
            .vp("write", "tip_shaped", 0.9)
            .po("tip_shaped", "pen", 0.8)
            .object("mug")
            .build()
            .unwrap();
        let cand = |id: &str, label: &str| SceneCandidate {
            roi_id: id.into(),
            bbox: BBox::new(0.0, 0.0, 5.0, 5.0),
            grasps: vec![GraspCandidate::new(GraspRect::new(2.0, 2.0, 2.0, 1.0, 0.0), 0.8)],
            embedding_id: format!("roi:{id}"),
            hypothesis_label: Some(label.into()),
        };
        let scene = Scene { scene_id: "desk".into(), candidates: vec![cand("a", "pen"), cand("b", "mug")], ground_truth: None };
        let emb = EmbeddingTable::from_vectors(
            2,
            [
                EmbeddingVector::new("verb:write", vec![1.0, 0.0]),
                EmbeddingVector::new("roi:a", vec![1.0, 1.0]),
                EmbeddingVector::new("roi:b", vec![1.0, 1.0]),
                EmbeddingVector::new("object:pen", vec![1.0, 0.2]),
                EmbeddingVector::new("object:mug", vec![0.2, 1.0]),
            ],
        )
        .unwrap();
        Service::new(kb, vec![scene], emb)
    }

    #[test]
    fn version_history_is_bounded() {
        let s = service();
        for i in 0..40 {
            s.handle_kb_patch(&[EdgeEdit::vp("write", "tip_shaped", f64::from(i) / 40.0)]).unwrap();
        }
        assert_eq!(s.kb_version(), 41);
        assert!(s.kb_at(Some(41 - 31)).is_ok());
        assert_eq!(s.kb_at(Some(41 - 32)).unwrap_err().kind, ErrorKind::Conflict);
        assert_eq!(s.audit().len(), 40);
        assert_eq!(s.replay().unwrap(), *s.current_kb());
    }

    #[test]
    fn scene_selection_rules() {
        let s = service();
        let both = GroundRequest {
            scene_id: Some("desk".into()),
            scene: Some(s.scene("desk").unwrap().clone()),
            verb: "write".into(),
            ..Default::default()
        };
        assert_eq!(s.handle_ground(&both).unwrap_err().kind, ErrorKind::Unprocessable);
        let none = GroundRequest { verb: "write".into(), ..Default::default() };
        assert_eq!(s.handle_ground(&none).unwrap_err().kind, ErrorKind::Unprocessable);
        let missing = GroundRequest { scene_id: Some("nope".into()), verb: "write".into(), ..Default::default() };
        assert_eq!(s.handle_ground(&missing).unwrap_err().kind, ErrorKind::NotFound);
    }

    #[test]
    fn failed_batch_changes_nothing() {
        let s = service();
        let err = s
            .handle_kb_patch(&[EdgeEdit::vp("write", "tip_shaped", 0.1), EdgeEdit::po("tip_shaped", "pen", 1.5)])
            .unwrap_err();
        assert_eq!(err.kind, ErrorKind::Unprocessable);
        assert_eq!(s.kb_version(), 1);
        assert!(s.audit().is_empty());
        assert_eq!(s.handle_kb_patch(&[]).unwrap_err().kind, ErrorKind::Unprocessable);
    }
}
