//! Evaluation protocols: tiered static evaluation and episode-based
//! functional grounding scored with top-1 accuracy, MRR and nDCG.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::dataio::{self, DataError};
use crate::engine::{ground, EnergyWeights, GroundError, GroundingConfig};
use crate::grasp::{grasp_success, GraspCandidate, GraspCriteria, GraspRect};
use crate::kb::KnowledgeBase;
use crate::percept::EmbeddingTable;
use crate::scene::{BBox, Scene, SceneCandidate};

pub const IOU_MIN: f64 = 0.5;
pub const DEFAULT_EPISODES_PER_VERB: usize = 100;
pub const DEFAULT_EPISODE_CANDIDATES: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scene `{scene}`: {source}")]
    Ground {
        scene: String,
        #[source]
        source: GroundError,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Axis-aligned intersection over union.
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaticTier {
    PerfectGraspAndDetect,
    PerfectGrasp,
    FullPipeline,
}

impl StaticTier {
    pub const ALL: [StaticTier; 3] =
        [StaticTier::PerfectGraspAndDetect, StaticTier::PerfectGrasp, StaticTier::FullPipeline];

    /// Directory and identifier name.
    pub fn id(self) -> &'static str {
        match self {
            StaticTier::PerfectGraspAndDetect => "perfect_grasp_and_detect",
            StaticTier::PerfectGrasp => "perfect_grasp",
            StaticTier::FullPipeline => "full_pipeline",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            StaticTier::PerfectGraspAndDetect => "Perfect Grasp & Detect",
            StaticTier::PerfectGrasp => "Perfect Grasp",
            StaticTier::FullPipeline => "Full Pipeline",
        }
    }

    pub fn grasp_source(self) -> &'static str {
        match self {
            StaticTier::FullPipeline => "provider",
            _ => "ground_truth",
        }
    }

    pub fn roi_source(self) -> &'static str {
        match self {
            StaticTier::PerfectGraspAndDetect => "ground_truth",
            _ => "provider",
        }
    }
}

impl fmt::Display for StaticTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for StaticTier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StaticTier::ALL
            .into_iter()
            .find(|t| t.id() == s)
            .ok_or_else(|| format!("unknown tier `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticOutcome {
    pub roi_correct: bool,
    pub grasp_correct: bool,
    pub success: bool,
    pub tier: StaticTier,
}

/// Scores one prediction. A missing grasp counts as a grasp failure.
pub fn static_episode_eval(
    pred_bbox: &BBox,
    pred_grasp: Option<&GraspRect>,
    target_bbox: &BBox,
    gt_rects: &[GraspRect],
    tier: StaticTier,
) -> StaticOutcome {
    let roi_correct = bbox_iou(pred_bbox, target_bbox) >= IOU_MIN;
    let grasp_correct = pred_grasp
        .map(|g| grasp_success(g, gt_rects, GraspCriteria::default()).unwrap_or(false))
        .unwrap_or(false);
    StaticOutcome { roi_correct, grasp_correct, success: roi_correct && grasp_correct, tier }
}

/// A ranking with binary relevance labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEpisode {
    pub ranking: Vec<String>,
    pub relevance: BTreeMap<String, u8>,
}

impl RankedEpisode {
    fn is_relevant(&self, id: &str) -> bool {
        self.relevance.get(id).is_some_and(|r| *r > 0)
    }

    fn relevant_count(&self) -> usize {
        self.ranking.iter().filter(|id| self.is_relevant(id)).count()
    }

    /// 1-based rank of the first relevant candidate.
    pub fn first_relevant_rank(&self) -> Result<usize, EvalError> {
        self.ranking
            .iter()
            .position(|id| self.is_relevant(id))
            .map(|i| i + 1)
            .ok_or_else(|| EvalError::Protocol("episode has no relevant candidate".into()))
    }

    pub fn reciprocal_rank(&self) -> Result<f64, EvalError> {
        Ok(1.0 / self.first_relevant_rank()? as f64)
    }

    pub fn ndcg(&self) -> Result<f64, EvalError> {
        let n_rel = self.relevant_count();
        if n_rel == 0 {
            return Err(EvalError::Protocol("episode has no relevant candidate".into()));
        }
        let dcg: f64 = self
            .ranking
            .iter()
            .enumerate()
            .filter(|(_, id)| self.is_relevant(id))
            .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
            .sum();
        let ideal: f64 = (0..n_rel).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
        Ok(dcg / ideal)
    }
}

fn mean_of(
    episodes: &[RankedEpisode],
    f: impl Fn(&RankedEpisode) -> Result<f64, EvalError>,
) -> Result<f64, EvalError> {
    if episodes.is_empty() {
        return Err(EvalError::Protocol("no episodes".into()));
    }
    let sum = episodes.iter().map(f).sum::<Result<f64, _>>()?;
    Ok(sum / episodes.len() as f64)
}

pub fn mrr(episodes: &[RankedEpisode]) -> Result<f64, EvalError> {
    mean_of(episodes, RankedEpisode::reciprocal_rank)
}

pub fn ndcg(episodes: &[RankedEpisode]) -> Result<f64, EvalError> {
    mean_of(episodes, RankedEpisode::ndcg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeMode {
    /// Exactly one relevant candidate.
    #[default]
    Single,
    /// One or more relevant candidates.
    Multi,
}

impl std::str::FromStr for EpisodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(EpisodeMode::Single),
            "multi" => Ok(EpisodeMode::Multi),
            other => Err(format!("unknown episode mode `{other}` (expected single|multi)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeCandidate {
    pub candidate_id: String,
    pub embedding_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationEpisode {
    pub episode_id: String,
    pub verb: String,
    pub candidates: Vec<EpisodeCandidate>,
    pub relevance: BTreeMap<String, u8>,
}

impl EvaluationEpisode {
    pub fn check(&self, mode: EpisodeMode) -> Result<(), EvalError> {
        let fail = |msg: String| Err(EvalError::Protocol(format!("episode `{}`: {msg}", self.episode_id)));
        if self.candidates.len() < 2 {
            return fail("needs at least 2 candidates".into());
        }
        let ids: BTreeSet<&str> = self.candidates.iter().map(|c| c.candidate_id.as_str()).collect();
        if ids.len() != self.candidates.len() {
            return fail("duplicate candidate_id".into());
        }
        if let Some((id, r)) = self.relevance.iter().find(|(_, r)| **r > 1) {
            return fail(format!("relevance of `{id}` is {r}, expected 0 or 1"));
        }
        if let Some(id) = self.relevance.keys().find(|id| !ids.contains(id.as_str())) {
            return fail(format!("relevance names unknown candidate `{id}`"));
        }
        let relevant = self.relevance.values().filter(|r| **r == 1).count();
        match mode {
            EpisodeMode::Single if relevant != 1 => {
                fail(format!("single mode needs exactly one relevant candidate, found {relevant}"))
            }
            EpisodeMode::Multi if relevant == 0 => fail("no relevant candidate".into()),
            _ => Ok(()),
        }
    }

    /// Scene view of the episode. Episodes carry no grasps, so every
    /// candidate gets the same unit-score grasp and the grasp term is 0.
    pub fn to_scene(&self) -> Scene {
        Scene {
            scene_id: self.episode_id.clone(),
            candidates: self
                .candidates
                .iter()
                .map(|c| SceneCandidate {
                    roi_id: c.candidate_id.clone(),
                    bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
                    grasps: vec![GraspCandidate::new(GraspRect::new(0.0, 0.0, 1.0, 1.0, 0.0), 1.0)],
                    embedding_id: c.embedding_id.clone(),
                    hypothesis_label: c.label.clone(),
                })
                .collect(),
            ground_truth: None,
        }
    }
}

/// An item episodes are sampled from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolItem {
    pub candidate_id: String,
    pub embedding_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub affords: Vec<String>,
}

impl PoolItem {
    fn candidate(&self) -> EpisodeCandidate {
        EpisodeCandidate {
            candidate_id: self.candidate_id.clone(),
            embedding_id: self.embedding_id.clone(),
            label: self.label.clone(),
        }
    }

    fn affords(&self, verb: &str) -> bool {
        self.affords.iter().any(|v| v == verb)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub per_verb: usize,
    pub candidates: usize,
    pub mode: EpisodeMode,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            per_verb: DEFAULT_EPISODES_PER_VERB,
            candidates: DEFAULT_EPISODE_CANDIDATES,
            mode: EpisodeMode::Single,
            seed: 0,
        }
    }
}

/// Draws randomized candidate sets from `pool` for every verb any item
/// affords. Single mode: one affording item plus non-affording fillers.
/// Multi mode: one affording item plus fillers drawn from the rest of the
/// pool, which may afford the verb too.
pub fn sample_episodes(
    pool: &[PoolItem],
    cfg: &SamplingConfig,
) -> Result<Vec<EvaluationEpisode>, EvalError> {
    if cfg.candidates < 2 {
        return Err(EvalError::Config("episodes need at least 2 candidates".into()));
    }
    let verbs: BTreeSet<&str> = pool.iter().flat_map(|p| p.affords.iter().map(String::as_str)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(verbs.len() * cfg.per_verb);
    for verb in verbs {
        let (pos, neg): (Vec<&PoolItem>, Vec<&PoolItem>) = pool.iter().partition(|p| p.affords(verb));
        for n in 0..cfg.per_verb {
            let target = *pos.choose(&mut rng).expect("verb is afforded by some item");
            let rest: Vec<&PoolItem> = match cfg.mode {
                EpisodeMode::Single => neg.clone(),
                EpisodeMode::Multi => pool.iter().filter(|p| p.candidate_id != target.candidate_id).collect(),
            };
            if rest.len() < cfg.candidates - 1 {
                return Err(EvalError::Config(format!(
                    "verb `{verb}`: pool has {} fillers, need {}",
                    rest.len(),
                    cfg.candidates - 1
                )));
            }
            let mut picked: Vec<&PoolItem> = rest.choose_multiple(&mut rng, cfg.candidates - 1).copied().collect();
            picked.push(target);
            picked.shuffle(&mut rng);
            out.push(EvaluationEpisode {
                episode_id: format!("{verb}-{n:04}"),
                verb: verb.to_string(),
                relevance: picked
                    .iter()
                    .map(|p| (p.candidate_id.clone(), u8::from(p.affords(verb))))
                    .collect(),
                candidates: picked.iter().map(|p| p.candidate()).collect(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub episode_id: String,
    pub verb: String,
    pub ranking: Vec<String>,
    pub top1_correct: bool,
    pub reciprocal_rank: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub verb: String,
    pub episodes: usize,
    pub accuracy: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

impl MetricRow {
    fn from_scores<'a>(verb: &str, scores: impl Iterator<Item = &'a EpisodeScore>) -> MetricRow {
        let (mut n, mut acc, mut rr, mut nd) = (0usize, 0.0, 0.0, 0.0);
        for s in scores {
            n += 1;
            acc += f64::from(u8::from(s.top1_correct));
            rr += s.reciprocal_rank;
            nd += s.ndcg;
        }
        let d = n.max(1) as f64;
        MetricRow { verb: verb.to_string(), episodes: n, accuracy: acc / d, mrr: rr / d, ndcg: nd / d }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub mode: EpisodeMode,
    pub seed: u64,
    pub weights: EnergyWeights,
    pub config: GroundingConfig,
    pub overall: MetricRow,
    pub per_verb: Vec<MetricRow>,
    pub episodes: Vec<EpisodeScore>,
}

/// Grounds every episode and scores the rankings. Candidate order is
/// shuffled with `seed` first; rankings do not depend on input order, so
/// this only guards against fixtures that list the answer first.
pub fn run_episodes(
    episodes: &[EvaluationEpisode],
    kb: &KnowledgeBase,
    embeddings: &EmbeddingTable,
    weights: &EnergyWeights,
    config: &GroundingConfig,
    mode: EpisodeMode,
    seed: u64,
) -> Result<EpisodeReport, EvalError> {
    if episodes.is_empty() {
        return Err(EvalError::Protocol("no episodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(episodes.len());
    for ep in episodes {
        ep.check(mode)?;
        let mut scene = ep.to_scene();
        scene.candidates.shuffle(&mut rng);
        let result = ground(&scene, &ep.verb, kb, embeddings, weights, config)
            .map_err(|source| EvalError::Ground { scene: ep.episode_id.clone(), source })?;
        let ranked = RankedEpisode {
            ranking: result.ranking().into_iter().map(String::from).collect(),
            relevance: ep.relevance.clone(),
        };
        scores.push(EpisodeScore {
            episode_id: ep.episode_id.clone(),
            verb: result.verb.clone(),
            top1_correct: ranked.first_relevant_rank()? == 1,
            reciprocal_rank: ranked.reciprocal_rank()?,
            ndcg: ranked.ndcg()?,
            ranking: ranked.ranking,
        });
    }
    let verbs: BTreeSet<&str> = scores.iter().map(|s| s.verb.as_str()).collect();
    let per_verb = verbs
        .into_iter()
        .map(|v| MetricRow::from_scores(v, scores.iter().filter(|s| s.verb == v)))
        .collect();
    Ok(EpisodeReport {
        mode,
        seed,
        weights: *weights,
        config: *config,
        overall: MetricRow::from_scores("all", scores.iter()),
        per_verb,
        episodes: scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub scene_id: String,
    pub verb: String,
    pub selected_roi_id: String,
    #[serde(flatten)]
    pub outcome: StaticOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierRow {
    pub tier: StaticTier,
    pub scenes: usize,
    pub roi_correct: usize,
    pub grasp_correct: usize,
    pub successes: usize,
    pub accuracy: f64,
    pub outcomes: Vec<SceneOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticReport {
    pub weights: EnergyWeights,
    pub config: GroundingConfig,
    pub tiers: Vec<TierRow>,
}

impl StaticReport {
    pub fn tier(&self, tier: StaticTier) -> Option<&TierRow> {
        self.tiers.iter().find(|t| t.tier == tier)
    }
}

/// Grounds each scene for its ground-truth verb and checks the selected
/// region and its best grasp against the ground truth.
pub fn evaluate_tier(
    tier: StaticTier,
    scenes: &[Scene],
    kb: &KnowledgeBase,
    embeddings: &EmbeddingTable,
    weights: &EnergyWeights,
    config: &GroundingConfig,
) -> Result<TierRow, EvalError> {
    let mut outcomes = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let gt = scene.ground_truth.as_ref().ok_or_else(|| {
            EvalError::Config(format!("{tier}: scene `{}` has no ground_truth", scene.scene_id))
        })?;
        if gt.gt_grasp_rects.is_empty() {
            return Err(EvalError::Config(format!(
                "{tier}: scene `{}` has no ground-truth grasp rectangles",
                scene.scene_id
            )));
        }
        let result = ground(scene, &gt.verb, kb, embeddings, weights, config)
            .map_err(|source| EvalError::Ground { scene: scene.scene_id.clone(), source })?;
        let selected = &result.ranked[0];
        let cand = scene.candidate(&selected.roi_id).expect("selected roi comes from the scene");
        let outcome = static_episode_eval(
            &cand.bbox,
            selected.best_grasp.as_ref().map(|g| &g.rect),
            &gt.target_bbox,
            &gt.gt_grasp_rects,
            tier,
        );
        outcomes.push(SceneOutcome {
            scene_id: scene.scene_id.clone(),
            verb: result.verb.clone(),
            selected_roi_id: selected.roi_id.clone(),
            outcome,
        });
    }
    let count = |f: fn(&StaticOutcome) -> bool| outcomes.iter().filter(|o| f(&o.outcome)).count();
    let successes = count(|o| o.success);
    Ok(TierRow {
        tier,
        scenes: outcomes.len(),
        roi_correct: count(|o| o.roi_correct),
        grasp_correct: count(|o| o.grasp_correct),
        successes,
        accuracy: if outcomes.is_empty() { 0.0 } else { successes as f64 / outcomes.len() as f64 },
        outcomes,
    })
}

pub fn run_static_scenes(
    tiers: &[(StaticTier, Vec<Scene>)],
    kb: &KnowledgeBase,
    embeddings: &EmbeddingTable,
    weights: &EnergyWeights,
    config: &GroundingConfig,
) -> Result<StaticReport, EvalError> {
    let tiers = tiers
        .iter()
        .map(|(tier, scenes)| evaluate_tier(*tier, scenes, kb, embeddings, weights, config))
        .collect::<Result<_, _>>()?;
    Ok(StaticReport { weights: *weights, config: *config, tiers })
}

/// Loads `<dir>/<tier>/*.json` for each requested tier and evaluates it.
/// A missing tier directory is a configuration error.
pub fn run_static(
    dir: &Path,
    tiers: &[StaticTier],
    kb: &KnowledgeBase,
    embeddings: &EmbeddingTable,
    weights: &EnergyWeights,
    config: &GroundingConfig,
) -> Result<StaticReport, EvalError> {
    let mut loaded = Vec::with_capacity(tiers.len());
    for &tier in tiers {
        let sub = dir.join(tier.id());
        if !sub.is_dir() {
            return Err(EvalError::Config(format!("missing tier inputs: {}", sub.display())));
        }
        loaded.push((tier, dataio::load_scene_dir(&sub)?));
    }
    run_static_scenes(&loaded, kb, embeddings, weights, config)
}

/// Generic tabular report: a protocol name, ordered columns and rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub protocol: String,
    pub columns: Vec<String>,
    pub rows: Vec<BTreeMap<String, Value>>,
    pub config_echo: Value,
}

impl Report {
    fn new(protocol: &str, columns: &[&str], rows: Vec<Value>, config_echo: Value) -> Report {
        Report {
            protocol: protocol.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: rows
                .into_iter()
                .map(|r| match r {
                    Value::Object(m) => m.into_iter().collect(),
                    _ => unreachable!("rows are built as objects"),
                })
                .collect(),
            config_echo,
        }
    }
}

impl StaticReport {
    /// One row per tier, as in a three-setting accuracy table.
    pub fn to_report(&self) -> Report {
        let rows = self
            .tiers
            .iter()
            .map(|t| {
                json!({
                    "setting": t.tier.label(),
                    "tier": t.tier.id(),
                    "roi_source": t.tier.roi_source(),
                    "grasp_source": t.tier.grasp_source(),
                    "scenes": t.scenes,
                    "roi_correct": t.roi_correct,
                    "grasp_correct": t.grasp_correct,
                    "successes": t.successes,
                    "accuracy": t.accuracy,
                })
            })
            .collect();
        Report::new(
            "static",
            &["setting", "tier", "roi_source", "grasp_source", "scenes", "roi_correct", "grasp_correct", "successes", "accuracy"],
            rows,
            json!({ "weights": self.weights, "grounding": self.config, "iou_min": IOU_MIN, "grasp": GraspCriteria::default() }),
        )
    }
}

impl EpisodeReport {
    /// One row per verb followed by the `all` row.
    pub fn to_report(&self) -> Report {
        let rows = self
            .per_verb
            .iter()
            .chain(std::iter::once(&self.overall))
            .map(|r| {
                json!({
                    "verb": r.verb,
                    "episodes": r.episodes,
                    "accuracy": r.accuracy,
                    "mrr": r.mrr,
                    "ndcg": r.ndcg,
                })
            })
            .collect();
        Report::new(
            "episodes",
            &["verb", "episodes", "accuracy", "mrr", "ndcg"],
            rows,
            json!({ "weights": self.weights, "grounding": self.config, "mode": self.mode, "seed": self.seed }),
        )
    }
}
