//! Energy fusion and candidate selection.
//!
//! Each candidate region gets three independent energies: grasp
//! feasibility, symbolic affordance, and embedding alignment. Their
//! weighted sum is the total energy and the candidate with the lowest total
//! is selected. Nothing is normalized across the scene.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grasp::{best_grasp, grasp_energy, GraspCandidate, GraspError};
use crate::kb::{energy_of_paths, normalize_ident, GroundingPath, KbError, KnowledgeBase, PathCombiner};
use crate::percept::{
    alignment_from_cosine, cosine, object_embedding_id, posterior_from_similarities,
    verb_embedding_id, EmbeddingTable, HypothesisPosterior, PerceptError, DEFAULT_TEMPERATURE,
};
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GroundError {
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("missing embeddings: {}", .0.join(", "))]
    MissingEmbeddings(Vec<String>),
    #[error(transparent)]
    Percept(PerceptError),
    #[error(transparent)]
    Grasp(#[from] GraspError),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("candidate `{0}` has no hypothesis label (required in labels mode)")]
    MissingLabel(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("unknown roi `{0}`")]
    UnknownRoi(String),
}

impl From<PerceptError> for GroundError {
    fn from(e: PerceptError) -> Self {
        match e {
            PerceptError::Missing(ids) => GroundError::MissingEmbeddings(ids),
            other => GroundError::Percept(other),
        }
    }
}

impl GroundError {
    /// Unknown verb/object/roi or an unresolvable embedding.
    pub fn is_resolution(&self) -> bool {
        match self {
            GroundError::Kb(e) => e.is_not_found(),
            GroundError::MissingEmbeddings(_)
            | GroundError::MissingLabel(_)
            | GroundError::UnknownRoi(_) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights { alpha: 1.0, beta: 1.0, gamma: 1.0 }
    }
}

impl EnergyWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, GroundError> {
        let w = EnergyWeights { alpha, beta, gamma };
        w.check()?;
        Ok(w)
    }

    pub fn check(&self) -> Result<(), GroundError> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(GroundError::InvalidWeights(format!(
                "weights must be finite and non-negative, got {self}"
            )));
        }
        if all.iter().all(|x| *x == 0.0) {
            return Err(GroundError::InvalidWeights("weights cannot all be zero".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> EnergyWeights {
        EnergyWeights { alpha: self.alpha * c, beta: self.beta * c, gamma: self.gamma * c }
    }
}

impl fmt::Display for EnergyWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.alpha, self.beta, self.gamma)
    }
}

impl std::str::FromStr for EnergyWeights {
    type Err = String;

    /// Parses `alpha,beta,gamma`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad weight `{p}`: {e}")))
            .collect::<Result<_, _>>()?;
        match parts.as_slice() {
            [a, b, g] => EnergyWeights::new(*a, *b, *g).map_err(|e| e.to_string()),
            _ => Err(format!("expected three comma-separated weights, got `{s}`")),
        }
    }
}

/// Weighted sum of the three terms. An infinite grasp energy (no grasps)
/// makes the total infinite whatever `alpha` is.
pub fn total_energy(weights: &EnergyWeights, e_grasp: f64, e_aff: f64, e_align: f64) -> f64 {
    if e_grasp == f64::INFINITY {
        return f64::INFINITY;
    }
    weights.alpha * e_grasp + weights.beta * e_aff + weights.gamma * e_align
}

/// How a region is linked to knowledge-base objects.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisMode {
    /// Use each candidate's `hypothesis_label`.
    Labels,
    /// Expected affordance energy under a softmax posterior over object
    /// name embeddings.
    #[default]
    Posterior,
}

impl std::str::FromStr for HypothesisMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "labels" => Ok(HypothesisMode::Labels),
            "posterior" => Ok(HypothesisMode::Posterior),
            other => Err(format!("unknown hypothesis mode `{other}` (expected labels|posterior)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingConfig {
    pub mode: HypothesisMode,
    pub temperature: f64,
    pub combiner: PathCombiner,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        GroundingConfig {
            mode: HypothesisMode::default(),
            temperature: DEFAULT_TEMPERATURE,
            combiner: PathCombiner::default(),
        }
    }
}

impl GroundingConfig {
    pub fn labels() -> Self {
        GroundingConfig { mode: HypothesisMode::Labels, ..Default::default() }
    }
}

/// Serializes infinite energies as the strings `"+inf"` / `"-inf"`.
pub(crate) mod extended_real {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("+inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!("expected a number or \"inf\", got `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub roi_id: String,
    #[serde(with = "extended_real")]
    pub e_grasp: f64,
    pub e_aff: f64,
    pub e_align: f64,
    #[serde(with = "extended_real")]
    pub e_total: f64,
    /// False when the region has no grasps; it is ranked last and never
    /// selected while a graspable region exists.
    pub graspable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_grasp: Option<GraspCandidate>,
    /// Object whose paths are reported: the label, or the most probable
    /// posterior hypothesis.
    pub hypothesis: String,
    pub paths: Vec<GroundingPath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<HypothesisPosterior>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub verb: String,
    pub selected_roi_id: String,
    /// Ascending by total energy, ties by `roi_id`.
    pub ranked: Vec<EnergyBreakdown>,
    pub weights: EnergyWeights,
    pub config: GroundingConfig,
    pub kb_version: u64,
}

impl GroundingResult {
    pub fn breakdown(&self, roi_id: &str) -> Option<&EnergyBreakdown> {
        self.ranked.iter().find(|b| b.roi_id == roi_id)
    }

    pub fn ranking(&self) -> Vec<&str> {
        self.ranked.iter().map(|b| b.roi_id.as_str()).collect()
    }
}

struct ObjectAffordance {
    energy: f64,
    paths: Vec<GroundingPath>,
}

fn affordance<'c>(
    cache: &'c mut BTreeMap<String, ObjectAffordance>,
    kb: &KnowledgeBase,
    verb: &str,
    object: &str,
    combiner: PathCombiner,
) -> &'c ObjectAffordance {
    cache.entry(object.to_string()).or_insert_with(|| {
        let paths = kb.paths_resolved(verb, object, combiner);
        ObjectAffordance { energy: energy_of_paths(&paths), paths }
    })
}

/// Energy order used for ranking: ascending total, then `roi_id`.
pub fn rank_order(a: &EnergyBreakdown, b: &EnergyBreakdown) -> Ordering {
    a.e_total
        .partial_cmp(&b.e_total)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.roi_id.cmp(&b.roi_id))
}

/// Scores every candidate of `scene` for `verb` and selects the one with
/// the lowest total energy.
pub fn ground(
    scene: &Scene,
    verb: &str,
    kb: &KnowledgeBase,
    embeddings: &EmbeddingTable,
    weights: &EnergyWeights,
    config: &GroundingConfig,
) -> Result<GroundingResult, GroundError> {
    weights.check()?;
    if let Some(issue) = scene.validate().into_iter().next() {
        return Err(GroundError::InvalidScene(issue.to_string()));
    }
    let verb = normalize_ident(verb).map_err(|_| KbError::UnknownVerb(verb.to_string()))?;
    if !kb.has_verb(&verb) {
        return Err(KbError::UnknownVerb(verb).into());
    }

    let verb_id = verb_embedding_id(&verb);
    let object_ids: Vec<String> = match config.mode {
        HypothesisMode::Posterior => kb.objects().iter().map(|o| object_embedding_id(o)).collect(),
        HypothesisMode::Labels => Vec::new(),
    };
    let missing = embeddings.missing(
        std::iter::once(verb_id.as_str())
            .chain(scene.candidates.iter().map(|c| c.embedding_id.as_str()))
            .chain(object_ids.iter().map(String::as_str)),
    );
    if !missing.is_empty() {
        return Err(GroundError::MissingEmbeddings(missing));
    }
    let verb_emb = embeddings.require(&verb_id)?;

    let mut cache: BTreeMap<String, ObjectAffordance> = BTreeMap::new();

    let mut ranked = Vec::with_capacity(scene.candidates.len());
    for cand in &scene.candidates {
        let roi_emb = embeddings.require(&cand.embedding_id)?;
        let e_grasp = grasp_energy(&cand.grasps)?;
        let best = best_grasp(&cand.grasps).ok().map(|(_, g)| g.clone());
        let e_align = alignment_from_cosine(cosine(roi_emb, verb_emb)?);

        let (e_aff, hypothesis, paths, posterior) = match config.mode {
            HypothesisMode::Labels => {
                let raw = cand
                    .hypothesis_label
                    .as_deref()
                    .ok_or_else(|| GroundError::MissingLabel(cand.roi_id.clone()))?;
                let label = normalize_ident(raw).map_err(|_| KbError::UnknownObject(raw.into()))?;
                if !kb.has_object(&label) {
                    return Err(KbError::UnknownObject(label).into());
                }
                let aff = affordance(&mut cache, kb, &verb, &label, config.combiner);
                (aff.energy, label, aff.paths.clone(), None)
            }
            HypothesisMode::Posterior => {
                let sims = kb
                    .objects()
                    .iter()
                    .zip(&object_ids)
                    .map(|(o, id)| Ok((o.as_str(), cosine(roi_emb, embeddings.require(id)?)?)))
                    .collect::<Result<Vec<_>, PerceptError>>()?;
                let post = posterior_from_similarities(&sims, config.temperature)?;
                let e_aff: f64 = post
                    .entries
                    .iter()
                    .map(|e| e.probability * affordance(&mut cache, kb, &verb, &e.object, config.combiner).energy)
                    .sum();
                let top = post.top().object.clone();
                let paths = affordance(&mut cache, kb, &verb, &top, config.combiner).paths.clone();
                (e_aff + 0.0, top, paths, Some(post))
            }
        };

        ranked.push(EnergyBreakdown {
            roi_id: cand.roi_id.clone(),
            e_grasp,
            e_aff,
            e_align,
            e_total: total_energy(weights, e_grasp, e_aff, e_align),
            graspable: e_grasp.is_finite(),
            best_grasp: best,
            hypothesis,
            paths,
            posterior,
        });
    }
    ranked.sort_by(rank_order);

    Ok(GroundingResult {
        verb,
        selected_roi_id: ranked[0].roi_id.clone(),
        ranked,
        weights: *weights,
        config: *config,
        kb_version: kb.version(),
    })
}

pub const DEFAULT_EXPLAIN_PATHS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermExplanation {
    pub term: String,
    pub weight: f64,
    #[serde(with = "extended_real")]
    pub energy: f64,
    #[serde(with = "extended_real")]
    pub weighted: f64,
}

/// Readable account of why one candidate scored as it did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub roi_id: String,
    pub rank: usize,
    pub selected: bool,
    pub excluded: bool,
    pub terms: Vec<TermExplanation>,
    #[serde(with = "extended_real")]
    pub e_total: f64,
    pub hypothesis: String,
    pub paths: Vec<GroundingPath>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_grasp: Option<GraspCandidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub posterior: Option<HypothesisPosterior>,
    pub notes: Vec<String>,
}

pub fn explain(result: &GroundingResult, roi_id: &str) -> Result<Explanation, GroundError> {
    explain_top(result, roi_id, DEFAULT_EXPLAIN_PATHS)
}

/// Like [`explain`] but keeps the `max_paths` strongest paths.
pub fn explain_top(
    result: &GroundingResult,
    roi_id: &str,
    max_paths: usize,
) -> Result<Explanation, GroundError> {
    let (idx, b) = result
        .ranked
        .iter()
        .enumerate()
        .find(|(_, b)| b.roi_id == roi_id)
        .ok_or_else(|| GroundError::UnknownRoi(roi_id.to_string()))?;
    let w = &result.weights;
    let term = |name: &str, weight: f64, energy: f64| TermExplanation {
        term: name.into(),
        weight,
        energy,
        weighted: if energy == f64::INFINITY { energy } else { weight * energy },
    };
    let mut notes = Vec::new();
    if !b.graspable {
        notes.push("+inf grasp energy (no grasp candidates): excluded from selection".to_string());
    }
    if b.paths.is_empty() {
        notes.push(format!("no property connects `{}` to `{}`", result.verb, b.hypothesis));
    }
    Ok(Explanation {
        roi_id: b.roi_id.clone(),
        rank: idx + 1,
        selected: b.roi_id == result.selected_roi_id,
        excluded: !b.graspable,
        terms: vec![
            term("grasp", w.alpha, b.e_grasp),
            term("affordance", w.beta, b.e_aff),
            term("alignment", w.gamma, b.e_align),
        ],
        e_total: b.e_total,
        hypothesis: b.hypothesis.clone(),
        paths: b.paths.iter().take(max_paths).cloned().collect(),
        best_grasp: b.best_grasp.clone(),
        posterior: b.posterior.clone(),
        notes,
    })
}

impl fmt::Display for Explanation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} (rank {}{}): E = {}",
            self.roi_id,
            self.rank,
            if self.selected { ", selected" } else { "" },
            self.e_total
        )?;
        for t in &self.terms {
            writeln!(f, "  {:<10} {} x {} = {}", t.term, t.weight, t.energy, t.weighted)?;
        }
        writeln!(f, "  hypothesis: {}", self.hypothesis)?;
        for p in &self.paths {
            writeln!(
                f,
                "  {} -[{}]-> {} -[{}]-> {}  ({})",
                p.verb, p.w_vp, p.property, p.w_po, p.object, p.contribution
            )?;
        }
        if let Some(g) = &self.best_grasp {
            writeln!(f, "  best grasp: score {} at ({}, {}) {}°", g.score, g.rect.cx, g.rect.cy, g.rect.theta_deg)?;
        }
        if let Some(post) = &self.posterior {
            let top: Vec<String> = post
                .entries
                .iter()
                .take(3)
                .map(|e| format!("{}={:.3}", e.object, e.probability))
                .collect();
            writeln!(f, "  posterior: {}", top.join(" "))?;
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        Ok(())
    }
}
