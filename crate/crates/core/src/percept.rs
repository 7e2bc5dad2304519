//! Embedding store and alignment scoring.
//!
//! Vectors come from upstream encoders; this module only compares them.
//! Verb query embeddings are stored under `verb:<verb>` and knowledge-base
//! object name embeddings under `object:<object>`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VERB_PREFIX: &str = "verb:";
pub const OBJECT_PREFIX: &str = "object:";
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

pub fn verb_embedding_id(verb: &str) -> String {
    format!("{VERB_PREFIX}{verb}")
}

pub fn object_embedding_id(object: &str) -> String {
    format!("{OBJECT_PREFIX}{object}")
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerceptError {
    #[error("embedding dimensions differ: {left} vs {right}")]
    Shape { left: usize, right: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("duplicate embedding id `{0}`")]
    DuplicateId(String),
    #[error("embedding `{id}` has dimension {got}, table dimension is {expected}")]
    Dimension { id: String, expected: usize, got: usize },
    #[error("no embedding for ids: {}", .0.join(", "))]
    Missing(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub id: String,
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(id: impl Into<String>, values: Vec<f32>) -> Self {
        EmbeddingVector { id: id.into(), values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Cosine similarity in `f64`, clamped to `[-1, 1]`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64, PerceptError> {
    if u.len() != v.len() {
        return Err(PerceptError::Shape { left: u.len(), right: v.len() });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if !(nu > 0.0 && nv > 0.0) || !dot.is_finite() {
        return Err(PerceptError::Degenerate("zero-norm or non-finite vector".into()));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// `tanh(-cos(roi, verb))`: lower when the region matches the query.
pub fn alignment_energy(roi: &[f32], verb: &[f32]) -> Result<f64, PerceptError> {
    Ok(alignment_from_cosine(cosine(roi, verb)?))
}

#[inline]
pub(crate) fn alignment_from_cosine(c: f64) -> f64 {
    if c == 0.0 {
        0.0
    } else {
        (-c).tanh()
    }
}

/// Distribution over knowledge-base objects for one unlabeled region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisPosterior {
    pub entries: Vec<PosteriorEntry>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEntry {
    pub object: String,
    pub probability: f64,
}

impl HypothesisPosterior {
    /// Most probable object; entries are sorted so this is the first one.
    pub fn top(&self) -> &PosteriorEntry {
        &self.entries[0]
    }
}

/// Softmax over `cos(roi, name) / temperature`, sorted by descending
/// probability and then by object id.
pub fn object_posterior<'a, I>(
    roi: &[f32],
    vocab: I,
    temperature: f64,
) -> Result<HypothesisPosterior, PerceptError>
where
    I: IntoIterator<Item = (&'a str, &'a [f32])>,
{
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(PerceptError::Degenerate(format!("temperature {temperature} must be positive")));
    }
    let sims = vocab
        .into_iter()
        .map(|(id, v)| Ok((id, cosine(roi, v)?)))
        .collect::<Result<Vec<_>, PerceptError>>()?;
    posterior_from_similarities(&sims, temperature)
}

pub(crate) fn posterior_from_similarities(
    sims: &[(&str, f64)],
    temperature: f64,
) -> Result<HypothesisPosterior, PerceptError> {
    if sims.is_empty() {
        return Err(PerceptError::Degenerate("empty object vocabulary".into()));
    }
    let max = sims.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    let mut entries: Vec<PosteriorEntry> = sims
        .iter()
        .map(|(id, s)| PosteriorEntry {
            object: (*id).to_string(),
            probability: ((s - max) / temperature).exp(),
        })
        .collect();
    // Sort before normalizing so the sum is taken in a fixed order.
    entries.sort_by(|a, b| {
        b.probability
            .partial_cmp(&a.probability)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.object.cmp(&b.object))
    });
    let z: f64 = entries.iter().map(|e| e.probability).sum();
    for e in &mut entries {
        e.probability /= z;
    }
    Ok(HypothesisPosterior { entries, temperature })
}

/// Read-only table of equal-dimension, non-zero embeddings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: Vec<EmbeddingVector>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable { dim, vectors: Vec::new(), index: HashMap::new() }
    }

    pub fn from_vectors(
        dim: usize,
        vectors: impl IntoIterator<Item = EmbeddingVector>,
    ) -> Result<Self, PerceptError> {
        let mut table = EmbeddingTable::new(dim);
        for v in vectors {
            table.insert(v)?;
        }
        Ok(table)
    }

    pub fn insert(&mut self, v: EmbeddingVector) -> Result<(), PerceptError> {
        if self.dim == 0 {
            return Err(PerceptError::Degenerate("table dimension must be at least 1".into()));
        }
        if v.dim() != self.dim {
            return Err(PerceptError::Dimension { id: v.id, expected: self.dim, got: v.values.len() });
        }
        if v.values.iter().any(|x| !x.is_finite()) {
            return Err(PerceptError::Degenerate(format!("embedding `{}` has non-finite values", v.id)));
        }
        if v.values.iter().all(|&x| x == 0.0) {
            return Err(PerceptError::Degenerate(format!("embedding `{}` is all zero", v.id)));
        }
        if self.index.contains_key(&v.id) {
            return Err(PerceptError::DuplicateId(v.id));
        }
        self.index.insert(v.id.clone(), self.vectors.len());
        self.vectors.push(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.vectors[i].values.as_slice())
    }

    pub fn require(&self, id: &str) -> Result<&[f32], PerceptError> {
        self.get(id).ok_or_else(|| PerceptError::Missing(vec![id.to_string()]))
    }

    /// Every id in `ids` that is absent, in first-seen order without repeats.
    pub fn missing<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for id in ids {
            if self.get(id).is_none() && !out.iter().any(|m| m == id) {
                out.push(id.to_string());
            }
        }
        out
    }

    /// Vectors in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &EmbeddingVector> {
        self.vectors.iter()
    }
}
