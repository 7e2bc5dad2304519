//! Versioned bipartite affordance knowledge base.
//!
//! Verbs connect to properties (`w_vp`), properties connect to objects
//! (`w_po`). An object affords a verb through every property that has both
//! edges. The value is immutable: edits return a new knowledge base with a
//! higher version and leave the original untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KbError {
    #[error("unknown verb `{0}`")]
    UnknownVerb(String),
    #[error("unknown property `{0}`")]
    UnknownProperty(String),
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("weight {weight} for {edge} is outside [0, 1]")]
    WeightOutOfRange { edge: EdgeRef, weight: f64 },
    #[error("invalid identifier `{0}`: expected ASCII letters, digits, spaces, `-` or `_`")]
    InvalidIdentifier(String),
    #[error("edit batch is empty")]
    EmptyEdit,
}

impl KbError {
    pub fn is_not_found(&self) -> bool {
        matches!(
            self,
            KbError::UnknownVerb(_) | KbError::UnknownProperty(_) | KbError::UnknownObject(_)
        )
    }
}

/// Case-folds an identifier to its stored form (`Juice Box` → `juice_box`).
pub fn normalize_ident(raw: &str) -> Result<String, KbError> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(KbError::InvalidIdentifier(raw.to_string()));
    }
    trimmed
        .chars()
        .map(|c| match c {
            'a'..='z' | '0'..='9' | '_' => Ok(c),
            'A'..='Z' => Ok(c.to_ascii_lowercase()),
            ' ' | '-' => Ok('_'),
            _ => Err(KbError::InvalidIdentifier(raw.to_string())),
        })
        .collect()
}

fn is_normalized(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    /// verb → property
    Vp,
    /// property → object
    Po,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Vp => "vp",
            EdgeKind::Po => "po",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeRef {
    pub kind: EdgeKind,
    pub from: String,
    pub to: String,
}

impl fmt::Display for EdgeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} edge ({}, {})", self.kind, self.from, self.to)
    }
}

/// How one verb→property→object path contributes to the aggregated sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathCombiner {
    /// `w_vp + w_po`
    #[default]
    Sum,
    /// `w_vp * w_po`
    Product,
}

impl PathCombiner {
    #[inline]
    pub fn combine(self, w_vp: f64, w_po: f64) -> f64 {
        match self {
            PathCombiner::Sum => w_vp + w_po,
            PathCombiner::Product => w_vp * w_po,
        }
    }
}

impl std::str::FromStr for PathCombiner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(PathCombiner::Sum),
            "product" => Ok(PathCombiner::Product),
            other => Err(format!("unknown path combiner `{other}` (expected sum|product)")),
        }
    }
}

/// One explanatory route from a verb to an object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingPath {
    pub verb: String,
    pub property: String,
    pub object: String,
    pub w_vp: f64,
    pub w_po: f64,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeEdit {
    pub kind: EdgeKind,
    pub from: String,
    pub to: String,
    pub weight: f64,
}

impl EdgeEdit {
    pub fn vp(verb: &str, property: &str, weight: f64) -> Self {
        EdgeEdit { kind: EdgeKind::Vp, from: verb.into(), to: property.into(), weight }
    }

    pub fn po(property: &str, object: &str, weight: f64) -> Self {
        EdgeEdit { kind: EdgeKind::Po, from: property.into(), to: object.into(), weight }
    }
}

type EdgeMap = BTreeMap<(String, String), f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    version: u64,
    verbs: BTreeSet<String>,
    properties: BTreeSet<String>,
    objects: BTreeSet<String>,
    vp_edges: EdgeMap,
    po_edges: EdgeMap,
}

/// Raw contents of a knowledge base, used by loaders and merges.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KbParts {
    pub version: u64,
    pub verbs: BTreeSet<String>,
    pub properties: BTreeSet<String>,
    pub objects: BTreeSet<String>,
    pub vp_edges: BTreeMap<(String, String), f64>,
    pub po_edges: BTreeMap<(String, String), f64>,
}

impl Default for KnowledgeBase {
    fn default() -> Self {
        KnowledgeBase::empty(1)
    }
}

impl KnowledgeBase {
    pub fn empty(version: u64) -> Self {
        KnowledgeBase {
            version,
            verbs: BTreeSet::new(),
            properties: BTreeSet::new(),
            objects: BTreeSet::new(),
            vp_edges: BTreeMap::new(),
            po_edges: BTreeMap::new(),
        }
    }

    pub fn builder() -> KbBuilder {
        KbBuilder::default()
    }

    /// Builds a knowledge base, rejecting the first invariant violation.
    pub fn from_parts(parts: KbParts) -> Result<Self, KbError> {
        let kb = KnowledgeBase::from_parts_unchecked(parts);
        match validate(&kb).violations.into_iter().next() {
            None => Ok(kb),
            Some(v) => Err(v.into_error()),
        }
    }

    /// Builds a knowledge base without checking invariants. Use [`validate`]
    /// to inspect the result.
    pub fn from_parts_unchecked(parts: KbParts) -> Self {
        KnowledgeBase {
            version: parts.version,
            verbs: parts.verbs,
            properties: parts.properties,
            objects: parts.objects,
            vp_edges: parts.vp_edges,
            po_edges: parts.po_edges,
        }
    }

    pub fn to_parts(&self) -> KbParts {
        KbParts {
            version: self.version,
            verbs: self.verbs.clone(),
            properties: self.properties.clone(),
            objects: self.objects.clone(),
            vp_edges: self.vp_edges.clone(),
            po_edges: self.po_edges.clone(),
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn verbs(&self) -> &BTreeSet<String> {
        &self.verbs
    }

    pub fn properties(&self) -> &BTreeSet<String> {
        &self.properties
    }

    pub fn objects(&self) -> &BTreeSet<String> {
        &self.objects
    }

    pub fn has_verb(&self, verb: &str) -> bool {
        self.verbs.contains(verb)
    }

    pub fn has_object(&self, object: &str) -> bool {
        self.objects.contains(object)
    }

    /// `(verb, property, w_vp)` in key order.
    pub fn vp_edges(&self) -> impl Iterator<Item = (&str, &str, f64)> + '_ {
        self.vp_edges.iter().map(|((v, p), w)| (v.as_str(), p.as_str(), *w))
    }

    /// `(property, object, w_po)` in key order.
    pub fn po_edges(&self) -> impl Iterator<Item = (&str, &str, f64)> + '_ {
        self.po_edges.iter().map(|((p, o), w)| (p.as_str(), o.as_str(), *w))
    }

    pub fn edge_count(&self) -> (usize, usize) {
        (self.vp_edges.len(), self.po_edges.len())
    }

    pub fn weight(&self, kind: EdgeKind, from: &str, to: &str) -> Option<f64> {
        let key = (from.to_string(), to.to_string());
        match kind {
            EdgeKind::Vp => self.vp_edges.get(&key).copied(),
            EdgeKind::Po => self.po_edges.get(&key).copied(),
        }
    }

    fn resolve_verb(&self, verb: &str) -> Result<String, KbError> {
        let v = normalize_ident(verb).map_err(|_| KbError::UnknownVerb(verb.to_string()))?;
        if self.verbs.contains(&v) {
            Ok(v)
        } else {
            Err(KbError::UnknownVerb(v))
        }
    }

    fn resolve_object(&self, object: &str) -> Result<String, KbError> {
        let o = normalize_ident(object).map_err(|_| KbError::UnknownObject(object.to_string()))?;
        if self.objects.contains(&o) {
            Ok(o)
        } else {
            Err(KbError::UnknownObject(o))
        }
    }

    /// Properties linking `verb` to `object`, by descending contribution and
    /// then by property name.
    pub fn connecting_properties(
        &self,
        verb: &str,
        object: &str,
    ) -> Result<Vec<GroundingPath>, KbError> {
        self.connecting_properties_with(verb, object, PathCombiner::Sum)
    }

    pub fn connecting_properties_with(
        &self,
        verb: &str,
        object: &str,
        combiner: PathCombiner,
    ) -> Result<Vec<GroundingPath>, KbError> {
        let v = self.resolve_verb(verb)?;
        let o = self.resolve_object(object)?;
        Ok(self.paths_resolved(&v, &o, combiner))
    }

    /// Path query on identifiers already known to be normalized and present.
    pub(crate) fn paths_resolved(
        &self,
        verb: &str,
        object: &str,
        combiner: PathCombiner,
    ) -> Vec<GroundingPath> {
        let start = (verb.to_string(), String::new());
        let mut paths: Vec<GroundingPath> = self
            .vp_edges
            .range(start..)
            .take_while(|((v, _), _)| v == verb)
            .filter_map(|((_, p), &w_vp)| {
                let w_po = *self.po_edges.get(&(p.clone(), object.to_string()))?;
                Some(GroundingPath {
                    verb: verb.to_string(),
                    property: p.clone(),
                    object: object.to_string(),
                    w_vp,
                    w_po,
                    contribution: combiner.combine(w_vp, w_po),
                })
            })
            .collect();
        paths.sort_by(|a, b| {
            b.contribution
                .partial_cmp(&a.contribution)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.property.cmp(&b.property))
        });
        paths
    }

    /// `tanh(-Σ contribution)` over the connecting paths; exactly 0 when
    /// no property connects the pair.
    pub fn affordance_energy(&self, verb: &str, object: &str) -> Result<f64, KbError> {
        self.affordance_energy_with(verb, object, PathCombiner::Sum)
    }

    pub fn affordance_energy_with(
        &self,
        verb: &str,
        object: &str,
        combiner: PathCombiner,
    ) -> Result<f64, KbError> {
        let v = self.resolve_verb(verb)?;
        let o = self.resolve_object(object)?;
        Ok(energy_of_paths(&self.paths_resolved(&v, &o, combiner)))
    }

    /// Upserts one edge into a copy with the version incremented.
    pub fn edit_edge(
        &self,
        kind: EdgeKind,
        from: &str,
        to: &str,
        weight: f64,
    ) -> Result<KnowledgeBase, KbError> {
        self.apply_edits(&[EdgeEdit { kind, from: from.into(), to: to.into(), weight }])
    }

    /// Applies a batch atomically: either every edit is valid and the copy's
    /// version is `self.version() + 1`, or nothing is applied.
    pub fn apply_edits(&self, edits: &[EdgeEdit]) -> Result<KnowledgeBase, KbError> {
        if edits.is_empty() {
            return Err(KbError::EmptyEdit);
        }
        let mut next = self.clone();
        for edit in edits {
            let (from, to) = match edit.kind {
                EdgeKind::Vp => (
                    self.resolve_verb(&edit.from)?,
                    self.resolve_named(&edit.to, &self.properties, KbError::UnknownProperty)?,
                ),
                EdgeKind::Po => (
                    self.resolve_named(&edit.from, &self.properties, KbError::UnknownProperty)?,
                    self.resolve_object(&edit.to)?,
                ),
            };
            if !(0.0..=1.0).contains(&edit.weight) {
                return Err(KbError::WeightOutOfRange {
                    edge: EdgeRef { kind: edit.kind, from, to },
                    weight: edit.weight,
                });
            }
            let map = match edit.kind {
                EdgeKind::Vp => &mut next.vp_edges,
                EdgeKind::Po => &mut next.po_edges,
            };
            map.insert((from, to), edit.weight);
        }
        next.version = self.version + 1;
        Ok(next)
    }

    fn resolve_named(
        &self,
        raw: &str,
        set: &BTreeSet<String>,
        missing: fn(String) -> KbError,
    ) -> Result<String, KbError> {
        let id = normalize_ident(raw).map_err(|_| missing(raw.to_string()))?;
        if set.contains(&id) {
            Ok(id)
        } else {
            Err(missing(id))
        }
    }
}

pub(crate) fn energy_of_paths(paths: &[GroundingPath]) -> f64 {
    let total: f64 = paths.iter().map(|p| p.contribution).sum();
    if total == 0.0 {
        0.0
    } else {
        (-total).tanh()
    }
}

/// Accumulates nodes and edges; endpoints are declared implicitly.
#[derive(Debug, Default)]
pub struct KbBuilder {
    parts: KbParts,
    error: Option<KbError>,
}

impl KbBuilder {
    pub fn version(mut self, version: u64) -> Self {
        self.parts.version = version;
        self
    }

    fn ident(&mut self, raw: &str) -> String {
        match normalize_ident(raw) {
            Ok(id) => id,
            Err(e) => {
                self.error.get_or_insert(e);
                String::new()
            }
        }
    }

    pub fn verb(mut self, verb: &str) -> Self {
        let v = self.ident(verb);
        self.parts.verbs.insert(v);
        self
    }

    pub fn property(mut self, property: &str) -> Self {
        let p = self.ident(property);
        self.parts.properties.insert(p);
        self
    }

    pub fn object(mut self, object: &str) -> Self {
        let o = self.ident(object);
        self.parts.objects.insert(o);
        self
    }

    pub fn vp(mut self, verb: &str, property: &str, weight: f64) -> Self {
        let v = self.ident(verb);
        let p = self.ident(property);
        self.parts.verbs.insert(v.clone());
        self.parts.properties.insert(p.clone());
        self.parts.vp_edges.insert((v, p), weight);
        self
    }

    pub fn po(mut self, property: &str, object: &str, weight: f64) -> Self {
        let p = self.ident(property);
        let o = self.ident(object);
        self.parts.properties.insert(p.clone());
        self.parts.objects.insert(o.clone());
        self.parts.po_edges.insert((p, o), weight);
        self
    }

    pub fn build(self) -> Result<KnowledgeBase, KbError> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let mut parts = self.parts;
        if parts.version == 0 {
            parts.version = 1;
        }
        KnowledgeBase::from_parts(parts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    MissingEndpoint { role: String, name: String },
    WeightOutOfRange { weight: f64 },
    InvalidIdentifier,
    DuplicateKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Subject {
    Edge(EdgeRef),
    Node { role: String, name: String },
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Edge(e) => e.fmt(f),
            Subject::Node { role, name } => write!(f, "{role} `{name}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub subject: Subject,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl Violation {
    pub fn into_error(self) -> KbError {
        match (self.kind, self.subject) {
            (ViolationKind::WeightOutOfRange { weight }, Subject::Edge(edge)) => {
                KbError::WeightOutOfRange { edge, weight }
            }
            (ViolationKind::MissingEndpoint { role, name }, _) => match role.as_str() {
                "verb" => KbError::UnknownVerb(name),
                "object" => KbError::UnknownObject(name),
                _ => KbError::UnknownProperty(name),
            },
            (_, Subject::Node { name, .. }) => KbError::InvalidIdentifier(name),
            (_, Subject::Edge(e)) => KbError::InvalidIdentifier(format!("{}/{}", e.from, e.to)),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::MissingEndpoint { role, name } => {
                write!(f, "{}: undeclared {role} `{name}`", self.subject)
            }
            ViolationKind::WeightOutOfRange { weight } => {
                write!(f, "{}: weight {weight} outside [0, 1]", self.subject)
            }
            ViolationKind::InvalidIdentifier => {
                write!(f, "{}: identifier is not normalized", self.subject)
            }
            ViolationKind::DuplicateKey => write!(f, "{}: duplicate key", self.subject),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

/// Lists every invariant violation in `kb`; an empty report means the
/// knowledge base is well-formed.
pub fn validate(kb: &KnowledgeBase) -> ValidationReport {
    let mut violations = Vec::new();
    for (role, set) in [("verb", &kb.verbs), ("property", &kb.properties), ("object", &kb.objects)]
    {
        for name in set.iter().filter(|n| !is_normalized(n)) {
            violations.push(Violation {
                subject: Subject::Node { role: role.into(), name: name.clone() },
                kind: ViolationKind::InvalidIdentifier,
            });
        }
    }
    let mut check_edges = |kind: EdgeKind,
                           map: &EdgeMap,
                           from_set: (&str, &BTreeSet<String>),
                           to_set: (&str, &BTreeSet<String>)| {
        for ((from, to), &w) in map {
            let edge = EdgeRef { kind, from: from.clone(), to: to.clone() };
            for (role, set, name) in [(from_set.0, from_set.1, from), (to_set.0, to_set.1, to)] {
                if !set.contains(name) {
                    violations.push(Violation {
                        subject: Subject::Edge(edge.clone()),
                        kind: ViolationKind::MissingEndpoint {
                            role: role.into(),
                            name: name.clone(),
                        },
                    });
                }
            }
            if !(0.0..=1.0).contains(&w) {
                violations.push(Violation {
                    subject: Subject::Edge(edge),
                    kind: ViolationKind::WeightOutOfRange { weight: w },
                });
            }
        }
    };
    check_edges(EdgeKind::Vp, &kb.vp_edges, ("verb", &kb.verbs), ("property", &kb.properties));
    check_edges(EdgeKind::Po, &kb.po_edges, ("property", &kb.properties), ("object", &kb.objects));
    ValidationReport { violations }
}

/// A per-edge weight change between two knowledge bases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeDelta {
    pub edge: EdgeRef,
    pub before: Option<f64>,
    pub after: Option<f64>,
}

impl EdgeDelta {
    pub fn delta(&self) -> f64 {
        self.after.unwrap_or(0.0) - self.before.unwrap_or(0.0)
    }
}

/// Edges whose weight differs between `a` and `b`, including additions and
/// removals, in (kind, from, to) order.
pub fn diff(a: &KnowledgeBase, b: &KnowledgeBase) -> Vec<EdgeDelta> {
    let mut out = Vec::new();
    for (kind, ma, mb) in [
        (EdgeKind::Vp, &a.vp_edges, &b.vp_edges),
        (EdgeKind::Po, &a.po_edges, &b.po_edges),
    ] {
        let keys: BTreeSet<&(String, String)> = ma.keys().chain(mb.keys()).collect();
        for key in keys {
            let before = ma.get(key).copied();
            let after = mb.get(key).copied();
            if before != after {
                out.push(EdgeDelta {
                    edge: EdgeRef { kind, from: key.0.clone(), to: key.1.clone() },
                    before,
                    after,
                });
            }
        }
    }
    out
}
