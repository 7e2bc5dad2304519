//! Offline knowledge-base construction from scored tables.
//!
//! Stage one scores properties per verb (`verb,property,weight`), stage two
//! scores objects per property (`property,object,weight`). A flat
//! `verb,object,weight` table can be imported as a degenerate knowledge base
//! with one synthetic property per verb.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{normalize_ident, KbError, KbParts, KnowledgeBase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyScoreRow {
    pub verb: String,
    pub property: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectScoreRow {
    pub property: String,
    pub object: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatPair {
    pub verb: String,
    pub object: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table {
    PropertyScores,
    ObjectScores,
    FlatPairs,
}

impl std::fmt::Display for Table {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Table::PropertyScores => "verb,property,weight",
            Table::ObjectScores => "property,object,weight",
            Table::FlatPairs => "verb,object,weight",
        })
    }
}

/// Row numbers are 1-based positions among the data rows (the header line
/// of a file is not counted).
#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{table} table has duplicate keys: {}", keys.iter().map(|(a, b)| format!("({a}, {b})")).collect::<Vec<_>>().join(", "))]
    Duplicates { table: Table, keys: Vec<(String, String)> },
    #[error("{table} row {row}: weight {weight} outside [0, 1]")]
    WeightOutOfRange { table: Table, row: usize, weight: f64 },
    #[error("{table} row {row}: {source}")]
    Identifier {
        table: Table,
        row: usize,
        #[source]
        source: KbError,
    },
    #[error("prune epsilon {0} must be in [0, 1)")]
    Epsilon(f64),
    #[error("{table} table: {source}")]
    Csv {
        table: Table,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    #[default]
    Max,
    Mean,
    PreferB,
}

impl std::str::FromStr for MergePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(MergePolicy::Max),
            "mean" => Ok(MergePolicy::Mean),
            "prefer_b" | "prefer-b" => Ok(MergePolicy::PreferB),
            other => Err(format!("unknown merge policy `{other}` (expected max|mean|prefer_b)")),
        }
    }
}

fn read_table<T: serde::de::DeserializeOwned>(
    reader: impl Read,
    table: Table,
) -> Result<Vec<T>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|source| IngestError::Csv { table, source })
}

pub fn read_property_scores(reader: impl Read) -> Result<Vec<PropertyScoreRow>, IngestError> {
    read_table(reader, Table::PropertyScores)
}

pub fn read_object_scores(reader: impl Read) -> Result<Vec<ObjectScoreRow>, IngestError> {
    read_table(reader, Table::ObjectScores)
}

pub fn read_flat_pairs(reader: impl Read) -> Result<Vec<FlatPair>, IngestError> {
    read_table(reader, Table::FlatPairs)
}

/// Normalizes keys, checks ranges, and rejects duplicate keys.
fn collect_edges<'a>(
    table: Table,
    rows: impl Iterator<Item = (&'a str, &'a str, f64)>,
) -> Result<BTreeMap<(String, String), f64>, IngestError> {
    let mut edges = BTreeMap::new();
    let mut duplicates = BTreeSet::new();
    for (i, (from, to, weight)) in rows.enumerate() {
        let row = i + 1;
        let ident = |raw: &str| {
            normalize_ident(raw).map_err(|source| IngestError::Identifier { table, row, source })
        };
        let key = (ident(from)?, ident(to)?);
        if !(0.0..=1.0).contains(&weight) {
            return Err(IngestError::WeightOutOfRange { table, row, weight });
        }
        if edges.insert(key.clone(), weight).is_some() {
            duplicates.insert(key);
        }
    }
    if duplicates.is_empty() {
        Ok(edges)
    } else {
        Err(IngestError::Duplicates { table, keys: duplicates.into_iter().collect() })
    }
}

/// Builds a version-1 knowledge base from the two scored tables.
///
/// With `prune_epsilon == 0` every edge is kept; otherwise edges with
/// weight `<= prune_epsilon` are dropped. Node sets are the endpoints of the
/// kept edges plus every verb named in stage one.
pub fn ingest(
    stage1: &[PropertyScoreRow],
    stage2: &[ObjectScoreRow],
    prune_epsilon: f64,
) -> Result<KnowledgeBase, IngestError> {
    if !(0.0..1.0).contains(&prune_epsilon) {
        return Err(IngestError::Epsilon(prune_epsilon));
    }
    let vp = collect_edges(
        Table::PropertyScores,
        stage1.iter().map(|r| (r.verb.as_str(), r.property.as_str(), r.weight)),
    )?;
    let po = collect_edges(
        Table::ObjectScores,
        stage2.iter().map(|r| (r.property.as_str(), r.object.as_str(), r.weight)),
    )?;
    let keep = |w: &f64| prune_epsilon == 0.0 || *w > prune_epsilon;

    let mut parts = KbParts { version: 1, ..KbParts::default() };
    parts.verbs.extend(vp.keys().map(|(v, _)| v.clone()));
    for ((v, p), w) in vp.into_iter().filter(|(_, w)| keep(w)) {
        parts.properties.insert(p.clone());
        parts.vp_edges.insert((v, p), w);
    }
    for ((p, o), w) in po.into_iter().filter(|(_, w)| keep(w)) {
        parts.properties.insert(p.clone());
        parts.objects.insert(o.clone());
        parts.po_edges.insert((p, o), w);
    }
    Ok(KnowledgeBase::from_parts(parts).expect("ingested edges satisfy invariants"))
}

pub fn direct_property(verb: &str) -> String {
    format!("direct_{verb}")
}

/// Imports flat verb–object knowledge: each verb gets a synthetic
/// `direct_<verb>` property with `w_vp = 1`, and each pair becomes a
/// `w_po` edge from that property.
pub fn import_flat(pairs: &[FlatPair]) -> Result<KnowledgeBase, IngestError> {
    let edges = collect_edges(
        Table::FlatPairs,
        pairs.iter().map(|r| (r.verb.as_str(), r.object.as_str(), r.weight)),
    )?;
    let mut parts = KbParts { version: 1, ..KbParts::default() };
    for ((verb, object), w) in edges {
        let property = direct_property(&verb);
        parts.vp_edges.insert((verb.clone(), property.clone()), 1.0);
        parts.po_edges.insert((property.clone(), object.clone()), w);
        parts.verbs.insert(verb);
        parts.properties.insert(property);
        parts.objects.insert(object);
    }
    Ok(KnowledgeBase::from_parts(parts).expect("imported edges satisfy invariants"))
}

/// Exports the edges of `kb` back to scored rows, in key order.
pub fn export_rows(kb: &KnowledgeBase) -> (Vec<PropertyScoreRow>, Vec<ObjectScoreRow>) {
    let stage1 = kb
        .vp_edges()
        .map(|(v, p, w)| PropertyScoreRow { verb: v.into(), property: p.into(), weight: w })
        .collect();
    let stage2 = kb
        .po_edges()
        .map(|(p, o, w)| ObjectScoreRow { property: p.into(), object: o.into(), weight: w })
        .collect();
    (stage1, stage2)
}

/// Unions two knowledge bases. Conflicting weights are resolved by `policy`
/// and the result's version is one past the larger input version.
pub fn merge(a: &KnowledgeBase, b: &KnowledgeBase, policy: MergePolicy) -> KnowledgeBase {
    let pa = a.to_parts();
    let pb = b.to_parts();
    let resolve = |x: f64, y: f64| match policy {
        MergePolicy::Max => x.max(y),
        MergePolicy::Mean => (x + y) / 2.0,
        MergePolicy::PreferB => y,
    };
    let merge_edges = |ea: BTreeMap<(String, String), f64>, eb: BTreeMap<(String, String), f64>| {
        let mut out = ea;
        for (k, wb) in eb {
            let w = match out.get(&k) {
                Some(&wa) => resolve(wa, wb),
                None => wb,
            };
            out.insert(k, w);
        }
        out
    };
    let parts = KbParts {
        version: a.version().max(b.version()) + 1,
        verbs: pa.verbs.union(&pb.verbs).cloned().collect(),
        properties: pa.properties.union(&pb.properties).cloned().collect(),
        objects: pa.objects.union(&pb.objects).cloned().collect(),
        vp_edges: merge_edges(pa.vp_edges, pb.vp_edges),
        po_edges: merge_edges(pa.po_edges, pb.po_edges),
    };
    KnowledgeBase::from_parts_unchecked(parts)
}
