//! Canonical serialization for knowledge bases, scenes, embedding tables,
//! grounding results and reports.
//!
//! Text documents are JSON objects tagged with a `format` key. The
//! canonical form sorts object keys, indents with two spaces, ends with a
//! newline and prints reals with at most 9 significant digits and no
//! trailing zeros, so save -> load -> save is byte-stable.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;
use thiserror::Error;

use crate::engine::{Explanation, GroundingResult};
use crate::eval::{EvaluationEpisode, PoolItem, Report};
use crate::kb::{KbParts, KnowledgeBase};
use crate::percept::{EmbeddingTable, EmbeddingVector};
use crate::scene::Scene;

pub const KB_FORMAT: &str = "affkb/1";
pub const SCENE_FORMAT: &str = "affscene/1";
pub const EMB_FORMAT: &str = "affemb/1";
pub const REPORT_FORMAT: &str = "affreport/1";
pub const RESULT_FORMAT: &str = "affresult/1";
pub const EPISODES_FORMAT: &str = "affepisodes/1";
pub const POOL_FORMAT: &str = "affpool/1";

pub const EMB_MAGIC: &[u8; 8] = b"AFFEMB1\0";

/// Significant digits kept for reals in canonical output.
pub const SIGNIFICANT_DIGITS: usize = 9;

/// A problem located inside a document, e.g. `vp_edges[0].weight`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DocIssue {
    pub path: String,
    pub message: String,
}

impl DocIssue {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        DocIssue { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for DocIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed JSON: {0}")]
    Syntax(String),
    #[error("expected format `{expected}`, found `{found}`")]
    Format { expected: String, found: String },
    #[error("parse error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid document: {}", join_issues(.0))]
    Invalid(Vec<DocIssue>),
    #[error("embedding table: {0}")]
    Embedding(String),
    #[error("unresolved embedding ids: {}", .0.join(", "))]
    Unresolved(Vec<String>),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", .path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
}

fn join_issues(issues: &[DocIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl DataError {
    /// Issues of an `Invalid` error, looking through file wrappers.
    pub fn issues(&self) -> &[DocIssue] {
        match self {
            DataError::Invalid(v) => v,
            DataError::File { source, .. } => source.issues(),
            _ => &[],
        }
    }
}

/// Formats a real with at most [`SIGNIFICANT_DIGITS`] significant digits,
/// without trailing zeros. Positional notation for decimal exponents in
/// `-7..21`, scientific otherwise.
pub fn format_real(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        // Non-finite reals never reach the writer; JSON has no spelling.
        return "0".into();
    }
    let sci = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("`e` formatting has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let digits = digits.trim_end_matches('0');
    let digits = if digits.is_empty() { "0" } else { digits };

    if (-7..21).contains(&exp) {
        let mut out = String::from(sign);
        if exp < 0 {
            out.push_str("0.");
            out.extend(std::iter::repeat_n('0', (-exp - 1) as usize));
            out.push_str(digits);
        } else {
            let int_len = exp as usize + 1;
            if digits.len() <= int_len {
                out.push_str(digits);
                out.extend(std::iter::repeat_n('0', int_len - digits.len()));
            } else {
                out.push_str(&digits[..int_len]);
                out.push('.');
                out.push_str(&digits[int_len..]);
            }
        }
        out
    } else {
        let (head, tail) = digits.split_at(1);
        if tail.is_empty() {
            format!("{sign}{head}e{exp}")
        } else {
            format!("{sign}{head}.{tail}e{exp}")
        }
    }
}

struct CanonicalFormatter {
    inner: PrettyFormatter<'static>,
}

impl Formatter for CanonicalFormatter {
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        w.write_all(format_real(f64::from(v)).as_bytes())
    }
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        w.write_all(format_real(v).as_bytes())
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Canonical bytes of a JSON value. Keys come out sorted because
/// `serde_json::Map` is ordered.
pub fn to_canonical(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(
        &mut out,
        CanonicalFormatter { inner: PrettyFormatter::with_indent(b"  ") },
    );
    value.serialize(&mut ser).expect("writing to a Vec cannot fail");
    out.push(b'\n');
    out
}

fn value_of(x: &impl Serialize) -> Value {
    serde_json::to_value(x).expect("document types serialize to JSON")
}

fn tagged(tag: &str, x: &impl Serialize) -> Vec<u8> {
    let mut v = value_of(x);
    if let Value::Object(m) = &mut v {
        m.insert("format".into(), Value::String(tag.into()));
    }
    to_canonical(&v)
}

/// Re-emits any JSON document in canonical form.
pub fn canonicalize(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    Ok(to_canonical(&parse_json(bytes)?))
}

fn parse_json(bytes: &[u8]) -> Result<Value, DataError> {
    serde_json::from_slice(bytes).map_err(|e| DataError::Syntax(e.to_string()))
}

/// Returns the `format` tag of a document, if it has one.
pub fn format_tag(bytes: &[u8]) -> Result<Option<String>, DataError> {
    Ok(parse_json(bytes)?.get("format").and_then(Value::as_str).map(String::from))
}

fn untag(bytes: &[u8], expected: &str) -> Result<Value, DataError> {
    let mut v = parse_json(bytes)?;
    let Value::Object(m) = &mut v else {
        return Err(DataError::Schema { path: ".".into(), message: "expected a JSON object".into() });
    };
    match m.remove("format") {
        Some(Value::String(s)) if s == expected => Ok(v),
        Some(other) => Err(DataError::Format {
            expected: expected.into(),
            found: other.as_str().map(String::from).unwrap_or_else(|| other.to_string()),
        }),
        None => Err(DataError::Schema { path: "format".into(), message: format!("missing, expected `{expected}`") }),
    }
}

fn typed<T: DeserializeOwned>(v: Value) -> Result<T, DataError> {
    serde_path_to_error::deserialize(v).map_err(|e| DataError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbDoc {
    version: u64,
    verbs: Vec<String>,
    properties: Vec<String>,
    objects: Vec<String>,
    vp_edges: Vec<VpEdgeDoc>,
    po_edges: Vec<PoEdgeDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VpEdgeDoc {
    verb: String,
    property: String,
    weight: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoEdgeDoc {
    property: String,
    object: String,
    weight: f64,
}

pub fn save_kb(kb: &KnowledgeBase) -> Vec<u8> {
    let doc = KbDoc {
        version: kb.version(),
        verbs: kb.verbs().iter().cloned().collect(),
        properties: kb.properties().iter().cloned().collect(),
        objects: kb.objects().iter().cloned().collect(),
        vp_edges: kb
            .vp_edges()
            .map(|(v, p, w)| VpEdgeDoc { verb: v.into(), property: p.into(), weight: w })
            .collect(),
        po_edges: kb
            .po_edges()
            .map(|(p, o, w)| PoEdgeDoc { property: p.into(), object: o.into(), weight: w })
            .collect(),
    };
    tagged(KB_FORMAT, &doc)
}

/// A knowledge base read without enforcing its invariants, plus every
/// invariant violation found, located in the document.
#[derive(Debug, Clone)]
pub struct KbInspection {
    pub kb: KnowledgeBase,
    pub issues: Vec<DocIssue>,
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

fn check_nodes(field: &str, names: &[String], issues: &mut Vec<DocIssue>) -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    for (i, n) in names.iter().enumerate() {
        if !is_ident(n) {
            issues.push(DocIssue::new(format!("{field}[{i}]"), format!("`{n}` is not a lowercase identifier")));
        }
        if !set.insert(n.clone()) {
            issues.push(DocIssue::new(format!("{field}[{i}]"), format!("duplicate `{n}`")));
        }
    }
    set
}

#[allow(clippy::too_many_arguments)]
fn check_edge(
    field: &str,
    i: usize,
    (from_role, from, from_set): (&str, &str, &BTreeSet<String>),
    (to_role, to, to_set): (&str, &str, &BTreeSet<String>),
    weight: f64,
    seen: &mut HashSet<(String, String)>,
    edges: &mut BTreeMap<(String, String), f64>,
    issues: &mut Vec<DocIssue>,
) {
    if !from_set.contains(from) {
        issues.push(DocIssue::new(format!("{field}[{i}].{from_role}"), format!("undeclared {from_role} `{from}`")));
    }
    if !to_set.contains(to) {
        issues.push(DocIssue::new(format!("{field}[{i}].{to_role}"), format!("undeclared {to_role} `{to}`")));
    }
    if !(0.0..=1.0).contains(&weight) {
        issues.push(DocIssue::new(format!("{field}[{i}].weight"), format!("weight {weight} is outside [0, 1]")));
    }
    let key = (from.to_string(), to.to_string());
    if !seen.insert(key.clone()) {
        issues.push(DocIssue::new(format!("{field}[{i}]"), format!("duplicate edge ({from}, {to})")));
    }
    edges.insert(key, weight);
}

/// Parses an affkb/1 document, collecting every invariant violation
/// instead of stopping at the first.
pub fn inspect_kb(bytes: &[u8]) -> Result<KbInspection, DataError> {
    let doc: KbDoc = typed(untag(bytes, KB_FORMAT)?)?;
    let mut issues = Vec::new();
    if doc.version == 0 {
        issues.push(DocIssue::new("version", "version must be at least 1"));
    }
    let verbs = check_nodes("verbs", &doc.verbs, &mut issues);
    let properties = check_nodes("properties", &doc.properties, &mut issues);
    let objects = check_nodes("objects", &doc.objects, &mut issues);

    let mut vp_edges = BTreeMap::new();
    let mut seen = HashSet::new();
    for (i, e) in doc.vp_edges.iter().enumerate() {
        check_edge(
            "vp_edges",
            i,
            ("verb", &e.verb, &verbs),
            ("property", &e.property, &properties),
            e.weight,
            &mut seen,
            &mut vp_edges,
            &mut issues,
        );
    }
    let mut po_edges = BTreeMap::new();
    seen.clear();
    for (i, e) in doc.po_edges.iter().enumerate() {
        check_edge(
            "po_edges",
            i,
            ("property", &e.property, &properties),
            ("object", &e.object, &objects),
            e.weight,
            &mut seen,
            &mut po_edges,
            &mut issues,
        );
    }
    let kb = KnowledgeBase::from_parts_unchecked(KbParts {
        version: doc.version,
        verbs,
        properties,
        objects,
        vp_edges,
        po_edges,
    });
    Ok(KbInspection { kb, issues })
}

pub fn load_kb(bytes: &[u8]) -> Result<KnowledgeBase, DataError> {
    let ins = inspect_kb(bytes)?;
    if ins.issues.is_empty() {
        Ok(ins.kb)
    } else {
        Err(DataError::Invalid(ins.issues))
    }
}

pub fn save_scene(scene: &Scene) -> Vec<u8> {
    tagged(SCENE_FORMAT, scene)
}

pub fn load_scene(bytes: &[u8]) -> Result<Scene, DataError> {
    let scene: Scene = typed(untag(bytes, SCENE_FORMAT)?)?;
    let issues: Vec<DocIssue> =
        scene.validate().into_iter().map(|i| DocIssue::new(i.path, i.message)).collect();
    if issues.is_empty() {
        Ok(scene)
    } else {
        Err(DataError::Invalid(issues))
    }
}

/// Every referenced embedding id resolves, or all missing ids are named.
pub fn check_scene_embeddings(scene: &Scene, table: &EmbeddingTable) -> Result<(), DataError> {
    let missing = table.missing(scene.candidates.iter().map(|c| c.embedding_id.as_str()));
    if missing.is_empty() {
        Ok(())
    } else {
        Err(DataError::Unresolved(missing))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbDoc {
    dim: usize,
    vectors: Vec<EmbeddingVector>,
}

/// Loads either the binary sidecar (detected by its magic bytes) or the
/// inline affemb/1 text form.
pub fn load_embeddings(bytes: &[u8]) -> Result<EmbeddingTable, DataError> {
    if bytes.starts_with(EMB_MAGIC) {
        load_embeddings_binary(bytes)
    } else {
        let doc: EmbDoc = typed(untag(bytes, EMB_FORMAT)?)?;
        let mut table = EmbeddingTable::new(doc.dim);
        if doc.dim == 0 {
            return Err(DataError::Schema { path: "dim".into(), message: "dim must be positive".into() });
        }
        for (i, v) in doc.vectors.into_iter().enumerate() {
            table.insert(v).map_err(|e| DataError::Schema {
                path: format!("vectors[{i}]"),
                message: e.to_string(),
            })?;
        }
        Ok(table)
    }
}

fn u32_at(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().expect("4-byte slice")))
}

pub fn load_embeddings_binary(bytes: &[u8]) -> Result<EmbeddingTable, DataError> {
    let err = |m: String| DataError::Embedding(m);
    if !bytes.starts_with(EMB_MAGIC) {
        return Err(err("bad magic bytes".into()));
    }
    let count = u32_at(bytes, 8).ok_or_else(|| err("truncated header".into()))? as usize;
    let dim = u32_at(bytes, 12).ok_or_else(|| err("truncated header".into()))? as usize;
    if dim == 0 {
        return Err(err("dim must be positive".into()));
    }
    let body = 16usize;
    let payload = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| err("header sizes overflow".into()))?;
    let end = body + payload;
    if bytes.len() < end {
        return Err(err(format!(
            "truncated payload: header declares {count}x{dim} reals ({payload} bytes), found {}",
            bytes.len() - body
        )));
    }
    let ids = std::str::from_utf8(&bytes[end..]).map_err(|e| err(format!("id list is not UTF-8: {e}")))?;
    let ids: Vec<&str> = ids.strip_suffix('\n').unwrap_or(ids).split('\n').filter(|_| count > 0).collect();
    if let Some(bad) = ids.iter().find(|id| id.is_empty() || id.chars().any(char::is_control)) {
        return Err(err(format!("malformed id {bad:?}: payload size does not match the header")));
    }
    if ids.len() != count {
        return Err(err(format!("header declares {count} vectors but id list has {}", ids.len())));
    }
    let mut table = EmbeddingTable::new(dim);
    for (i, id) in ids.into_iter().enumerate() {
        let values = bytes[body + i * dim * 4..body + (i + 1) * dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        table
            .insert(EmbeddingVector::new(id, values))
            .map_err(|e| err(format!("vector {i}: {e}")))?;
    }
    Ok(table)
}

pub fn save_embeddings_binary(table: &EmbeddingTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + table.len() * (table.dim() * 4 + 16));
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    out.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    for v in table.iter() {
        for x in &v.values {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for v in table.iter() {
        out.extend_from_slice(v.id.as_bytes());
        out.push(b'\n');
    }
    out
}

pub fn save_embeddings_text(table: &EmbeddingTable) -> Vec<u8> {
    let doc = EmbDoc { dim: table.dim(), vectors: table.iter().cloned().collect() };
    tagged(EMB_FORMAT, &doc)
}

#[derive(Serialize)]
struct ResultDoc<'a> {
    #[serde(flatten)]
    result: &'a GroundingResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    explanations: Option<&'a [Explanation]>,
}

pub fn result_value(result: &GroundingResult, explanations: Option<&[Explanation]>) -> Value {
    let mut v = value_of(&ResultDoc { result, explanations });
    if let Value::Object(m) = &mut v {
        m.insert("format".into(), Value::String(RESULT_FORMAT.into()));
    }
    v
}

pub fn save_result(result: &GroundingResult, explanations: Option<&[Explanation]>) -> Vec<u8> {
    to_canonical(&result_value(result, explanations))
}

pub fn load_result(bytes: &[u8]) -> Result<GroundingResult, DataError> {
    let mut v = untag(bytes, RESULT_FORMAT)?;
    if let Value::Object(m) = &mut v {
        m.remove("explanations");
    }
    typed(v)
}

pub fn save_report(report: &Report) -> Vec<u8> {
    tagged(REPORT_FORMAT, report)
}

pub fn load_report(bytes: &[u8]) -> Result<Report, DataError> {
    typed(untag(bytes, REPORT_FORMAT)?)
}

/// Tab-separated table: a header of the report columns, then one line per
/// row. Reals use the canonical spelling.
pub fn render_table(report: &Report) -> String {
    let cell = |v: Option<&Value>| match v {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) if n.is_f64() => format_real(n.as_f64().unwrap_or(0.0)),
        Some(other) => other.to_string(),
    };
    let mut out = report.columns.join("\t");
    out.push('\n');
    for row in &report.rows {
        let line: Vec<String> = report.columns.iter().map(|c| cell(row.get(c))).collect();
        out.push_str(&line.join("\t"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodesDoc {
    episodes: Vec<EvaluationEpisode>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolDoc {
    items: Vec<PoolItem>,
}

/// Input of an episode evaluation: explicit episodes, or a pool to sample
/// them from.
#[derive(Debug, Clone, PartialEq)]
pub enum EpisodeInput {
    Episodes(Vec<EvaluationEpisode>),
    Pool(Vec<PoolItem>),
}

pub fn load_episode_input(bytes: &[u8]) -> Result<EpisodeInput, DataError> {
    match format_tag(bytes)?.as_deref() {
        Some(POOL_FORMAT) => Ok(EpisodeInput::Pool(typed::<PoolDoc>(untag(bytes, POOL_FORMAT)?)?.items)),
        _ => Ok(EpisodeInput::Episodes(typed::<EpisodesDoc>(untag(bytes, EPISODES_FORMAT)?)?.episodes)),
    }
}

pub fn save_episodes(episodes: &[EvaluationEpisode]) -> Vec<u8> {
    tagged(EPISODES_FORMAT, &EpisodesDoc { episodes: episodes.to_vec() })
}

pub fn save_pool(items: &[PoolItem]) -> Vec<u8> {
    tagged(POOL_FORMAT, &PoolDoc { items: items.to_vec() })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    std::fs::write(path, bytes).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn in_file<T>(path: &Path, r: Result<T, DataError>) -> Result<T, DataError> {
    r.map_err(|e| match e {
        e @ DataError::Io { .. } => e,
        e => DataError::File { path: path.to_path_buf(), source: Box::new(e) },
    })
}

pub fn load_kb_file(path: &Path) -> Result<KnowledgeBase, DataError> {
    in_file(path, read_file(path).and_then(|b| load_kb(&b)))
}

pub fn load_scene_file(path: &Path) -> Result<Scene, DataError> {
    in_file(path, read_file(path).and_then(|b| load_scene(&b)))
}

pub fn load_embeddings_file(path: &Path) -> Result<EmbeddingTable, DataError> {
    in_file(path, read_file(path).and_then(|b| load_embeddings(&b)))
}

/// All `*.json` scenes in `dir`, in file-name order.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<Scene>, DataError> {
    let io_err = |source| DataError::Io { path: dir.to_path_buf(), source };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err)?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    paths.iter().map(|p| load_scene_file(p)).collect()
}
