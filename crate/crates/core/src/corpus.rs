//! Canonical line-delimited corpus files and per-dataset schema files.
//!
//! One JSON record per line:
//!
//! ```text
//! {"id":"…","dataset":"…","language":"zh|en","text":"…","entities":[{"start":0,"end":4,"type":"…","text":"…"}]}
//! ```
//!
//! Prediction files use the same layout with the predicted entity set.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{validate_sentence, DatasetSchema, EntitySpan, Language, SchemaError, Sentence, Violation};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: no schema for dataset {dataset:?}")]
    SchemaNotFound { line: usize, dataset: String },
    #[error("line {line}: {}", format_violations(.violations))]
    Validation { line: usize, violations: Vec<Violation> },
    #[error("{path}: {reason}")]
    Schema { path: PathBuf, reason: String },
    #[error(transparent)]
    InvalidSchema(#[from] SchemaError),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Schemas keyed by dataset name.
pub type SchemaRegistry = BTreeMap<String, DatasetSchema>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub etype: String,
    pub text: String,
}

/// Wire form of a [`Sentence`]; field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub dataset: String,
    pub language: Language,
    pub text: String,
    pub entities: Vec<EntityRecord>,
}

impl From<&Sentence> for SentenceRecord {
    fn from(s: &Sentence) -> Self {
        SentenceRecord {
            id: s.id.clone(),
            dataset: s.dataset.clone(),
            language: s.language,
            text: s.text.clone(),
            entities: s
                .entities
                .iter()
                .map(|e| EntityRecord { start: e.start, end: e.end, etype: e.etype.clone(), text: e.text.clone() })
                .collect(),
        }
    }
}

impl From<SentenceRecord> for Sentence {
    fn from(r: SentenceRecord) -> Self {
        Sentence {
            id: r.id,
            text: r.text,
            language: r.language,
            dataset: r.dataset,
            entities: r.entities.into_iter().map(|e| EntitySpan::new(e.start, e.end, e.etype, e.text)).collect(),
        }
    }
}

/// Serializes one sentence as a single line (no trailing newline).
pub fn sentence_to_line(s: &Sentence) -> String {
    serde_json::to_string(&SentenceRecord::from(s)).expect("sentence records always serialize")
}

/// How to treat records that fail validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Abort on the first bad record.
    Strict,
    /// Skip bad records and count them.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedRecord {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub sentences: Vec<Sentence>,
    pub skipped: Vec<SkippedRecord>,
}

/// Parses corpus text. With `schemas == None` only structural invariants
/// are checked (offsets, surface text, duplicates).
pub fn parse_corpus(
    content: &str,
    schemas: Option<&SchemaRegistry>,
    mode: LoadMode,
) -> Result<LoadedCorpus, CorpusError> {
    let mut out = LoadedCorpus::default();
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        match parse_record(raw, line, schemas) {
            Ok(s) => out.sentences.push(s),
            Err(e) => match mode {
                LoadMode::Strict => return Err(e),
                LoadMode::Lenient => {
                    log::warn!("skipping record: {e}");
                    out.skipped.push(SkippedRecord { line, reason: e.to_string() });
                }
            },
        }
    }
    Ok(out)
}

fn parse_record(raw: &str, line: usize, schemas: Option<&SchemaRegistry>) -> Result<Sentence, CorpusError> {
    let record: SentenceRecord =
        serde_json::from_str(raw).map_err(|e| CorpusError::Parse { line, reason: e.to_string() })?;
    let sentence = Sentence::from(record);
    let schema = match schemas {
        Some(reg) => Some(
            reg.get(&sentence.dataset)
                .ok_or_else(|| CorpusError::SchemaNotFound { line, dataset: sentence.dataset.clone() })?,
        ),
        None => None,
    };
    let violations = validate_sentence(&sentence, schema);
    if !violations.is_empty() {
        return Err(CorpusError::Validation { line, violations });
    }
    Ok(sentence)
}

pub fn load_corpus(
    path: impl AsRef<Path>,
    schemas: Option<&SchemaRegistry>,
    mode: LoadMode,
) -> Result<LoadedCorpus, CorpusError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    parse_corpus(&content, schemas, mode)
}

pub fn write_corpus(sentences: &[Sentence], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let lines = sentences.iter().map(sentence_to_line);
    write_lines(path.as_ref(), lines)
}

pub(crate) fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let file = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    for line in lines {
        w.write_all(line.as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads non-blank lines and deserializes each as `T`.
pub(crate) fn read_json_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| CorpusError::Parse { line: idx + 1, reason: e.to_string() })?;
        out.push(v);
    }
    Ok(out)
}

/// Loads one schema file: `{"name": …, "language": …, "types": [{"name": …, "definition": …}]}`.
pub fn load_schema(path: impl AsRef<Path>) -> Result<DatasetSchema, CorpusError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let schema: DatasetSchema = serde_json::from_str(&content)
        .map_err(|e| CorpusError::Schema { path: path.to_path_buf(), reason: e.to_string() })?;
    schema.validate()?;
    Ok(schema)
}

/// Loads every `*.json` file in `dir` as a schema.
pub fn load_schema_dir(dir: impl AsRef<Path>) -> Result<SchemaRegistry, CorpusError> {
    let dir = dir.as_ref();
    let io = |source| CorpusError::Io { path: dir.to_path_buf(), source };
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut reg = SchemaRegistry::new();
    for p in paths {
        let schema = load_schema(&p)?;
        if reg.contains_key(&schema.name) {
            return Err(CorpusError::Schema { path: p, reason: format!("duplicate schema {:?}", schema.name) });
        }
        reg.insert(schema.name.clone(), schema);
    }
    Ok(reg)
}

pub fn write_schema(schema: &DatasetSchema, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let body = serde_json::to_string_pretty(schema).expect("schemas always serialize");
    fs::write(path, body + "\n").map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}
